"""Desk-scale VGG-style and bottleneck-ResNet-style domain adaptation backbones."""
from __future__ import annotations

from collections import defaultdict

import numpy as np

from .autograd import ParameterStore, forward_pass
from .errors import ConfigError, StructuralError
from .graph import INPUT, ChannelId, LayerSpec, ModelGraph

MIN_CHANNELS = 2


def build_small_vgg(channel_plan, fc_widths, class_count, input_shape=(3, 16, 16), batch_norm=True):
    """Conv blocks (3x3 conv, BN, ReLU, 2x2 max-pool) then ``len(fc_widths)`` hidden FC layers.

    Every conv and the first FC layer are prunable; the second FC layer's
    (post-ReLU) output is the representation used for the MMD loss.
    """
    if class_count < 2:
        raise ConfigError(f"class_count must be >= 2, got {class_count}")
    if not channel_plan:
        raise ConfigError("channel_plan must be non-empty")
    if len(fc_widths) < 2:
        raise ConfigError("fc_widths needs at least two hidden layers")
    if min(channel_plan) < MIN_CHANNELS or min(fc_widths) < MIN_CHANNELS:
        raise ConfigError(f"every layer needs at least {MIN_CHANNELS} channels")
    c, h, w = input_shape
    layers = []
    for i, out in enumerate(channel_plan, start=1):
        layers.append(LayerSpec(f"conv{i}", "conv", c, out, kernel=3, padding=1, bias=not batch_norm, prunable=True))
        if batch_norm:
            layers.append(LayerSpec(f"bn{i}", "bn", out, out))
        layers.append(LayerSpec(f"relu{i}", "relu", out, out))
        if min(h, w) >= 2:
            layers.append(LayerSpec(f"pool{i}", "maxpool", out, out, kernel=2, stride=2))
            h, w = h // 2, w // 2
        c = out
    layers.append(LayerSpec("flatten", "flatten", c, c * h * w))
    width = c * h * w
    for j, fw in enumerate(fc_widths, start=1):
        layers.append(LayerSpec(f"fc{j}", "fc", width, fw, prunable=(j == 1), is_representation=(j == 2)))
        layers.append(LayerSpec(f"fc{j}_relu", "relu", fw, fw))
        width = fw
    layers.append(LayerSpec("classifier", "fc", width, class_count))
    return ModelGraph(layers, input_shape, class_count, name="small-vgg")


def build_small_resnet(block_plan, class_count, input_shape=(3, 16, 16), stem_channels=None):
    """Bottleneck blocks (1x1 reduce, 3x3, 1x1 expand); only the reduce and 3x3 convs are prunable.

    ``block_plan`` entries are ``(outer, inner)`` or ``(outer, inner, stride)``.
    A 1x1 projection (conv+BN) is inserted on the skip path whenever the
    block changes width or resolution. The single FC head is the representation.
    """
    if class_count < 2:
        raise ConfigError(f"class_count must be >= 2, got {class_count}")
    if not block_plan:
        raise ConfigError("block_plan must be non-empty")
    c_in, h, w = input_shape
    stem = stem_channels or block_plan[0][0]
    layers = [
        LayerSpec("stem.conv", "conv", c_in, stem, kernel=3, padding=1, bias=False),
        LayerSpec("stem.bn", "bn", stem, stem),
        LayerSpec("stem.relu", "relu", stem, stem),
    ]
    prev, c = "stem.relu", stem
    for b, entry in enumerate(block_plan, start=1):
        outer, inner = entry[0], entry[1]
        stride = entry[2] if len(entry) > 2 else 1
        if inner < MIN_CHANNELS:
            raise ConfigError(f"block{b}: inner channels {inner} below the floor of {MIN_CHANNELS}")
        p = f"block{b}"
        layers += [
            LayerSpec(f"{p}.conv1", "conv", c, inner, kernel=1, bias=False, inputs=(prev,), prunable=True),
            LayerSpec(f"{p}.bn1", "bn", inner, inner),
            LayerSpec(f"{p}.relu1", "relu", inner, inner),
            LayerSpec(f"{p}.conv2", "conv", inner, inner, kernel=3, stride=stride, padding=1, bias=False, prunable=True),
            LayerSpec(f"{p}.bn2", "bn", inner, inner),
            LayerSpec(f"{p}.relu2", "relu", inner, inner),
            LayerSpec(f"{p}.conv3", "conv", inner, outer, kernel=1, bias=False),
            LayerSpec(f"{p}.bn3", "bn", outer, outer),
        ]
        skip = prev
        if outer != c or stride != 1:
            layers += [
                LayerSpec(f"{p}.proj", "conv", c, outer, kernel=1, stride=stride, bias=False, inputs=(prev,)),
                LayerSpec(f"{p}.proj_bn", "bn", outer, outer),
            ]
            skip = f"{p}.proj_bn"
        layers += [
            LayerSpec(f"{p}.add", "residual_add", outer, outer, inputs=(f"{p}.bn3", skip)),
            LayerSpec(f"{p}.relu3", "relu", outer, outer),
        ]
        h, w = (h - 1) // stride + 1, (w - 1) // stride + 1
        prev, c = f"{p}.relu3", outer
    layers += [
        LayerSpec("gap", "avgpool", c, c, kernel=h, stride=h),  # square maps assumed
        LayerSpec("flatten", "flatten", c, c),
        LayerSpec("fc", "fc", c, class_count, is_representation=True),
    ]
    if h != w:
        raise ConfigError("small-resnet expects square inputs")
    return ModelGraph(layers, input_shape, class_count, name="small-resnet")


def init_params(graph: ModelGraph, seed=0, profile="standard") -> ParameterStore:
    """He-normal weights, zero biases, identity batch-norm."""
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}
    for layer in graph.layers:
        for name, shape in layer.param_shapes().items():
            suffix = name.rsplit(".", 1)[1]
            if suffix == "weight":
                fan_in = int(np.prod(shape[1:]))
                params[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            elif suffix in ("bias", "beta"):
                params[name] = np.zeros(shape)
            elif suffix == "gamma":
                params[name] = np.ones(shape)
            elif suffix == "running_mean":
                buffers[name] = np.zeros(shape)
            elif suffix == "running_var":
                buffers[name] = np.ones(shape)
    return ParameterStore(params, buffers, profile)


def all_channels(graph: ModelGraph):
    return [ChannelId(l.id, i) for l in graph.prunable_layers() for i in range(l.out_channels)]


def masks_for(graph: ModelGraph, channels):
    """Translate ChannelIds into forward-pass masks keyed by activation point."""
    masks = defaultdict(set)
    for ch in channels:
        ch = ChannelId(*ch)
        if ch.layer not in graph:
            raise StructuralError(f"masked channel {ch}: no such layer")
        layer = graph[ch.layer]
        if not layer.prunable:
            raise StructuralError(f"masked channel {ch}: layer is not prunable")
        if not 0 <= ch.index < layer.out_channels:
            raise StructuralError(f"masked channel {ch}: layer has {layer.out_channels} channels")
        masks[graph.activation_point(ch.layer)].add(ch.index)
    return {k: sorted(v) for k, v in masks.items()}


def masked_forward(graph, params, x, masked_channels=(), train=False):
    """Forward pass with the listed channels' block outputs forced to zero."""
    return forward_pass(graph, params, x, record=False, train=train,
                        masks=masks_for(graph, masked_channels)).output


__all__ = ["build_small_vgg", "build_small_resnet", "init_params", "masked_forward",
           "masks_for", "all_channels", "MIN_CHANNELS", "INPUT"]
