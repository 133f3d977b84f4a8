"""Layer graph description shared by the engine, zoo, surgery and accounting.

A :class:`ModelGraph` is an ordered list of :class:`LayerSpec`. Every layer reads
from ``inputs`` (layer ids, or ``"input"`` for the graph input); an empty
``inputs`` tuple means "the previous layer". Residual adds list both operands
explicitly, which is how skip edges are encoded.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import yaml

from .errors import StructuralError

INPUT = "input"

KINDS = ("conv", "bn", "relu", "maxpool", "avgpool", "flatten", "fc", "residual_add")
# layers that map channel c of their input to channel c of their output
CHANNELWISE = ("bn", "relu", "maxpool", "avgpool")
WEIGHTED = ("conv", "fc")


class ChannelId(NamedTuple):
    layer: str
    index: int

    def __str__(self):
        return f"{self.layer}[{self.index}]"


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    bias: bool = True
    inputs: tuple = ()
    prunable: bool = False
    is_representation: bool = False

    def param_names(self):
        if self.kind in WEIGHTED:
            names = [f"{self.id}.weight"]
            if self.bias:
                names.append(f"{self.id}.bias")
            return names
        if self.kind == "bn":
            return [f"{self.id}.gamma", f"{self.id}.beta"]
        return []

    def buffer_names(self):
        if self.kind == "bn":
            return [f"{self.id}.running_mean", f"{self.id}.running_var"]
        return []

    def param_shapes(self):
        if self.kind == "conv":
            shapes = {f"{self.id}.weight": (self.out_channels, self.in_channels, self.kernel, self.kernel)}
        elif self.kind == "fc":
            shapes = {f"{self.id}.weight": (self.out_channels, self.in_channels)}
        elif self.kind == "bn":
            return {n: (self.out_channels,) for n in self.param_names() + self.buffer_names()}
        else:
            return {}
        if self.bias:
            shapes[f"{self.id}.bias"] = (self.out_channels,)
        return shapes


@dataclass(frozen=True)
class ModelGraph:
    layers: tuple
    input_shape: tuple  # (C, H, W)
    num_classes: int
    name: str = "graph"
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        index = {}
        for pos, layer in enumerate(self.layers):
            if layer.kind not in KINDS:
                raise StructuralError(f"layer {layer.id!r}: unknown kind {layer.kind!r}")
            if layer.id in index or layer.id == INPUT:
                raise StructuralError(f"duplicate layer id {layer.id!r}")
            index[layer.id] = pos
        object.__setattr__(self, "_index", index)

    def __getitem__(self, layer_id) -> LayerSpec:
        try:
            return self.layers[self._index[layer_id]]
        except KeyError:
            raise StructuralError(f"no layer named {layer_id!r}") from None

    def __contains__(self, layer_id):
        return layer_id in self._index

    def position(self, layer_id):
        return self._index[layer_id]

    def inputs_of(self, layer: LayerSpec):
        if layer.inputs:
            return layer.inputs
        pos = self._index[layer.id]
        return (self.layers[pos - 1].id,) if pos > 0 else (INPUT,)

    def consumers(self):
        """Map producer id -> list of consumer ids (graph input included)."""
        out = {INPUT: []}
        for layer in self.layers:
            out.setdefault(layer.id, [])
        for layer in self.layers:
            for src in self.inputs_of(layer):
                if src not in out:
                    raise StructuralError(f"layer {layer.id!r} reads unknown producer {src!r}")
                out[src].append(layer.id)
        return out

    @property
    def output_id(self):
        return self.layers[-1].id if self.layers else INPUT

    def representation(self) -> LayerSpec:
        reps = [l for l in self.layers if l.is_representation]
        if len(reps) != 1:
            raise StructuralError(f"expected exactly one representation layer, found {len(reps)}")
        return reps[0]

    def prunable_layers(self):
        return [l for l in self.layers if l.prunable]

    def replace(self, layers: Iterable[LayerSpec]):
        return dataclasses.replace(self, layers=tuple(layers))

    def activation_point(self, layer_id):
        """Id of the layer whose output is the post-BN, post-ReLU block output of ``layer_id``.

        Walks forward through a trailing bn/relu chain as long as each step is the
        sole consumer of the previous one.
        """
        cons = self.consumers()
        point = layer_id
        while True:
            nxt = cons[point]
            if len(nxt) != 1:
                return point
            layer = self[nxt[0]]
            if layer.kind not in ("bn", "relu") or len(self.inputs_of(layer)) != 1:
                return point
            point = layer.id

    def block_chain(self, layer_id):
        """Layers from ``layer_id`` up to and including its activation point."""
        end = self.activation_point(layer_id)
        chain = [layer_id]
        cons = self.consumers()
        while chain[-1] != end:
            chain.append(cons[chain[-1]][0])
        return chain

    # -- shapes ---------------------------------------------------------------
    def shapes(self):
        """Per-sample output shape of every layer, keyed by id (``"input"`` included)."""
        shapes = {INPUT: self.input_shape}
        for layer in self.layers:
            srcs = self.inputs_of(layer)
            try:
                ins = [shapes[s] for s in srcs]
            except KeyError as exc:
                raise StructuralError(f"layer {layer.id!r}: producer {exc.args[0]!r} not yet defined") from None
            shapes[layer.id] = _out_shape(layer, ins)
        return shapes

    # -- description file -------------------------------------------------------
    def to_dict(self):
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [_layer_to_dict(l) for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        layers = []
        for ld in d["layers"]:
            ld = dict(ld)
            ld["inputs"] = tuple(ld.get("inputs", ()))
            layers.append(LayerSpec(**ld))
        return cls(layers=layers, input_shape=tuple(d["input_shape"]),
                   num_classes=int(d["num_classes"]), name=d.get("name", "graph"))

    def dumps(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def loads(cls, text):
        return cls.from_dict(yaml.safe_load(text))


def _layer_to_dict(layer):
    d = {"id": layer.id, "kind": layer.kind,
         "in_channels": layer.in_channels, "out_channels": layer.out_channels}
    if layer.kind in ("conv", "maxpool", "avgpool"):
        d.update(kernel=layer.kernel, stride=layer.stride, padding=layer.padding)
    if layer.kind in WEIGHTED:
        d["bias"] = layer.bias
    if layer.inputs:
        d["inputs"] = list(layer.inputs)
    d["prunable"] = layer.prunable
    d["is_representation"] = layer.is_representation
    return d


def _out_shape(layer, ins):
    src = ins[0]
    kind = layer.kind
    if kind == "residual_add":
        if len(ins) != 2 or ins[0] != ins[1]:
            raise StructuralError(f"layer {layer.id!r}: residual operands disagree {ins}")
        return src
    if kind == "flatten":
        n = 1
        for s in src:
            n *= s
        return (n,)
    if kind == "fc":
        if len(src) != 1:
            raise StructuralError(f"layer {layer.id!r}: fc needs a flat input, got {src}")
        return (layer.out_channels,)
    if kind in ("conv", "maxpool", "avgpool"):
        if len(src) != 3:
            raise StructuralError(f"layer {layer.id!r}: spatial layer needs C×H×W input, got {src}")
        c, h, w = src
        ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
        wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise StructuralError(f"layer {layer.id!r}: empty output for input {src}")
        return (layer.out_channels if kind == "conv" else c, ho, wo)
    return src  # bn, relu
