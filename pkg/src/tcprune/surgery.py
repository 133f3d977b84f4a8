"""Physical channel removal and structural validation."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .autograd import ParameterStore
from .errors import ConfigError, StructuralError
from .graph import CHANNELWISE, INPUT, ChannelId, ModelGraph, _out_shape
from .zoo import MIN_CHANNELS


@dataclass
class SurgeryPlan:
    graph: ModelGraph
    prune_set: list
    remap: dict = field(default_factory=dict)      # producer id -> {old index: new index or None}
    affected: dict = field(default_factory=dict)   # producer id -> consumer ids touched
    edits: list = field(default_factory=list)      # (tensor name, axis, kept indices)
    layer_updates: dict = field(default_factory=dict)  # layer id -> {"in_channels"/"out_channels": n}

    @property
    def is_identity(self):
        return not self.prune_set


def _update(updates, lid, **kw):
    updates.setdefault(lid, {}).update(kw)


def plan_surgery(graph: ModelGraph, prune_set, floor=MIN_CHANNELS) -> SurgeryPlan:
    prune_set = sorted({ChannelId(*c) for c in prune_set})
    plan = SurgeryPlan(graph, prune_set)
    if not prune_set:
        return plan
    shapes = graph.shapes()
    consumers = graph.consumers()
    by_layer = {}
    for ch in prune_set:
        if ch.layer not in graph:
            raise StructuralError(f"cannot prune {ch}: no such layer")
        layer = graph[ch.layer]
        if not layer.prunable:
            raise StructuralError(f"cannot prune {ch}: layer {layer.id!r} is not prunable")
        if not 0 <= ch.index < layer.out_channels:
            raise StructuralError(f"cannot prune {ch}: layer has {layer.out_channels} channels")
        by_layer.setdefault(ch.layer, set()).add(ch.index)

    for lid, removed in by_layer.items():
        layer = graph[lid]
        keep = np.array([i for i in range(layer.out_channels) if i not in removed], dtype=np.int64)
        if len(keep) < floor:
            raise ConfigError(f"pruning {len(removed)} channels of {lid!r} leaves {len(keep)} < floor {floor}")
        plan.remap[lid] = {}
        new = 0
        for old in range(layer.out_channels):
            if old in removed:
                plan.remap[lid][old] = None
            else:
                plan.remap[lid][old] = new
                new += 1
        for name in layer.param_shapes():
            plan.edits.append((name, 0, keep))
        _update(plan.layer_updates, lid, out_channels=len(keep))
        chain = graph.block_chain(lid)
        touched = []
        for cid in chain[1:]:
            c = graph[cid]
            for name in c.param_shapes():
                plan.edits.append((name, 0, keep))
            _update(plan.layer_updates, cid, in_channels=len(keep), out_channels=len(keep))
            touched.append(cid)
        _propagate(graph, consumers, shapes, chain[-1], keep, plan, touched, lid)
        plan.affected[lid] = touched
    return plan


def _propagate(graph, consumers, shapes, node, keep, plan, touched, origin):
    """Slice every consumer of ``node`` whose input channels are indexed by ``keep``."""
    for cid in consumers[node]:
        c = graph[cid]
        touched.append(cid)
        if c.kind == "residual_add":
            raise StructuralError(
                f"channels of {origin!r} reach residual add {cid!r}; outer dimensions are unprunable")
        if c.kind in CHANNELWISE:
            for name in c.param_shapes():
                plan.edits.append((name, 0, keep))
            _update(plan.layer_updates, cid, in_channels=len(keep), out_channels=len(keep))
            _propagate(graph, consumers, shapes, cid, keep, plan, touched, origin)
        elif c.kind in ("conv", "fc"):
            plan.edits.append((f"{cid}.weight", 1, keep))
            _update(plan.layer_updates, cid, in_channels=len(keep))
        elif c.kind == "flatten":
            src_shape = shapes[node]
            block = int(np.prod(src_shape[1:])) if len(src_shape) > 1 else 1
            cols = (keep[:, None] * block + np.arange(block)[None, :]).reshape(-1)
            _update(plan.layer_updates, cid, in_channels=len(keep), out_channels=len(cols))
            _propagate(graph, consumers, shapes, cid, cols, plan, touched, origin)
        else:
            raise StructuralError(f"unsupported consumer kind {c.kind!r} at {cid!r}")


def slice_arrays(plan: SurgeryPlan, arrays: dict):
    """Apply the plan's tensor edits to any name-keyed mapping (params, buffers, momentum)."""
    out = {k: v.copy() for k, v in arrays.items()}
    for name, axis, keep in plan.edits:
        if name in out:
            out[name] = np.ascontiguousarray(np.take(out[name], keep, axis=axis))
    return out


def apply_surgery(graph: ModelGraph, params: ParameterStore, plan: SurgeryPlan):
    """New (graph, params) with the plan's channels physically removed."""
    if plan.graph != graph:
        raise StructuralError("surgery plan was built for a different graph")
    for name, axis, keep in plan.edits:
        if name not in params:
            raise StructuralError(f"plan edits {name!r} which is missing from the parameter store")
        arr = params[name]
        if keep.size and keep.max() >= arr.shape[axis]:
            raise StructuralError(f"plan indexes {name!r} axis {axis} beyond size {arr.shape[axis]}")
    layers = []
    for layer in graph.layers:
        upd = plan.layer_updates.get(layer.id)
        layers.append(dataclasses.replace(layer, **upd) if upd else layer)
    new_graph = graph.replace(layers)
    new_params = ParameterStore(slice_arrays(plan, params.params), slice_arrays(plan, params.buffers),
                                params.profile)
    return new_graph, new_params


def validate_structure(graph: ModelGraph, params: ParameterStore = None):
    """List of human-readable violations; empty iff the graph/params are consistent."""
    problems = []
    try:
        consumers = graph.consumers()
    except StructuralError as exc:
        return [str(exc)]
    reps = [l.id for l in graph.layers if l.is_representation]
    if len(reps) != 1:
        problems.append(f"expected exactly one representation layer, found {reps}")
    for lid, cons in consumers.items():
        if lid != INPUT and not cons and lid != graph.output_id:
            problems.append(f"layer {lid!r} has no consumers (dangling)")
    chans = {INPUT: graph.input_shape[0]}
    shapes = {INPUT: tuple(graph.input_shape)}
    for layer in graph.layers:
        srcs = graph.inputs_of(layer)
        for s in srcs:
            if s not in chans:
                problems.append(f"layer {layer.id!r} reads {s!r} before it is produced")
        if any(s not in chans for s in srcs):
            chans[layer.id] = layer.out_channels
            continue
        got = chans[srcs[0]]
        if got != layer.in_channels:
            problems.append(f"edge {srcs[0]} -> {layer.id}: producer emits {got} channels, "
                            f"consumer expects {layer.in_channels}")
        if layer.kind in CHANNELWISE + ("residual_add",) and layer.in_channels != layer.out_channels:
            problems.append(f"layer {layer.id!r}: channelwise layer maps {layer.in_channels} -> {layer.out_channels}")
        if layer.kind == "residual_add":
            if len(srcs) != 2:
                problems.append(f"residual add {layer.id!r} needs two inputs")
            elif chans[srcs[1]] != got:
                problems.append(f"residual add {layer.id!r}: operands have {got} and {chans[srcs[1]]} channels")
        src_shape = shapes.get(srcs[0])
        if layer.kind == "flatten" and src_shape is not None:
            want = int(np.prod(src_shape))
            if layer.out_channels != want:
                problems.append(f"flatten {layer.id!r}: declares {layer.out_channels} outputs, input has {want}")
        try:
            shapes[layer.id] = _shape_step(graph, layer, [shapes[s] for s in srcs if s in shapes])
        except StructuralError as exc:
            problems.append(str(exc))
            shapes[layer.id] = None
        chans[layer.id] = layer.out_channels
    if params is not None:
        for layer in graph.layers:
            for name, shape in layer.param_shapes().items():
                if name not in params:
                    problems.append(f"missing parameter {name!r}")
                elif tuple(params[name].shape) != tuple(shape):
                    problems.append(f"parameter {name!r} has shape {params[name].shape}, layer implies {shape}")
    return problems


def _shape_step(graph, layer, ins):
    if not ins or any(s is None for s in ins):
        raise StructuralError(f"layer {layer.id!r}: unknown input shape")
    return _out_shape(layer, ins)
