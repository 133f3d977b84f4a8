"""Layer-level reverse-mode differentiation over a :class:`ModelGraph`.

Each layer kind has a forward kernel returning ``(output, cache)`` and a
backward kernel mapping the output gradient to input and parameter gradients.
``forward_pass`` records a tape (the :class:`ActivationTrace`) and
``backward_pass`` walks it in reverse, summing gradients where one activation
feeds several consumers.
"""
from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, NumericError, StructuralError, UsageError
from .graph import INPUT, ModelGraph

log = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

PROFILES = {"standard": np.float32, "high": np.float64}


@dataclass
class ParameterStore:
    """Named trainable tensors plus non-trainable buffers (BN running stats)."""

    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    profile: str = "standard"

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown numeric profile {self.profile!r}")
        dt = self.dtype
        self.params = {k: np.asarray(v, dtype=dt) for k, v in self.params.items()}
        self.buffers = {k: np.asarray(v, dtype=dt) for k, v in self.buffers.items()}

    @property
    def dtype(self):
        return PROFILES[self.profile]

    def __getitem__(self, name):
        if name in self.params:
            return self.params[name]
        if name in self.buffers:
            return self.buffers[name]
        raise StructuralError(f"missing parameter {name!r}")

    def __contains__(self, name):
        return name in self.params or name in self.buffers

    def copy(self):
        return ParameterStore({k: v.copy() for k, v in self.params.items()},
                              {k: v.copy() for k, v in self.buffers.items()}, self.profile)

    def with_profile(self, profile):
        return ParameterStore(self.params, self.buffers, profile) if profile != self.profile else self.copy()

    def equal(self, other):
        if self.params.keys() != other.params.keys() or self.buffers.keys() != other.buffers.keys():
            return False
        return all(np.array_equal(self[k], other[k]) for k in (*self.params, *self.buffers))


@dataclass
class ActivationTrace:
    graph: ModelGraph
    params: ParameterStore
    output: np.ndarray
    activations: dict
    caches: dict
    train: bool
    masks: dict
    bn_stats: dict  # updated running statistics (train mode only)
    recorded: bool = True


@dataclass
class GradientSet:
    params: dict
    activations: dict


# --------------------------------------------------------------------------
# layer kernels
# --------------------------------------------------------------------------

def _im2col(x, k, s, p):
    """Patch tensor laid out (N, k*k*C, Ho*Wo) so a conv is one batched matmul."""
    n, c, h, w = x.shape
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    cols = np.empty((n, k, k, c, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = x[:, :, i:i + s * ho:s, j:j + s * wo:s]
    return cols.reshape(n, k * k * c, ho * wo), ho, wo


def _col2im(dcols, x_shape, k, s, p, ho, wo):
    """Adjoint of :func:`_im2col`."""
    n, c, h, w = x_shape
    dcols = dcols.reshape(n, k, k, c, ho, wo)
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, i, j]
    return dxp[:, :, p:p + h, p:p + w] if p else dxp


def _flat_kernel(w):
    o = w.shape[0]
    return np.ascontiguousarray(w.transpose(0, 2, 3, 1)).reshape(o, -1)


def conv_forward(x, w, b, stride, padding):
    o, c, k, _ = w.shape
    cols, ho, wo = _im2col(x, k, stride, padding)
    w2 = _flat_kernel(w)
    y = np.matmul(w2, cols)  # N, O, Ho*Wo
    if b is not None:
        y += b[None, :, None]
    return y.reshape(x.shape[0], o, ho, wo), (x.shape, cols, w2, w.shape, stride, padding, ho, wo)


def conv_backward(dy, cache, need_dx=True):
    x_shape, cols, w2, w_shape, s, p, ho, wo = cache
    o, c, k, _ = w_shape
    n = dy.shape[0]
    dy3 = dy.reshape(n, o, ho * wo)
    dw2 = np.matmul(dy3, cols.transpose(0, 2, 1)).sum(axis=0)
    dw = dw2.reshape(o, k, k, c).transpose(0, 3, 1, 2)
    db = dy3.sum(axis=(0, 2))
    if not need_dx:
        return None, np.ascontiguousarray(dw), db
    dcols = np.matmul(w2.T, dy3)
    dx = _col2im(dcols, x_shape, k, s, p, ho, wo)
    return dx, np.ascontiguousarray(dw), db


def fc_forward(x, w, b):
    y = x @ w.T
    if b is not None:
        y += b
    return y, (x, w)


def fc_backward(dy, cache):
    x, w = cache
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def _bn_axes(x):
    return (0, 2, 3) if x.ndim == 4 else (0,)


def _bn_view(v, x):
    return v.reshape(1, -1, 1, 1) if x.ndim == 4 else v.reshape(1, -1)


def bn_forward(x, gamma, beta, mean, var, train):
    axes = _bn_axes(x)
    stats = None
    if train:
        m = x.shape[0] * (x.shape[2] * x.shape[3] if x.ndim == 4 else 1)
        mu = x.mean(axis=axes)
        v = x.var(axis=axes)
        unbiased = v * m / max(m - 1, 1)
        stats = ((1 - BN_MOMENTUM) * mean + BN_MOMENTUM * mu,
                 (1 - BN_MOMENTUM) * var + BN_MOMENTUM * unbiased)
    else:
        mu, v = mean, var
    inv = 1.0 / np.sqrt(v + BN_EPS)
    xhat = (x - _bn_view(mu, x)) * _bn_view(inv, x)
    y = xhat * _bn_view(gamma, x) + _bn_view(beta, x)
    return y, (xhat, inv, gamma, train), stats


def bn_backward(dy, cache):
    xhat, inv, gamma, train = cache
    axes = _bn_axes(dy)
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    g = _bn_view(gamma * inv, dy)
    if not train:
        return dy * g, dgamma, dbeta
    m = dy.size // dy.shape[1]
    dx = g * (dy - _bn_view(dbeta / m, dy) - xhat * _bn_view(dgamma / m, dy))
    return dx, dgamma, dbeta


def maxpool_forward(x, k, s, p):
    n, c, h, w = x.shape
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    y = x[:, :, 0:s * ho:s, 0:s * wo:s].copy()
    arg = np.zeros(y.shape, dtype=np.int8)
    for q in range(1, k * k):
        i, j = divmod(q, k)
        v = x[:, :, i:i + s * ho:s, j:j + s * wo:s]
        better = v > y  # strict: the first maximal element wins ties
        np.copyto(y, v, where=better)
        arg[better] = q
    return y, (x.shape, arg, k, s, p, h, w)


def maxpool_backward(dy, cache):
    xp_shape, arg, k, s, p, h, w = cache
    ho, wo = arg.shape[2], arg.shape[3]
    dxp = np.zeros(xp_shape, dtype=dy.dtype)
    for q in range(k * k):
        i, j = divmod(q, k)
        g = np.where(arg == q, dy, 0)
        if k == s:
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] = g
        else:
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += g
    return dxp[:, :, p:p + h, p:p + w] if p else dxp


def avgpool_forward(x, k, s, p):
    cols, ho, wo = _im2col(x, k, s, p)
    n, c = x.shape[:2]
    y = cols.reshape(n, k * k, c, ho * wo).mean(axis=1)
    return y.reshape(n, c, ho, wo), (x.shape, k, s, p, ho, wo)


def avgpool_backward(dy, cache):
    x_shape, k, s, p, ho, wo = cache
    n, c = x_shape[:2]
    g = (dy / (k * k)).reshape(n, 1, c, ho * wo)
    dcols = np.broadcast_to(g, (n, k * k, c, ho * wo))
    return _col2im(dcols, x_shape, k, s, p, ho, wo)


# --------------------------------------------------------------------------
# graph-level passes
# --------------------------------------------------------------------------

def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def _channel_mask(mask_idx, x):
    m = np.ones(x.shape[1], dtype=x.dtype)
    m[list(mask_idx)] = 0
    return _bn_view(m, x)


def forward_pass(graph: ModelGraph, params: ParameterStore, x, record=True, train=False,
                 masks=None) -> ActivationTrace:
    """Run ``graph`` on ``x`` (batch-first).

    ``masks`` maps a layer id to channel indices whose output is forced to zero
    (applied after that layer). With ``train=True`` batch-norm uses batch
    statistics and the would-be running-stat updates are returned in
    ``trace.bn_stats`` rather than written back, keeping the pass pure.
    """
    dt = params.dtype
    x = np.asarray(x, dtype=dt)
    if x.shape[1:] != tuple(graph.input_shape):
        raise StructuralError(f"layer 'input': expected per-sample shape {tuple(graph.input_shape)}, got {x.shape[1:]}")
    _check_finite(x, "input")
    masks = {k: tuple(v) for k, v in (masks or {}).items() if len(v)}
    acts = {INPUT: x}
    caches = {}
    bn_stats = {}
    for layer in graph.layers:
        srcs = graph.inputs_of(layer)
        a = acts[srcs[0]]
        lid = layer.id
        kind = layer.kind
        try:
            if kind == "conv":
                w = params[f"{lid}.weight"]
                if a.ndim != 4 or a.shape[1] != w.shape[1]:
                    raise StructuralError(f"layer {lid!r}: input shape {a.shape[1:]} incompatible with weight {w.shape}")
                b = params[f"{lid}.bias"] if layer.bias else None
                y, c = conv_forward(a, w, b, layer.stride, layer.padding)
            elif kind == "fc":
                w = params[f"{lid}.weight"]
                if a.ndim != 2 or a.shape[1] != w.shape[1]:
                    raise StructuralError(f"layer {lid!r}: input shape {a.shape[1:]} incompatible with weight {w.shape}")
                b = params[f"{lid}.bias"] if layer.bias else None
                y, c = fc_forward(a, w, b)
            elif kind == "bn":
                gamma = params[f"{lid}.gamma"]
                if a.shape[1] != gamma.shape[0]:
                    raise StructuralError(f"layer {lid!r}: {a.shape[1]} channels vs {gamma.shape[0]} bn entries")
                y, c, stats = bn_forward(a, gamma, params[f"{lid}.beta"], params[f"{lid}.running_mean"],
                                         params[f"{lid}.running_var"], train)
                if stats is not None:
                    bn_stats[f"{lid}.running_mean"], bn_stats[f"{lid}.running_var"] = stats
            elif kind == "relu":
                y, c = np.maximum(a, 0), a > 0
            elif kind == "maxpool":
                y, c = maxpool_forward(a, layer.kernel, layer.stride, layer.padding)
            elif kind == "avgpool":
                y, c = avgpool_forward(a, layer.kernel, layer.stride, layer.padding)
            elif kind == "flatten":
                y, c = a.reshape(a.shape[0], -1), a.shape
            elif kind == "residual_add":
                other = acts[srcs[1]]
                if other.shape != a.shape:
                    raise StructuralError(f"layer {lid!r}: residual operands {a.shape} vs {other.shape}")
                y, c = a + other, None
        except ValueError as exc:
            raise StructuralError(f"layer {lid!r}: {exc}") from exc
        if lid in masks:
            m = _channel_mask(masks[lid], y)
            y = y * m
            c = (c, m)
        acts[lid] = y
        caches[lid] = c
    out = acts[graph.output_id]
    if not record:
        return ActivationTrace(graph, params, out, {}, {}, train, masks, bn_stats, recorded=False)
    return ActivationTrace(graph, params, out, acts, caches, train, masks, bn_stats)


def backward_pass(trace: ActivationTrace, loss_grad, extra_grads=None) -> GradientSet:
    """Propagate ``loss_grad`` (w.r.t. the graph output) back through ``trace``.

    ``extra_grads`` injects additional gradients at intermediate layer outputs,
    which is how a loss attached to the representation layer enters.
    """
    if not trace.recorded:
        raise UsageError("backward_pass needs a trace recorded with record=True")
    graph, params = trace.graph, trace.params
    dt = params.dtype
    loss_grad = np.asarray(loss_grad, dtype=dt)
    if loss_grad.shape != trace.output.shape:
        raise StructuralError(f"loss gradient shape {loss_grad.shape} != output shape {trace.output.shape}")
    agrads = {graph.output_id: loss_grad.copy()}
    for lid, g in (extra_grads or {}).items():
        g = np.asarray(g, dtype=dt)
        agrads[lid] = agrads[lid] + g if lid in agrads else g.copy()
    pgrads = {}

    def add(lid, g):
        if lid in agrads:
            agrads[lid] = agrads[lid] + g
        else:
            agrads[lid] = g

    for layer in reversed(graph.layers):
        lid = layer.id
        if lid not in agrads:
            continue
        dy = agrads[lid]
        cache = trace.caches[lid]
        if lid in trace.masks:
            cache, m = cache
            dy = dy * m
        srcs = graph.inputs_of(layer)
        kind = layer.kind
        if kind == "conv":
            dx, dw, db = conv_backward(dy, cache, need_dx=srcs[0] != INPUT)
            pgrads[f"{lid}.weight"] = dw
            if layer.bias:
                pgrads[f"{lid}.bias"] = db
        elif kind == "fc":
            dx, dw, db = fc_backward(dy, cache)
            pgrads[f"{lid}.weight"] = dw
            if layer.bias:
                pgrads[f"{lid}.bias"] = db
        elif kind == "bn":
            dx, dgamma, dbeta = bn_backward(dy, cache)
            pgrads[f"{lid}.gamma"] = dgamma
            pgrads[f"{lid}.beta"] = dbeta
        elif kind == "relu":
            dx = dy * cache
        elif kind == "maxpool":
            dx = maxpool_backward(dy, cache)
        elif kind == "avgpool":
            dx = avgpool_backward(dy, cache)
        elif kind == "flatten":
            dx = dy.reshape(cache)
        elif kind == "residual_add":
            add(srcs[1], dy)
            dx = dy
        if dx is not None:
            add(srcs[0], dx)
    for name in params.params:
        if name not in pgrads:
            pgrads[name] = np.zeros_like(params.params[name])
    return GradientSet(pgrads, agrads)


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------

class SGD:
    """Momentum SGD (``v = m*v + g; w -= lr*v``) with persistent momentum buffers."""

    def __init__(self, momentum=0.9, weight_decay=0.0):
        if not 0 <= momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {}

    def step(self, params: ParameterStore, grads, lr):
        if not lr > 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        grads = grads.params if isinstance(grads, GradientSet) else grads
        for name, g in grads.items():
            if name not in params.params:
                raise StructuralError(f"gradient for unknown parameter {name!r}")
            w = params.params[name]
            if self.weight_decay:
                g = g + self.weight_decay * w
            if self.momentum:
                v = self.buffers.get(name)
                v = g.copy() if v is None else self.momentum * v + g
                self.buffers[name] = v
                g = v
            w -= (lr * g).astype(w.dtype, copy=False)
        return params


def sgd_step(params: ParameterStore, grads, lr, momentum=0.0, optimizer=None):
    """One update; pass ``optimizer`` to keep momentum buffers across calls."""
    opt = optimizer if optimizer is not None else SGD(momentum)
    return opt.step(params, grads, lr)


# --------------------------------------------------------------------------
# gradient verification
# --------------------------------------------------------------------------

@dataclass
class FiniteDiffResult:
    max_relative_error: float
    per_parameter: dict
    warnings: list

    def __float__(self):
        return float(self.max_relative_error)


def quadratic_head(trace):
    """0.5 * ||output||^2 summed; the default scalar head."""
    out = trace.output
    return 0.5 * float(np.sum(out * out)), out, {}


def finite_diff_check(graph, params: ParameterStore, x, eps=1e-6, head=quadratic_head,
                      train=False, max_coords=24, seed=0) -> FiniteDiffResult:
    """Compare ``backward_pass`` to central differences, coordinate by coordinate.

    ``head(trace) -> (loss, output_grad, extra_grads)`` attaches the scalar loss.
    Tensors with more than ``max_coords`` entries are sampled. Errors are relative
    to the largest gradient magnitude of each tensor.
    """
    notes = []
    if params.profile != "high":
        notes.append("standard profile: upcast to high precision for the check")
    p = params.with_profile("high")
    if eps < 1e-9:
        notes.append(f"eps={eps:g} is below the reliable range for float64 central differences")
    if not p.params:
        return FiniteDiffResult(0.0, {}, notes)

    def loss_at(store):
        return head(forward_pass(graph, store, x, record=True, train=train))[0]

    trace = forward_pass(graph, p, x, record=True, train=train)
    _, g_out, extra = head(trace)
    analytic = backward_pass(trace, g_out, extra).params
    rng = np.random.default_rng(seed)
    per = {}
    # tensors whose true gradient vanishes (e.g. a conv bias feeding train-mode BN)
    # are judged against the overall gradient scale instead of their own
    floor = max(1e-8, 1e-6 * max(float(np.abs(g).max()) for g in analytic.values()))
    for name, w in p.params.items():
        flat = w.reshape(-1)
        idx = np.arange(flat.size) if flat.size <= max_coords else rng.choice(flat.size, max_coords, replace=False)
        a = analytic[name].reshape(-1)[idx]
        num = np.empty(len(idx))
        for t, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_at(p)
            flat[i] = orig - eps
            lm = loss_at(p)
            flat[i] = orig
            num[t] = (lp - lm) / (2 * eps)
        scale = max(np.abs(a).max(), np.abs(num).max(), floor)
        per[name] = float(np.abs(a - num).max() / scale)
    return FiniteDiffResult(max(per.values()), per, notes)


# --------------------------------------------------------------------------
# checkpoint file
# --------------------------------------------------------------------------

CKPT_MAGIC = b"TCPW"
CKPT_VERSION = 1


def save_checkpoint(path, params: ParameterStore):
    """Write params then buffers (buffers prefixed ``buffer:``) as little-endian f32."""
    entries = list(params.params.items()) + [(f"buffer:{k}", v) for k, v in params.buffers.items()]
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, profile="standard") -> ParameterStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise FormatError(f"truncated checkpoint: need {n} bytes, {len(blob) - off} left", off)
        chunk = blob[off:off + n]
        off += n
        return chunk

    if take(4) != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version, count = struct.unpack("<HI", take(6))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    params, buffers = {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims, dtype=np.uint64)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims)
        if name.startswith("buffer:"):
            buffers[name[len("buffer:"):]] = arr.copy()
        else:
            params[name] = arr.copy()
    return ParameterStore(params, buffers, profile)
