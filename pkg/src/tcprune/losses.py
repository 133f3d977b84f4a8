"""Domain adaptation loss surface: Gaussian-kernel MMD, cross-entropy, beta ramp, total loss."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .autograd import backward_pass, forward_pass
from .errors import ConfigError, DataError, StructuralError

MULTI_KERNEL_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class MMDConfig:
    """Bandwidth policy: ``"median"``, ``"fixed"`` (uses ``sigma``) or ``"multi"``.

    ``multi`` sums the statistic over ``multipliers`` times the median-heuristic
    bandwidth.
    """

    policy: str = "median"
    sigma: float = 1.0
    multipliers: tuple = MULTI_KERNEL_MULTIPLIERS

    def __post_init__(self):
        if self.policy not in ("median", "fixed", "multi"):
            raise ConfigError(f"unknown bandwidth policy {self.policy!r}")
        if not self.sigma > 0 or any(m <= 0 for m in self.multipliers):
            raise ConfigError("MMD bandwidths must be strictly positive")

    @classmethod
    def parse(cls, text):
        """``median`` | ``fixed:<sigma>`` | ``multi``."""
        if text.startswith("fixed:"):
            try:
                sigma = float(text.split(":", 1)[1])
            except ValueError:
                raise ConfigError(f"bad fixed bandwidth in {text!r}") from None
            return cls("fixed", sigma)
        if text in ("median", "multi"):
            return cls(text)
        raise ConfigError(f"bad --mmd value {text!r}")

    def __str__(self):
        return f"fixed:{self.sigma!r}" if self.policy == "fixed" else self.policy


def _sqdist(a, b):
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def median_sigma(xs, xt):
    """sigma with sigma^2 = median(pairwise squared distance over the joint batch) / 2."""
    z = np.concatenate([xs, xt]).astype(np.float64)
    d = _sqdist(z, z)[np.triu_indices(len(z), 1)]
    med = float(np.median(d)) if d.size else 0.0
    if med <= 0.0:
        warnings.warn("median heuristic gave zero bandwidth; falling back to sigma=1", RuntimeWarning)
        return 1.0
    return math.sqrt(med / 2.0)


def bandwidths(xs, xt, cfg: MMDConfig):
    if cfg.policy == "fixed":
        return [cfg.sigma]
    base = median_sigma(xs, xt)
    if cfg.policy == "median":
        return [base]
    return [base * m for m in cfg.multipliers]


def _block(a, b, sigma, coef):
    """coef * sum_ij k(a_i, b_j) and its gradients w.r.t. a and b."""
    k = np.exp(-_sqdist(a, b) / (2.0 * sigma * sigma))
    val = coef * k.sum()
    c = coef / (sigma * sigma)
    ga = -c * (k.sum(1)[:, None] * a - k @ b)
    gb = -c * (k.sum(0)[:, None] * b - k.T @ a)
    return val, ga, gb


def mmd_with_grad(xs, xt, cfg: MMDConfig = MMDConfig(), sigmas=None):
    """Biased squared-MMD V-statistic, plus gradients w.r.t. both sample sets.

    ``sigmas`` overrides the bandwidth policy; bandwidths are treated as
    constants when differentiating.
    """
    xs = np.asarray(xs)
    xt = np.asarray(xt)
    if xs.ndim != 2 or xt.ndim != 2 or xs.shape[1] != xt.shape[1]:
        raise StructuralError(f"MMD needs [n x d] inputs with equal d, got {xs.shape} and {xt.shape}")
    if len(xs) < 1 or len(xt) < 1:
        raise DataError("MMD needs at least one sample per domain")
    ns, nt = len(xs), len(xt)
    if sigmas is None:
        sigmas = bandwidths(xs, xt, cfg)
    total = 0.0
    gs = np.zeros_like(xs)
    gt = np.zeros_like(xt)
    for s in sigmas:
        v, a, b = _block(xs, xs, s, 1.0 / ns**2)
        total += v
        gs += a + b
        v, a, b = _block(xt, xt, s, 1.0 / nt**2)
        total += v
        gt += a + b
        v, a, b = _block(xs, xt, s, -2.0 / (ns * nt))
        total += v
        gs += a
        gt += b
    return max(float(total), 0.0), gs, gt


def mmd_loss(source_repr, target_repr, cfg: MMDConfig = MMDConfig()):
    return mmd_with_grad(source_repr, target_repr, cfg)[0]


def cross_entropy_with_grad(logits, labels):
    """Mean negative log-softmax of the true class, and d/dlogits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if n < 1 or labels.shape != (n,):
        raise DataError(f"need one label per row, got {labels.shape} for {n} rows")
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def cross_entropy_loss(logits, labels):
    return cross_entropy_with_grad(logits, labels)[0]


def beta_schedule(i, iters):
    """Sigmoid ramp 4 / (1 + exp(-i/ITER)) - 2: 0 at i=0, ~0.924 at i=ITER."""
    if iters < 1:
        raise ConfigError(f"ITER must be >= 1, got {iters}")
    if i < 0:
        raise ConfigError(f"iteration index must be >= 0, got {i}")
    return 4.0 / (1.0 + math.exp(-i / iters)) - 2.0


@dataclass(frozen=True)
class LossBreakdown:
    cls: float
    mmd: float
    beta: float
    total: float


def representation_rows(trace, n_source):
    rep = trace.graph.representation()
    point = trace.graph.activation_point(rep.id)
    z = trace.activations[point]
    z = z.reshape(len(z), -1)
    return point, z[:n_source], z[n_source:]


def loss_and_grads(graph, params, xs, ys, xt, beta, cfg: MMDConfig = MMDConfig(), train=False,
                   sigmas=None, masks=None):
    """Classification plus beta-weighted MMD loss on one joint source+target forward pass.

    Returns ``(LossBreakdown, GradientSet, trace)``. With ``train=True`` batch norm
    normalises with statistics of the joint batch. The MMD term is read at the
    representation layer's block output.
    """
    try:
        graph.representation()
    except StructuralError as exc:
        raise StructuralError(f"total loss needs a representation layer: {exc}") from None
    ns = len(xs)
    x = np.concatenate([xs, xt]) if len(xt) else np.asarray(xs)
    trace = forward_pass(graph, params, x, record=True, train=train, masks=masks)
    cls, g_logits = cross_entropy_with_grad(trace.output[:ns], ys)
    g_out = np.zeros_like(trace.output)
    g_out[:ns] = g_logits
    extra = {}
    mmd = 0.0
    if len(xt):
        point, zs, zt = representation_rows(trace, ns)
        mmd, gs, gt = mmd_with_grad(zs, zt, cfg, sigmas)
        if beta:
            extra[point] = (beta * np.concatenate([gs, gt])).reshape(trace.activations[point].shape)
    total = cls + beta * mmd
    grads = backward_pass(trace, g_out, extra)
    return LossBreakdown(cls, mmd, beta, total), grads, trace


def total_loss(graph, params, source_batch, target_batch, i, iters, cfg: MMDConfig = MMDConfig(),
               beta=None, train=False):
    """LossBreakdown for ``(xs, ys)`` and ``xt`` at pruning iteration ``i`` of ``iters``."""
    xs, ys = source_batch
    b = beta_schedule(i, iters) if beta is None else beta
    return loss_and_grads(graph, params, xs, ys, target_batch, b, cfg, train=train)[0]
