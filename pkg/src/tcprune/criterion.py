"""Transfer channel evaluation: Taylor scores over source CE and target MMD gradients."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .autograd import backward_pass, forward_pass
from .errors import ConfigError
from .graph import ChannelId
from .losses import MMDConfig, beta_schedule, cross_entropy_with_grad, mmd_with_grad, representation_rows
from .zoo import MIN_CHANNELS


@dataclass
class ScoreTable:
    raw: dict = field(default_factory=dict)
    normalized: dict = field(default_factory=dict)
    iteration: int = 0
    batches: int = 0

    def add_batch(self, scores):
        """Fold one batch's scores into the running mean."""
        self.batches += 1
        w = 1.0 / self.batches
        for ch, s in scores.items():
            prev = self.raw.get(ch, 0.0)
            self.raw[ch] = prev + (float(s) - prev) * w
        self.normalized = normalize_per_layer(self.raw)
        return self


def channel_activation_mean(activation, channel=None):
    """Batch-and-spatial mean of one channel (or all channels when ``channel`` is None)."""
    a = np.asarray(activation)
    if a.ndim == 2:
        a = a[:, :, None, None]
    if a.ndim != 4:
        raise ValueError(f"expected N x k x h x w (or N x k) activation, got shape {a.shape}")
    means = a.mean(axis=(0, 2, 3))
    if channel is None:
        return means
    if not 0 <= channel < a.shape[1]:
        raise IndexError(f"channel {channel} out of range for {a.shape[1]} channels")
    return float(means[channel])


def channel_gradient_sum(grad):
    """Per-channel derivative w.r.t. the channel mean: elementwise gradients summed over batch and space."""
    g = np.asarray(grad)
    if g.ndim == 2:
        return g.sum(axis=0)
    return g.sum(axis=(0, 2, 3))


def taylor_score(activation_mean, grad_mean):
    return abs(activation_mean * grad_mean)


def combine_terms(a_src, g_src, a_tgt, g_tgt, beta):
    """``|g_src * a_src + beta * g_tgt * a_tgt|`` (elementwise over channels)."""
    src = np.asarray(a_src) * np.asarray(g_src)
    if not beta:
        return np.abs(src)
    return np.abs(src + beta * np.asarray(a_tgt) * np.asarray(g_tgt))


def transfer_scores(graph, params, xs, ys, xt, beta, mmd_cfg: MMDConfig = MMDConfig(), sigmas=None):
    """Per-channel ``|dLcls/da_s * a_s + beta * dLmmd/da_t * a_t|`` for one batch pair.

    The activation factor is the batch-and-spatial channel mean; the gradient
    factor is the derivative of the loss with respect to that scalar mean,
    i.e. the sum of the elementwise gradients over the same positions. Batch norm runs in eval mode so source and target rows do not
    interact; the source rows then carry only the CE gradient and the target
    rows only the MMD gradient, so a single backward pass yields both terms.
    """
    prunable = graph.prunable_layers()
    if not prunable:
        raise ConfigError("graph has no prunable channels")
    ns = len(xs)
    x = np.concatenate([xs, xt])
    trace = forward_pass(graph, params, x, record=True, train=False)
    _, g_logits = cross_entropy_with_grad(trace.output[:ns], ys)
    g_out = np.zeros_like(trace.output)
    g_out[:ns] = g_logits
    extra = {}
    if beta:
        point, zs, zt = representation_rows(trace, ns)
        _, _, gt = mmd_with_grad(zs, zt, mmd_cfg, sigmas)
        g = np.zeros((len(x), zt.shape[1]), dtype=trace.output.dtype)
        g[ns:] = gt
        extra[point] = g.reshape(trace.activations[point].shape)
    grads = backward_pass(trace, g_out, extra)
    scores = {}
    for layer in prunable:
        point = graph.activation_point(layer.id)
        a = trace.activations[point]
        g = grads.activations.get(point)
        if g is None:
            g = np.zeros_like(a)
        s = combine_terms(channel_activation_mean(a[:ns]), channel_gradient_sum(g[:ns]),
                          channel_activation_mean(a[ns:]), channel_gradient_sum(g[ns:]), beta)
        for i, v in enumerate(s):
            scores[ChannelId(layer.id, i)] = float(v)
    return scores


def accumulate_transfer_scores(graph, params, source_batch, target_batch, i, iters, table=None,
                               mmd_cfg: MMDConfig = MMDConfig(), beta=None):
    """Add one batch pair's transfer scores to ``table`` (running mean over batches)."""
    table = table if table is not None else ScoreTable(iteration=i)
    b = beta_schedule(i, iters) if beta is None else beta
    xs, ys = source_batch
    return table.add_batch(transfer_scores(graph, params, xs, ys, target_batch, b, mmd_cfg))


def normalize_per_layer(raw):
    by_layer = {}
    for ch, s in raw.items():
        by_layer.setdefault(ch.layer, []).append((ch, s))
    out = {}
    for items in by_layer.values():
        norm = float(np.sqrt(sum(s * s for _, s in items)))
        for ch, s in items:
            out[ch] = s / norm if norm > 0 else 0.0
    return out


@dataclass
class Selection:
    channels: list
    truncated: bool

    def __iter__(self):
        return iter(self.channels)

    def __len__(self):
        return len(self.channels)


def layer_sizes(table_or_channels):
    sizes = {}
    for ch in table_or_channels:
        sizes[ch.layer] = sizes.get(ch.layer, 0) + 1
    return sizes


def rank_channels(table: ScoreTable, k, floor=MIN_CHANNELS, sizes=None) -> Selection:
    """The ``k`` lowest per-layer-normalised channels, never taking a layer below ``floor``.

    ``sizes`` gives the current channel count per layer; by default it is the
    number of channels the table holds for that layer.
    """
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    norm = table.normalized or normalize_per_layer(table.raw)
    remaining = dict(sizes) if sizes is not None else layer_sizes(norm)
    order = sorted(norm.items(), key=lambda kv: (kv[1], kv[0].layer, kv[0].index))
    chosen = []
    for ch, _ in order:
        if len(chosen) == k:
            break
        if remaining[ch.layer] - 1 < floor:
            continue
        remaining[ch.layer] -= 1
        chosen.append(ch)
    return Selection(chosen, len(chosen) < k)


def random_selection(channels, k, rng, floor=MIN_CHANNELS) -> Selection:
    """Uniformly random prune set of size ``k`` respecting the per-layer floor."""
    remaining = layer_sizes(channels)
    chosen = []
    for idx in rng.permutation(len(channels)):
        if len(chosen) == k:
            break
        ch = channels[idx]
        if remaining[ch.layer] - 1 < floor:
            continue
        remaining[ch.layer] -= 1
        chosen.append(ch)
    return Selection(sorted(chosen), len(chosen) < k)


def dump_scores(path, table: ScoreTable, pruned=(), append=False):
    """CSV rows ``iteration,layer,channel,raw_score,normalized_score,pruned``."""
    pruned = set(pruned)
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if not append or fh.tell() == 0:
            w.writerow(["iteration", "layer", "channel", "raw_score", "normalized_score", "pruned"])
        for ch in sorted(table.raw):
            w.writerow([table.iteration, ch.layer, ch.index, repr(table.raw[ch]),
                        repr(table.normalized.get(ch, 0.0)), int(ch in pruned)])
