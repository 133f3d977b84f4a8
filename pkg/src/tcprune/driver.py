"""Iterative transfer channel pruning: base training, prune/fine-tune loop, comparison pipelines."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import accounting
from .autograd import SGD, ParameterStore
from .criterion import ScoreTable, dump_scores, rank_channels, random_selection, transfer_scores
from .data import Augment, DomainPair, Normalizer, make_batches
from .errors import ConfigError, StructuralError, TrainingError
from .losses import MMDConfig, beta_schedule, loss_and_grads
from .surgery import apply_surgery, plan_surgery, slice_arrays, validate_structure
from .zoo import MIN_CHANNELS, all_channels

log = logging.getLogger(__name__)

METHODS = ("tcp", "tcp_no_da", "two_stage", "random")


@dataclass
class PruneConfig:
    method: str = "tcp"
    k: int = 4
    iters: int = 32
    flops_target: float = 0.7
    accuracy_floor: float = None
    short_ft_epochs: int = 5
    long_ft_epochs: int = 10
    base_ft_epochs: int = 30
    lr_high: float = 0.01
    lr_low: float = 0.0001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    score_batch_size: int = 128
    score_batches: int = None      # None: one full pass over the shorter domain
    seed: int = 0
    val_fraction: float = 0.2
    mmd: str = "median"
    base_beta: float = None        # None: the ramp's value at i = ITER
    hflip: bool = True
    crop_padding: int = 1
    floor: int = MIN_CHANNELS
    score_dump: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.k < 1:
            raise ConfigError(f"K must be >= 1, got {self.k}")
        if self.iters < 1:
            raise ConfigError(f"ITER must be >= 1, got {self.iters}")
        if not 0 < self.flops_target <= 1:
            raise ConfigError(f"flops_target must lie in (0, 1], got {self.flops_target}")
        if not 0 < self.lr_low <= self.lr_high:
            raise ConfigError("need 0 < lr_low <= lr_high")
        if self.batch_size < 1 or self.score_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if min(self.short_ft_epochs, self.long_ft_epochs, self.base_ft_epochs) < 0:
            raise ConfigError("epoch counts must be >= 0")
        MMDConfig.parse(self.mmd)

    @property
    def mmd_config(self):
        return MMDConfig.parse(self.mmd)

    @property
    def resolved_base_beta(self):
        return beta_schedule(self.iters, self.iters) if self.base_beta is None else self.base_beta

    def to_dict(self):
        return dataclasses.asdict(self)

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Prepared:
    """Normalised training views of a DomainPair plus the audited validation split."""

    xs: np.ndarray
    ys: np.ndarray
    xt: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    normalizer: Normalizer
    num_classes: int


def prepare(data: DomainPair, cfg: PruneConfig) -> Prepared:
    norm = Normalizer.fit(data.source.images)
    xt = norm(data.target.images)
    rng = np.random.default_rng([cfg.seed, 99])
    n_val = max(1, int(round(cfg.val_fraction * len(xt))))
    val_idx = np.sort(rng.permutation(len(xt))[:n_val])
    val_y = data.target.audited_labels("validation split", val_idx)
    return Prepared(norm(data.source.images), data.source.labels, xt, xt[val_idx], val_y, norm, data.num_classes)


def lr_at(epoch, epochs, cfg):
    """Geometric decay from lr_high to lr_low across one phase."""
    if epochs <= 1:
        return cfg.lr_high
    return cfg.lr_high * (cfg.lr_low / cfg.lr_high) ** (epoch / (epochs - 1))


def train_epochs(graph, params: ParameterStore, opt: SGD, prep: Prepared, cfg: PruneConfig, epochs, beta,
                 seed_tag, use_target=None, track_best=False):
    """Momentum-SGD on ``Lcls + beta * Lmmd`` (source-only when ``beta == 0``).

    Returns ``(params, best_params, best_acc)``; ``best_*`` are only tracked when
    ``track_best`` is set.
    """
    use_target = bool(beta) if use_target is None else use_target
    aug = Augment(hflip=cfg.hflip, crop_padding=cfg.crop_padding, normalize=False)
    mmd_cfg = cfg.mmd_config
    best, best_acc = None, -1.0
    last_good = params.copy()
    for epoch in range(epochs):
        lr = lr_at(epoch, epochs, cfg)
        src = make_batches(prep.xs, prep.ys, cfg.batch_size, seed=_seed(cfg.seed, seed_tag, 0), epoch=epoch,
                           augment=aug)
        if use_target:
            tgt = make_batches(prep.xt, None, cfg.batch_size, seed=_seed(cfg.seed, seed_tag, 1), epoch=epoch,
                               augment=aug)
            stream = zip(src, tgt)
        else:
            stream = ((b, prep.xt[:0]) for b in src)
        for (xs, ys), xt in stream:
            parts, grads, trace = loss_and_grads(graph, params, xs, ys, xt, beta if use_target else 0.0,
                                                 mmd_cfg, train=True)
            if not math.isfinite(parts.total):
                raise TrainingError(f"loss diverged (epoch {epoch}, lr {lr:g})", last_state=last_good)
            params.buffers.update(trace.bn_stats)
            opt.step(params, grads, lr)
        if not all(np.all(np.isfinite(v)) for v in params.params.values()):
            raise TrainingError(f"parameters became non-finite in epoch {epoch}", last_state=last_good)
        last_good = params.copy()
        if track_best:
            acc = accounting.evaluate_accuracy(graph, params, prep.val_x, prep.val_y)
            log.debug("epoch %d lr %.5f val acc %.4f", epoch, lr, acc)
            if acc > best_acc:
                best, best_acc = params.copy(), acc
    return params, best, best_acc


def _seed(seed, tag, stream):
    return int.from_bytes(hashlib.sha256(f"{seed}:{tag}:{stream}".encode()).digest()[:4], "little")


def train_base(graph, params: ParameterStore, data, cfg: PruneConfig, prep: Prepared = None):
    """Train the UDA baseline with the full loss; keep the best validation snapshot."""
    prep = prep or prepare(data, cfg)
    params = params.copy()
    if cfg.base_ft_epochs == 0:
        return params
    opt = SGD(cfg.momentum, cfg.weight_decay)
    params, best, _ = train_epochs(graph, params, opt, prep, cfg, cfg.base_ft_epochs, cfg.resolved_base_beta,
                                   "base", use_target=True, track_best=True)
    return best if best is not None else params


@dataclass
class PruneState:
    i: int
    graph: object
    params: ParameterStore
    opt: SGD
    report: accounting.PruneReport
    betas: list = field(default_factory=list)
    prune_sets: list = field(default_factory=list)
    stopped: bool = False
    floor_violations: int = 0


def method_beta(cfg: PruneConfig, i):
    return beta_schedule(i, cfg.iters) if cfg.method == "tcp" else 0.0


def score_table(graph, params, prep: Prepared, cfg: PruneConfig, i, beta) -> ScoreTable:
    """One evaluation pass (truncated to the shorter domain) accumulated into a ScoreTable."""
    table = ScoreTable(iteration=i)
    bs = cfg.score_batch_size
    n = min(len(prep.xs), len(prep.xt)) // bs or 1
    if cfg.score_batches is not None:
        n = min(n, cfg.score_batches)
    mmd_cfg = cfg.mmd_config
    for b in range(n):
        sl = slice(b * bs, (b + 1) * bs)
        table.add_batch(transfer_scores(graph, params, prep.xs[sl], prep.ys[sl], prep.xt[sl], beta, mmd_cfg))
    return table


def select_channels(state: PruneState, prep: Prepared, cfg: PruneConfig, beta):
    graph = state.graph
    sizes = {l.id: l.out_channels for l in graph.prunable_layers()}
    if cfg.method == "random":
        rng = np.random.default_rng([cfg.seed, 7, state.i])
        return random_selection(all_channels(graph), cfg.k, rng, cfg.floor), None
    table = score_table(graph, state.params, prep, cfg, state.i, beta)
    return rank_channels(table, cfg.k, cfg.floor, sizes), table


def prune_iteration(state: PruneState, prep: Prepared, cfg: PruneConfig, run_dir=None) -> PruneState:
    """Score, remove K channels, short fine-tune, append a report row, advance ``i``."""
    beta = method_beta(cfg, state.i)
    selection, table = select_channels(state, prep, cfg, beta)
    if not selection.channels:
        state.stopped = True
        return state
    if selection.truncated:
        state.report.truncations.append({"iteration": state.i, "requested": cfg.k,
                                         "removed": len(selection.channels)})
        log.warning("iteration %d: only %d of %d channels removable", state.i, len(selection), cfg.k)
    if table is not None and cfg.score_dump and run_dir is not None:
        dump_scores(f"{run_dir}/scores.csv", table, selection.channels, append=state.i > 0)
    plan = plan_surgery(state.graph, selection.channels, cfg.floor)
    graph, params = apply_surgery(state.graph, state.params, plan)
    problems = validate_structure(graph, params)
    if problems:
        raise StructuralError(f"surgery produced an invalid model: {problems}")
    state.opt.buffers = slice_arrays(plan, state.opt.buffers)
    params, _, _ = train_epochs(graph, params, state.opt, prep, cfg, cfg.short_ft_epochs, beta, f"short{state.i}")
    acc = accounting.evaluate_accuracy(graph, params, prep.val_x, prep.val_y)
    removed = {}
    for ch in selection.channels:
        removed[ch.layer] = removed.get(ch.layer, 0) + 1
    state.report.make_row(state.i, graph, params, acc, beta, removed)
    state.betas.append(beta)
    state.prune_sets.append(list(selection.channels))
    state.graph, state.params = graph, params
    if cfg.accuracy_floor is not None and acc < cfg.accuracy_floor:
        state.floor_violations += 1
    else:
        state.floor_violations = 0
    if len(selection.channels) == 0 or selection.truncated and not _removable(graph, cfg.floor):
        state.stopped = True
    state.i += 1
    return state


def _removable(graph, floor):
    return any(l.out_channels > floor for l in graph.prunable_layers())


def long_ft_beta(cfg: PruneConfig):
    return cfg.resolved_base_beta if cfg.method in ("tcp", "two_stage") else 0.0


def run(graph, params: ParameterStore, data, cfg: PruneConfig, prep: Prepared = None, run_dir=None,
        base_acc=None):
    """Full pruning pipeline for ``cfg.method`` starting from trained base ``params``.

    Returns ``(graph, params, report, state)``.
    """
    prep = prep or prepare(data, cfg)
    base_flops = accounting.count_flops(graph)
    base_params = accounting.count_params(graph, params)
    if base_acc is None:
        base_acc = accounting.evaluate_accuracy(graph, params, prep.val_x, prep.val_y)
    report = accounting.PruneReport(cfg.method, cfg.seed, cfg.hash(), base_flops, base_params, base_acc)
    state = PruneState(0, graph, params.copy(), SGD(cfg.momentum, cfg.weight_decay), report)
    target = cfg.flops_target * base_flops
    while state.i < cfg.iters and accounting.count_flops(state.graph) > target and not state.stopped:
        if not _removable(state.graph, cfg.floor):
            break
        state = prune_iteration(state, prep, cfg, run_dir)
        log.info("%s iter %d: flops %.3f of base, val acc %.4f", cfg.method, state.i - 1,
                 1 - report.rows[-1].flops_down if report.rows else 1.0,
                 report.rows[-1].target_acc if report.rows else float("nan"))
        if state.floor_violations >= 2:
            log.info("accuracy floor violated twice in a row; stopping")
            break
    if report.rows:
        opt = SGD(cfg.momentum, cfg.weight_decay)
        state.params, _, _ = train_epochs(state.graph, state.params, opt, prep, cfg, cfg.long_ft_epochs,
                                          long_ft_beta(cfg), "long")
    report.final = {
        "iterations": len(report.rows),
        "flops": accounting.count_flops(state.graph),
        "flops_breakdown": accounting.flops_breakdown(state.graph),
        "params": accounting.count_params(state.graph, state.params),
        "flops_down": 1 - accounting.count_flops(state.graph) / base_flops,
        "params_down": 1 - accounting.count_params(state.graph, state.params) / base_params,
        "val_acc": accounting.evaluate_accuracy(state.graph, state.params, prep.val_x, prep.val_y),
        "channels_removed": sum(len(s) for s in state.prune_sets),
    }
    return state.graph, state.params, report, state


def evaluate_target(graph, params, data: DomainPair, normalizer: Normalizer = None, purpose="evaluation"):
    """Accuracy on the full target domain; the only place full target labels are read."""
    normalizer = normalizer or Normalizer.fit(data.source.images)
    labels = data.target.audited_labels(purpose)
    return accounting.evaluate_accuracy(graph, params, normalizer(data.target.images), labels)
