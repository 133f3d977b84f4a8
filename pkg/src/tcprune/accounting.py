"""FLOPs / parameter counting, target-domain evaluation and report files."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import ParameterStore, forward_pass
from .errors import ConfigError, StructuralError
from .graph import ModelGraph

CSV_FIELDS = ["iteration", "flops", "flops_down", "params", "params_down", "target_acc", "beta", "removed_json"]

# Full-scale numbers quoted for context only; nothing here is reproduced at desk scale.
PUBLISHED_REFERENCE = [
    {"backbone": "VGG16", "task": "A->W", "method": "base", "flops_down": 0.0, "acc": 0.740,
     "params_down": None, "reproduced": False},
    {"backbone": "VGG16", "task": "A->W", "method": "tcp", "flops_down": 0.26, "acc": 0.761,
     "params_down": 0.368, "reproduced": False},
    {"backbone": "VGG16", "task": "A->W", "method": "tcp_no_da", "flops_down": 0.26, "acc": 0.730,
     "params_down": 0.297, "reproduced": False},
    {"backbone": "VGG16", "task": "A->W", "method": "two_stage", "flops_down": 0.26, "acc": 0.694,
     "params_down": 0.294, "reproduced": False},
]


def flops_breakdown(graph: ModelGraph):
    """``{"conv": ..., "fc": ...}`` multiply-accumulate counts (bias, BN, ReLU, pooling excluded)."""
    try:
        shapes = graph.shapes()
    except (StructuralError, KeyError) as exc:
        raise StructuralError(f"cannot derive spatial sizes: {exc}") from exc
    conv = fc = 0
    for layer in graph.layers:
        if layer.kind == "conv":
            _, h, w = shapes[layer.id]
            conv += h * w * layer.in_channels * layer.kernel ** 2 * layer.out_channels
        elif layer.kind == "fc":
            fc += layer.in_channels * layer.out_channels
    return {"conv": conv, "fc": fc}


def count_flops(graph: ModelGraph) -> int:
    b = flops_breakdown(graph)
    return b["conv"] + b["fc"]


def count_params(graph: ModelGraph, params: ParameterStore = None) -> int:
    """Conv/FC weights and biases plus BN scale and shift (running stats excluded)."""
    total = 0
    for layer in graph.layers:
        for name, shape in layer.param_shapes().items():
            if name.endswith((".running_mean", ".running_var")):
                continue
            if params is not None:
                if name not in params.params:
                    raise StructuralError(f"missing parameter {name!r}")
                total += int(params.params[name].size)
            else:
                total += int(np.prod(shape))
    return total


def predict(graph, params, images, batch_size=256):
    preds = []
    for start in range(0, len(images), batch_size):
        out = forward_pass(graph, params, images[start:start + batch_size], record=False, train=False).output
        preds.append(out.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate_accuracy(graph, params, images, labels, batch_size=256) -> float:
    """Fraction of argmax predictions that match ``labels`` (eval-mode batch norm)."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ConfigError("cannot evaluate accuracy on an empty split")
    return float(np.mean(predict(graph, params, images, batch_size) == labels))


def surviving_channels(graph):
    return {l.id: l.out_channels for l in graph.layers if l.kind in ("conv", "fc")}


@dataclass
class ReportRow:
    iteration: int
    flops: int
    flops_down: float
    params: int
    params_down: float
    target_acc: float
    beta: float
    removed: dict = field(default_factory=dict)

    def csv_values(self):
        return [self.iteration, self.flops, repr(self.flops_down), self.params, repr(self.params_down),
                repr(self.target_acc), repr(self.beta), json.dumps(self.removed, sort_keys=True)]


@dataclass
class PruneReport:
    method: str
    seed: int
    config_hash: str
    baseline_flops: int
    baseline_params: int
    baseline_acc: float = float("nan")
    rows: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    truncations: list = field(default_factory=list)

    def make_row(self, iteration, graph, params, target_acc, beta, removed):
        flops = count_flops(graph)
        n = count_params(graph, params)
        row = ReportRow(iteration, flops, 1.0 - flops / self.baseline_flops, n,
                        1.0 - n / self.baseline_params, float(target_acc), float(beta), dict(removed))
        self.rows.append(row)
        return row

    def summary(self):
        last = self.rows[-1] if self.rows else None
        return {
            "method": self.method,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "baseline": {"flops": self.baseline_flops, "params": self.baseline_params, "target_acc": self.baseline_acc},
            "iterations": len(self.rows),
            "final": self.final,
            "last_row": asdict(last) if last else None,
            "truncations": self.truncations,
            "flops_convention": "one multiply-accumulate = one FLOP; conv and FC layers counted, FC listed separately",
        }


def write_csv(path, report: PruneReport):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for row in report.rows:
            w.writerow(row.csv_values())


def read_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(ReportRow(int(rec["iteration"]), int(rec["flops"]), float(rec["flops_down"]),
                                  int(rec["params"]), float(rec["params_down"]), float(rec["target_acc"]),
                                  float(rec["beta"]), json.loads(rec["removed_json"])))
    return rows


def emit_report(report: PruneReport, out_dir, formats=("csv", "json", "plot"), graph=None, annotate=True):
    """Write ``report.csv``, ``summary.json`` and ``plot.json``; returns written paths."""
    if not report.rows:
        raise ConfigError("report has no rows to emit")
    os.makedirs(out_dir, exist_ok=True)
    written = {}
    if "csv" in formats:
        written["csv"] = os.path.join(out_dir, "report.csv")
        write_csv(written["csv"], report)
    if "json" in formats:
        written["json"] = os.path.join(out_dir, "summary.json")
        with open(written["json"], "w") as fh:
            json.dump(report.summary(), fh, indent=2, sort_keys=True)
    if "plot" in formats:
        written["plot"] = os.path.join(out_dir, "plot.json")
        plot = {
            "curve": {"x_flops_down": [r.flops_down for r in report.rows],
                      "y_target_acc": [r.target_acc for r in report.rows]},
            "surviving_channels": surviving_channels(graph) if graph is not None else None,
        }
        if annotate:
            plot["published_reference_not_reproduced"] = PUBLISHED_REFERENCE
        with open(written["plot"], "w") as fh:
            json.dump(plot, fh, indent=2, sort_keys=True)
    return written
