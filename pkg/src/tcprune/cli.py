"""Command-line front end: ``tcprune {gen-data,train-base,prune,eval,report,compare}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid configuration.
Every run writes ``manifest.json`` into its output directory before doing any work;
``--manifest PATH`` re-executes a recorded run.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys

import yaml

from . import __version__, accounting
from .autograd import load_checkpoint, save_checkpoint
from .data import ShiftParams, generate_synthetic_domains, load_domain_pair, save_domain_pair
from .driver import METHODS, PruneConfig, evaluate_target, prepare, run, train_base
from .errors import ConfigError, TCPruneError, UsageError
from .graph import ModelGraph
from .zoo import build_small_resnet, build_small_vgg, init_params

log = logging.getLogger("tcprune")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3

ARCH_DEFAULTS = {
    "small-vgg": {"channel_plan": [16, 32, 64], "fc_widths": [64, 32]},
    "small-resnet": {"block_plan": [[32, 8], [64, 16, 2], [64, 16]], "stem_channels": 16},
}
DEFAULT_SHIFT = {"brightness": 0.2, "contrast": 0.6, "color_mix": 0.7, "rotation_deg": 10.0, "noise": 0.1}
DATA_DEFAULTS = {"n_source": 2000, "n_target": 2000, "classes": 4, "image_size": 16, "channels": 3,
                 "base_noise": 0.05, "seed": 0, "shift": DEFAULT_SHIFT}

# Flag name -> PruneConfig field; these override the config file.
FLAG_FIELDS = {"seed": "seed", "method": "method", "k": "k", "iters": "iters", "flops_target": "flops_target",
               "mmd": "mmd", "score_dump": "score_dump"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p, method=True):
    p.add_argument("--config", help="YAML file with config keys (flags take precedence)")
    p.add_argument("--seed", type=int)
    p.add_argument("--arch", choices=sorted(ARCH_DEFAULTS))
    p.add_argument("--data", help="dataset directory or gen-spec such as 'gen:n_source=500,seed=1'")
    p.add_argument("--out", help="output directory")
    p.add_argument("--manifest", help="re-execute the run recorded in this manifest.json")
    if method:
        p.add_argument("--method", choices=METHODS)
        p.add_argument("--k", type=int)
        p.add_argument("--iters", type=int)
        p.add_argument("--flops-target", dest="flops_target", type=float)
        p.add_argument("--mmd", help="median | fixed:<sigma> | multi")
        p.add_argument("--score-dump", dest="score_dump", action="store_true", default=None)


def build_parser():
    parser = _Parser(prog="tcprune", description="Transfer channel pruning on synthetic domain pairs.")
    parser.add_argument("--version", action="version", version=f"tcprune {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="generate a synthetic source/target pair")
    _common(p, method=False)

    p = sub.add_parser("train-base", help="train the unpruned adapted model")
    _common(p)

    p = sub.add_parser("prune", help="iteratively prune a base model")
    _common(p)
    p.add_argument("--base", help="directory written by train-base (default: train one in place)")

    p = sub.add_parser("eval", help="target-domain accuracy of a saved model")
    _common(p, method=False)
    p.add_argument("--model", required=False, help="directory holding graph.yaml and model.tcpw")

    p = sub.add_parser("report", help="re-emit report files from a run's report.csv")
    p.add_argument("--run", required=True, help="run directory produced by prune")
    p.add_argument("--formats", default="csv,json,plot")
    p.add_argument("--no-annotate", dest="annotate", action="store_false")

    p = sub.add_parser("compare", help="all four methods over several seeds, merged into one CSV")
    _common(p)
    p.add_argument("--seeds", default="0", help="comma-separated seed list")
    return parser


# --------------------------------------------------------------------------
# configuration resolution
# --------------------------------------------------------------------------

def _load_yaml(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path!r} is not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path!r} must be a mapping")
    return doc


def parse_gen_spec(text):
    """``gen:key=value,...`` -> synthetic data settings (unknown keys rejected)."""
    body = text[4:] if text.startswith("gen:") else text
    spec = json.loads(json.dumps(DATA_DEFAULTS))
    for item in filter(None, body.split(",")):
        if "=" not in item:
            raise ConfigError(f"gen-spec item {item!r} is not key=value")
        key, value = item.split("=", 1)
        value = yaml.safe_load(value)
        if key in DEFAULT_SHIFT:
            spec["shift"][key] = value
        elif key in DATA_DEFAULTS:
            spec[key] = value
        else:
            raise ConfigError(f"unknown gen-spec key {key!r}")
    return spec


def resolve(args):
    """Materialise every setting: defaults < config file < flags."""
    doc = _load_yaml(getattr(args, "config", None))
    known = {"arch", "model", "data", "prune"}
    extra = set(doc) - known
    if extra:
        raise ConfigError(f"unknown top-level config keys {sorted(extra)}; expected {sorted(known)}")
    prune = dict(doc.get("prune") or {})
    for flag, name in FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            prune[name] = value
    fields = {f.name for f in dataclasses.fields(PruneConfig)}
    bad = set(prune) - fields
    if bad:
        raise ConfigError(f"unknown prune settings {sorted(bad)}")
    try:
        cfg = PruneConfig(**prune)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    arch = getattr(args, "arch", None) or doc.get("arch") or "small-vgg"
    if arch not in ARCH_DEFAULTS:
        raise ConfigError(f"unknown architecture {arch!r}")
    model = dict(ARCH_DEFAULTS[arch])
    model.update(doc.get("model") or {})
    data = getattr(args, "data", None) or doc.get("data") or "gen:"
    if isinstance(data, dict):
        spec = json.loads(json.dumps(DATA_DEFAULTS))
        spec.update({k: v for k, v in data.items() if k != "shift"})
        spec["shift"].update(data.get("shift") or {})
        data = spec
    elif isinstance(data, str) and (data.startswith("gen:") or not os.path.isdir(data)):
        if not data.startswith("gen:"):
            raise ConfigError(f"--data {data!r} is neither a directory nor a gen: spec")
        data = parse_gen_spec(data)
    else:
        data = os.path.abspath(data)
    if isinstance(data, dict):
        ShiftParams(**data["shift"])
    return {"prune": cfg.to_dict(), "arch": arch, "model": model, "data": data}


def build_model(resolved, num_classes, input_shape):
    m = resolved["model"]
    if resolved["arch"] == "small-vgg":
        unknown = set(m) - {"channel_plan", "fc_widths", "batch_norm"}
        if unknown:
            raise ConfigError(f"unknown small-vgg settings {sorted(unknown)}")
        return build_small_vgg(m["channel_plan"], m["fc_widths"], num_classes, tuple(input_shape),
                               m.get("batch_norm", True))
    unknown = set(m) - {"block_plan", "stem_channels"}
    if unknown:
        raise ConfigError(f"unknown small-resnet settings {sorted(unknown)}")
    return build_small_resnet([tuple(b) for b in m["block_plan"]], num_classes, tuple(input_shape),
                              m.get("stem_channels"))


def load_data(resolved):
    spec = resolved["data"]
    if isinstance(spec, str):
        return load_domain_pair(spec)
    spec = dict(spec)
    return generate_synthetic_domains(spec.pop("n_source"), spec.pop("n_target"), shift=ShiftParams(**spec.pop("shift")),
                                      **spec)


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_inputs(paths):
    out = {}
    for p in paths:
        if p is None:
            continue
        if os.path.isdir(p):
            for name in sorted(os.listdir(p)):
                full = os.path.join(p, name)
                if os.path.isfile(full) and name != "manifest.json":
                    out[full] = _sha256(full)
        elif os.path.isfile(p):
            out[p] = _sha256(p)
    return out


def thread_count():
    raw = os.environ.get("TCPRUNE_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"TCPRUNE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"TCPRUNE_THREADS must be >= 1, got {n}")
    return n


def write_manifest(out_dir, command, resolved, extra_args, inputs, outputs, threads):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "tool_version": __version__,
        "command": command,
        "seed": resolved["prune"]["seed"],
        "resolved": resolved,
        "args": extra_args,
        "threads": threads,
        "input_hashes": _hash_inputs(inputs),
        "outputs": {k: os.path.join(out_dir, v) for k, v in outputs.items()},
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def _read_manifest(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {path!r}: {exc}") from exc


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def _need_out(out):
    if not out:
        raise UsageError("--out is required")
    return out


def save_model(directory, graph: ModelGraph, params):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "graph.yaml"), "w") as fh:
        fh.write(graph.dumps())
    save_checkpoint(os.path.join(directory, "model.tcpw"), params)


def load_model(directory):
    try:
        with open(os.path.join(directory, "graph.yaml")) as fh:
            graph = ModelGraph.loads(fh.read())
    except OSError as exc:
        raise ConfigError(f"no model in {directory!r}: {exc}") from exc
    return graph, load_checkpoint(os.path.join(directory, "model.tcpw"))


def cmd_gen_data(resolved, extra, out, threads):
    if isinstance(resolved["data"], str):
        raise ConfigError("gen-data needs a gen: spec, not an existing directory")
    write_manifest(out, "gen-data", resolved, extra, [], {"source": "source.tcpt", "target": "target.tcpt",
                                                          "meta": "meta.yaml"}, threads)
    pair = load_data(resolved)
    save_domain_pair(pair, out)
    print(f"wrote {len(pair.source)} source / {len(pair.target)} target examples to {out}")


def _train_base(resolved, pair, out=None):
    cfg = PruneConfig(**resolved["prune"])
    prep = prepare(pair, cfg)
    graph = build_model(resolved, pair.num_classes, pair.image_shape)
    params = train_base(graph, init_params(graph, cfg.seed), pair, cfg, prep)
    acc = accounting.evaluate_accuracy(graph, params, prep.val_x, prep.val_y)
    if out is not None:
        save_model(out, graph, params)
        with open(os.path.join(out, "base.json"), "w") as fh:
            json.dump({"val_acc": acc, "flops": accounting.count_flops(graph),
                       "params": accounting.count_params(graph, params)}, fh, indent=2, sort_keys=True)
    return graph, params, prep, acc


def cmd_train_base(resolved, extra, out, threads):
    data_in = resolved["data"] if isinstance(resolved["data"], str) else None
    write_manifest(out, "train-base", resolved, extra, [data_in],
                   {"graph": "graph.yaml", "model": "model.tcpw", "base": "base.json"}, threads)
    pair = load_data(resolved)
    _, _, _, acc = _train_base(resolved, pair, out)
    print(f"base model validation accuracy {acc:.4f}; saved to {out}")


def _prune_one(resolved, pair, out, base_dir=None, base=None):
    cfg = PruneConfig(**resolved["prune"])
    if base is not None:
        graph, params, prep, base_acc = base
    elif base_dir is not None:
        graph, params = load_model(base_dir)
        prep = prepare(pair, cfg)
        base_acc = None
    else:
        graph, params, prep, base_acc = _train_base(resolved, pair)
    graph, params, report, _ = run(graph, params, pair, cfg, prep=prep, run_dir=out, base_acc=base_acc)
    if not report.rows:
        raise TCPruneError("no pruning iteration ran (target already met or nothing removable)")
    accounting.emit_report(report, out, graph=graph)
    save_model(out, graph, params)
    return report


def cmd_prune(resolved, extra, out, threads):
    base_dir = extra.get("base")
    data_in = resolved["data"] if isinstance(resolved["data"], str) else None
    write_manifest(out, "prune", resolved, extra, [data_in, base_dir],
                   {"report": "report.csv", "summary": "summary.json", "plot": "plot.json",
                    "model": "model.tcpw"}, threads)
    pair = load_data(resolved)
    report = _prune_one(resolved, pair, out, base_dir)
    f = report.final
    print(f"{report.method}: {f['iterations']} iterations, FLOPs down {f['flops_down']:.3f}, "
          f"params down {f['params_down']:.3f}, val acc {f['val_acc']:.4f}")


def cmd_eval(resolved, extra, out, threads):
    model_dir = extra.get("model")
    if not model_dir:
        raise UsageError("eval needs --model DIR")
    data_in = resolved["data"] if isinstance(resolved["data"], str) else None
    if out:
        write_manifest(out, "eval", resolved, extra, [data_in, model_dir], {"eval": "eval.json"}, threads)
    pair = load_data(resolved)
    if not pair.target.has_labels:
        raise ConfigError("target domain has no labels to evaluate against")
    graph, params = load_model(model_dir)
    acc = evaluate_target(graph, params, pair, purpose="eval command")
    result = {"target_acc": acc, "flops": accounting.count_flops(graph),
              "params": accounting.count_params(graph, params)}
    if out:
        with open(os.path.join(out, "eval.json"), "w") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
    print(json.dumps(result, sort_keys=True))


def cmd_report(args):
    path = os.path.join(args.run, "report.csv")
    if not os.path.exists(path):
        raise ConfigError(f"{path} not found")
    rows = accounting.read_csv(path)
    summary_path = os.path.join(args.run, "summary.json")
    meta = {}
    if os.path.exists(summary_path):
        with open(summary_path) as fh:
            meta = json.load(fh)
    base = meta.get("baseline", {})
    report = accounting.PruneReport(meta.get("method", "?"), meta.get("seed", 0), meta.get("config_hash", ""),
                                    base.get("flops", 0), base.get("params", 0),
                                    base.get("target_acc", float("nan")), rows, meta.get("final", {}),
                                    meta.get("truncations", []))
    formats = tuple(f.strip() for f in args.formats.split(",") if f.strip())
    graph = None
    if os.path.exists(os.path.join(args.run, "graph.yaml")):
        with open(os.path.join(args.run, "graph.yaml")) as fh:
            graph = ModelGraph.loads(fh.read())
    accounting.emit_report(report, args.run, formats, graph=graph, annotate=args.annotate)
    for r in rows:
        print(f"iter {r.iteration:3d}  FLOPs down {r.flops_down:.3f}  params down {r.params_down:.3f}  "
              f"val acc {r.target_acc:.4f}  beta {r.beta:.4f}")


def parse_seeds(text):
    try:
        seeds = [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from None
    if not seeds or len(set(seeds)) != len(seeds):
        raise ConfigError(f"--seeds needs distinct integers, got {text!r}")
    return seeds


def cmd_compare(resolved, extra, out, threads):
    seeds = parse_seeds(extra.get("seeds", "0"))
    data_in = resolved["data"] if isinstance(resolved["data"], str) else None
    write_manifest(out, "compare", resolved, extra, [data_in], {"merged": "compare.csv"}, threads)
    pair = load_data(resolved)
    merged = []
    for seed in seeds:
        seeded = json.loads(json.dumps(resolved))
        seeded["prune"]["seed"] = seed
        base = _train_base(seeded, pair)
        for method in METHODS:
            run_res = json.loads(json.dumps(seeded))
            run_res["prune"]["method"] = method
            run_dir = os.path.join(out, f"seed{seed}", method)
            write_manifest(run_dir, "prune", run_res, {}, [data_in],
                           {"report": "report.csv", "summary": "summary.json", "plot": "plot.json"}, threads)
            graph, params, prep, acc = base
            report = _prune_one(run_res, pair, run_dir, base=(graph, params.copy(), prep, acc))
            for row in report.rows:
                merged.append([method, seed] + row.csv_values())
            log.info("seed %d %s done", seed, method)
    with open(os.path.join(out, "compare.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "seed"] + accounting.CSV_FIELDS)
        w.writerows(merged)
    print(f"{len(seeds) * len(METHODS)} runs written under {out}; merged rows in compare.csv")


COMMANDS = {"gen-data": cmd_gen_data, "train-base": cmd_train_base, "prune": cmd_prune, "eval": cmd_eval,
            "compare": cmd_compare}
EXTRA_KEYS = ("base", "model", "seeds")


@contextlib.contextmanager
def _thread_limit(n):
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=n):
        yield


def _execute(args):
    if args.command == "report":
        cmd_report(args)
        return
    threads = thread_count()
    if args.manifest:
        manifest = _read_manifest(args.manifest)
        if manifest.get("command") != args.command:
            raise ConfigError(f"manifest records command {manifest.get('command')!r}, not {args.command!r}")
        resolved = manifest["resolved"]
        PruneConfig(**resolved["prune"])
        extra = dict(manifest.get("args") or {})
        if threads is None:
            threads = manifest.get("threads")
    else:
        resolved = resolve(args)
        extra = {k: getattr(args, k) for k in EXTRA_KEYS if getattr(args, k, None) is not None}
    out = args.out
    if args.command != "eval":
        out = _need_out(out)
    with _thread_limit(threads):
        COMMANDS[args.command](resolved, extra, out, threads)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:   # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _execute(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TCPruneError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


dispatch = main

if __name__ == "__main__":
    sys.exit(main())
