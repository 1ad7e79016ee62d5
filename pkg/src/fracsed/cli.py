"""Command-line front end: ``fracsed {train,search,simulate,pareto,gen-data}``.

Exit codes: 0 success, 2 config error, 3 infeasible memory target,
4 invariant violation (simulator mismatch, accumulator overflow, non-finite loss).
"""
import argparse
import contextlib
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import replace

import numpy as np

from . import checkpoint, config as config_mod, experiment
from .accel import (AccumulatorOverflowError, CodeRangeError, EquivalenceError, ModelPoint,
                    compare_models, model_cost, verify_equivalence)
from .config import ConfigError
from .data import generate_dataset, save_dataset
from .fracbits import InfeasibleTargetError, NonFiniteLossError, check_feasible, uniform_footprint
from .quant import MAX_BITS
from .tasks import InsufficientDataError

log = logging.getLogger("fracsed")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_INVARIANT = 0, 2, 3, 4
FLOAT_BYTES = 4


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


@contextlib.contextmanager
def staged_output(out):
    """Build outputs in a scratch directory and move them to ``out`` only on success."""
    out = os.path.abspath(out)
    if os.path.exists(out) and (not os.path.isdir(out) or os.listdir(out)):
        raise ConfigError("--out", f"{out} exists and is not an empty directory")
    parent = os.path.dirname(out)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=f".{os.path.basename(out)}.partial-", dir=parent)
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if os.path.isdir(out):
        os.rmdir(out)
    os.replace(tmp, out)


def _build_net(ecfg, cfg, ds):
    try:
        return experiment.build_model(cfg.task, ds.num_classes, ds.input_shape, cfg.seed, **ecfg.model)
    except TypeError as exc:
        raise ConfigError("model", str(exc)) from None


def _resolve_target(cfg, spec):
    f8 = uniform_footprint(spec, MAX_BITS)
    target = cfg.s_target if cfg.s_target is not None else cfg.s_target_fraction * f8
    check_feasible(spec, target)
    return target, f8


def _train_and_save(cfg, out):
    ecfg = config_mod.to_experiment(cfg)
    ds = generate_dataset(replace(ecfg.dataset, seed=cfg.seed))
    probe = _build_net(ecfg, cfg, ds)
    target = f8 = None
    if cfg.mode == "fracbits":
        # fail before any training or output if the budget cannot be met
        target, f8 = _resolve_target(cfg, probe.spec)
    with staged_output(out) as tmp:
        _write_json(os.path.join(tmp, "config.resolved.json"), cfg.to_dict())
        ds, task, net, flt = experiment.prepare(ecfg, cfg.seed)
        metrics = {"task": cfg.task, "mode": cfg.mode, "seed": cfg.seed,
                   "float_accuracy": flt["accuracy"], "float_accuracy_std": flt["accuracy_std"],
                   "history": flt["history"]}
        if cfg.mode == "float":
            metrics.update(accuracy=flt["accuracy"], accuracy_std=flt["accuracy_std"],
                           footprint_bytes=float_footprint(net.spec))
            bits = {name: None for name in net.bit_states}
        else:
            net, result = experiment.quantized_run(net, task, config_mod.search_config(cfg, target))
            metrics.update(accuracy=result.accuracy, accuracy_std=result.accuracy_std,
                           footprint_bytes=result.footprint_bytes, s_target=target,
                           footprint_8bit=f8 if f8 is not None else uniform_footprint(net.spec, MAX_BITS),
                           history=metrics["history"] + result.history)
            bits = result.bits
        checkpoint.save(net, tmp)
        _write_json(os.path.join(tmp, "bitwidths.json"), bits)
        _write_json(os.path.join(tmp, "metrics.json"), metrics)
    return metrics, bits


def float_footprint(spec):
    return FLOAT_BYTES * sum(l.weight_count + l.bias_count for l in spec.weight_layers)


# -- commands -------------------------------------------------------------------

def cmd_train(args):
    cfg = config_mod.load(args.config, {"seed": args.seed, "mode": args.mode, "bits": args.bits})
    if cfg.mode == "fracbits":
        raise ConfigError("mode", "train runs float or fixed QAT; use 'search' for fracbits")
    metrics, bits = _train_and_save(cfg, args.out)
    print(json.dumps({"out": args.out, "accuracy": metrics["accuracy"], "bits": bits}))
    return EXIT_OK


def cmd_search(args):
    overrides = {"seed": args.seed, "s_target": args.s_target, "mode": "fracbits"}
    cfg = config_mod.load(args.config, overrides)
    metrics, bits = _train_and_save(cfg, args.out)
    print(json.dumps({"out": args.out, "accuracy": metrics["accuracy"],
                      "footprint_bytes": metrics["footprint_bytes"], "s_target": metrics["s_target"],
                      "bits": bits}))
    return EXIT_OK


def cmd_simulate(args):
    run = args.run
    cfg = config_mod.from_dict(_read_json(os.path.join(run, "config.resolved.json")))
    net = checkpoint.load(run)
    if net.mode not in ("fixed", "frozen"):
        raise ConfigError("mode", f"run {run} has no integer bitwidths (mode {net.mode!r})")
    ecfg = config_mod.to_experiment(cfg)
    ds = generate_dataset(replace(ecfg.dataset, seed=cfg.seed))
    pick = np.random.default_rng([cfg.seed, 1]).choice(len(ds.val_idx), size=min(10, len(ds.val_idx)),
                                                       replace=False)
    x = ds.x[ds.val_idx[pick]]
    check = verify_equivalence(net, x)
    bits = net.integer_bits()
    report = model_cost(net.spec, bits)
    metrics = _read_json(os.path.join(run, "metrics.json"))
    if report.memory_bytes != metrics["footprint_bytes"]:
        raise EquivalenceError(f"simulated memory {report.memory_bytes} B differs from the "
                               f"search footprint {metrics['footprint_bytes']} B")
    out = args.out or run
    os.makedirs(out, exist_ok=True)
    report.to_csv(os.path.join(out, "cost.csv"))
    d = report.to_dict()
    d["equivalence"] = {"inputs": int(len(x)), **check}
    _write_json(os.path.join(out, "cost.json"), d)
    print(json.dumps({"memory_bytes": report.memory_bytes, "cycles": report.cycles,
                      "latency_s": report.latency_s, "energy_j": report.energy_j}))
    return EXIT_OK


def _run_point(run):
    cfg = _read_json(os.path.join(run, "config.resolved.json"))
    metrics = _read_json(os.path.join(run, "metrics.json"))
    net = checkpoint.load(run)
    if cfg["mode"] == "float":
        name = "float"
        point = ModelPoint(name, float_footprint(net.spec), metrics["accuracy"])
    else:
        name = f"w{cfg['bits']}" if cfg["mode"] == "fixed" else "fracbits"
        rep = model_cost(net.spec, net.integer_bits())
        point = ModelPoint(name, rep.memory_bytes, metrics["accuracy"], rep.latency_s, rep.energy_j)
    return cfg, point


PARETO_COLUMNS = ("run", "name", "task", "seed", "memory_bytes", "accuracy", "latency_s", "energy_j",
                  "memory_reduction_pct", "latency_reduction_pct", "energy_reduction_pct",
                  "dominated", "dominated_by")


def cmd_pareto(args):
    if len(args.runs) < 2:
        raise ConfigError("runs", "pareto needs at least two run directories")
    cfgs, points = zip(*(_run_point(r) for r in args.runs))
    tasks = sorted({c["task"] for c in cfgs})
    if len(tasks) > 1:
        raise ConfigError("runs", f"refusing to compare runs from different tasks: {tasks}")
    names = [p.name for p in points]
    for i, p in enumerate(points):
        if names.count(p.name) > 1:
            p.name = f"{p.name}#{i}"
    base = next((i for i, c in enumerate(cfgs) if c["mode"] == "fixed" and c["bits"] == MAX_BITS), 0)
    rows = compare_models(list(points), baseline=base)
    with staged_output(args.out) as tmp:
        with open(os.path.join(tmp, "pareto.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PARETO_COLUMNS)
            for run, cfg, row in zip(args.runs, cfgs, rows):
                w.writerow([run, row["name"], cfg["task"], cfg["seed"], row["memory"],
                            repr(row["accuracy"]), _blank(row["latency"]), _blank(row["energy"]),
                            _blank(row["memory_reduction_pct"]), _blank(row["latency_reduction_pct"]),
                            _blank(row["energy_reduction_pct"]), int(row["dominated"]),
                            ";".join(row["dominated_by"])])
        _write_json(os.path.join(tmp, "pareto.json"),
                    {"baseline": points[base].name, "runs": list(args.runs), "rows": rows})
    for row in rows:
        red = row["memory_reduction_pct"]
        print(f"{row['name']:>12}  mem {row['memory']:>8} B  acc {row['accuracy']:.4f}  "
              f"mem-red {'' if red is None else f'{red:.1f}%'}  {'dominated' if row['dominated'] else ''}")
    return EXIT_OK


def _blank(v):
    return "" if v is None else repr(v)


def cmd_gen_data(args):
    cfg = config_mod.load(args.config, {"seed": args.seed})
    ecfg = config_mod.to_experiment(cfg)
    with staged_output(args.out) as tmp:
        ds = generate_dataset(replace(ecfg.dataset, seed=cfg.seed))
        save_dataset(ds, os.path.join(tmp, "dataset"))
        _write_json(os.path.join(tmp, "config.resolved.json"), cfg.to_dict())
    print(json.dumps({"out": args.out, "samples": int(len(ds.y)), "classes": ds.num_classes}))
    return EXIT_OK


# -- entry point -------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="fracsed", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", required=out_required, help="output directory (must be new or empty)")

    t = sub.add_parser("train", help="float training or fixed-bitwidth QAT")
    common(t)
    t.add_argument("--mode", choices=("float", "fixed"))
    t.add_argument("--bits", type=int, help="bitwidth for --mode fixed")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("search", help="FracBits bitwidth search under a memory target")
    common(s)
    s.add_argument("--s-target", type=float, dest="s_target", help="memory target in bytes")
    s.set_defaults(func=cmd_search)

    m = sub.add_parser("simulate", help="bit-serial simulation and cost report of a run")
    m.add_argument("run", help="run directory from train or search")
    m.add_argument("--out", help="where to write cost.csv/cost.json (default: the run directory)")
    m.set_defaults(func=cmd_simulate)

    q = sub.add_parser("pareto", help="memory/accuracy comparison of several runs")
    q.add_argument("runs", nargs="*", help="two or more run directories")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_pareto, usage=q.format_usage)

    g = sub.add_parser("gen-data", help="write the synthetic dataset of a config")
    common(g)
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InsufficientDataError as exc:
        print(f"error: dataset too small for the evaluation protocol: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        if args.command == "pareto" and exc.field == "runs":
            sys.stderr.write(args.usage())
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleTargetError as exc:
        print(f"error: infeasible target: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (EquivalenceError, AccumulatorOverflowError, CodeRangeError, NonFiniteLossError) as exc:
        print(f"error: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
