"""Command line entry point: prepare, run, sweep, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
divergence (including an emptied training set).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import experiment
from .errors import ConfigError, DataError, EmptyTrainingSet, TrainingDivergence
from .evfl import METHODS, MessageBus, VflConfig, run_method

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 2, 3, 4

LABELS = {
    "local": "Local", "vfl": "VFL", "local_vfl": "Local + VFL", "random_match": "Random Match",
    "imp": "IMP", "imp_st": "IMP + ST", "imp_evfl": "IMP + EVFL", "risa": "RISA",
}


def _list(text, cast):
    try:
        return [cast(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse list {text!r}") from None


def load_config(path, n_classes, seed, n_parties=2):
    """Benchmark profile, optionally overridden by a JSON file of config fields."""
    overrides = {}
    if path:
        try:
            with open(path) as fh:
                overrides = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    if overrides.get("n_classes", n_classes) != n_classes:
        raise ConfigError(f"config says {overrides['n_classes']} classes, data has {n_classes}")
    merged = {**experiment.BENCHMARK_CONFIG, **overrides,
              "n_classes": n_classes, "n_parties": n_parties}
    if seed is not None:
        merged["seed"] = seed
    return VflConfig.from_json(merged)


def _methods(text):
    methods = _list(text, str)
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ConfigError(f"unknown methods {sorted(unknown)}; choose from {list(METHODS)}")
    return methods


def cmd_prepare(args):
    overlap = _list(args.overlap or "0.1", float)[0]
    seed = args.seed if args.seed is not None else 0
    if args.csv:
        bundle = experiment.csv_bundle(args.csv, overlap, seed, n_parties=args.n_parties)
    else:
        bundle = experiment.synthetic_bundle(overlap, seed)
    bundle.save(args.out_dir)
    m = bundle.manifest
    print(f"prepared {len(m['train_ids'])} training rows ({len(m['overlap_ids'])} overlapping), "
          f"{len(m['test_ids'])} test rows in {args.out_dir}")


def _report_path(out_dir):
    return os.path.join(out_dir, "report.json")


def _load_report(out_dir):
    path = _report_path(out_dir)
    if os.path.exists(path):
        with open(path) as fh:
            return json.load(fh)
    return {"rows": [], "seconds": {}}


def cmd_run(args):
    bundle = experiment.Bundle.load(args.out_dir)
    config = load_config(args.config, bundle.n_classes, args.seed, bundle.n_parties)
    method = args.method or "risa"
    _methods(method)
    runs = os.path.join(args.out_dir, "runs")
    os.makedirs(runs, exist_ok=True)
    stem = os.path.join(runs, f"{method}_seed{config.seed}")
    bus = MessageBus(trace_path=args.trace_messages) if args.trace_messages else None
    start = time.perf_counter()
    try:
        row = run_method(method, bundle.parties(), config, bundle.test(),
                         metrics_path=stem + ".metrics.jsonl", bus=bus,
                         dump_path=args.dump_opinions)
    finally:
        if bus:
            bus.close()
    seconds = time.perf_counter() - start
    row.pop("seconds", None)
    row.update(overlap=bundle.manifest.get("overlap_fraction"), config=config.to_json(),
               metrics=os.path.relpath(stem + ".metrics.jsonl", args.out_dir))
    report = _load_report(args.out_dir)
    key = f"{method}/{config.seed}"
    report["rows"] = [r for r in report["rows"] if f"{r['method']}/{r['seed']}" != key] + [row]
    report["seconds"][key] = seconds
    with open(_report_path(args.out_dir), "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    auc = "" if row["test_auc"] is None else f", AUC {100 * row['test_auc']:.2f}%"
    print(f"{method} seed {config.seed}: accuracy {100 * row['test_acc']:.2f}%{auc}")


def sweep(methods, fractions, seeds, config_path=None, csv=None, out_dir=None):
    """Run every method at every overlap fraction and seed; returns the sweep record."""
    if any(not 0 < f <= 1 for f in fractions):
        raise ConfigError("overlap fractions must lie in (0, 1]")
    cells = []
    start = time.perf_counter()
    for f in fractions:
        for s in seeds:
            bundle = (experiment.csv_bundle(csv, f, s) if csv
                      else experiment.synthetic_bundle(f, s))
            config = load_config(config_path, bundle.n_classes, s, bundle.n_parties)
            for m in methods:
                metrics = None
                if out_dir:
                    metrics = os.path.join(out_dir, "runs", f"{m}_f{f}_seed{s}.metrics.jsonl")
                row = run_method(m, bundle.parties(), config, bundle.test(),
                                 metrics_path=metrics)
                cells.append({"method": m, "overlap": f, "seed": s,
                              "test_acc": row["test_acc"], "test_auc": row["test_auc"],
                              "n_train": row["n_train"], "metrics": metrics})
    return {"methods": methods, "fractions": fractions, "seeds": seeds, "cells": cells,
            "median": median_table(cells, methods, fractions),
            "seconds": time.perf_counter() - start}


def median_table(cells, methods, fractions, metric="test_acc"):
    table = {}
    for m in methods:
        table[m] = {}
        for f in fractions:
            vals = [c[metric] for c in cells if c["method"] == m and c["overlap"] == f
                    and c[metric] is not None]
            table[m][str(f)] = float(np.median(vals)) if vals else None
    return table


def render_table(methods, fractions, table, seeds, metric="Accuracy"):
    lines = [f"{metric} (%) by overlapping proportion, median over seeds {list(seeds)}.", "",
             "| Method | " + " | ".join(f"{100 * f:g}%" for f in fractions) + " |",
             "|---" * (len(fractions) + 1) + "|"]
    for m in methods:
        vals = [table[m][str(f)] for f in fractions]
        cells = ["-" if v is None else f"{100 * v:.2f}" for v in vals]
        lines.append(f"| {LABELS.get(m, m)} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_sweep(args):
    methods = _methods(args.method or "local,vfl,local_vfl,random_match,risa")
    fractions = _list(args.overlap or "0.01,0.1,0.5", float)
    seeds = _list(args.seed if args.seed is not None else "0,1,2,3,4", int)
    os.makedirs(os.path.join(args.out_dir, "runs"), exist_ok=True)
    record = sweep(methods, fractions, seeds, args.config, args.csv, args.out_dir)
    with open(os.path.join(args.out_dir, "sweep.json"), "w") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
    md = render_table(methods, fractions, record["median"], seeds)
    with open(os.path.join(args.out_dir, "sweep.md"), "w") as fh:
        fh.write(md)
    print(md, end="")


def cmd_report(args):
    sweep_path = os.path.join(args.out_dir, "sweep.json")
    if os.path.exists(sweep_path):
        with open(sweep_path) as fh:
            rec = json.load(fh)
        md = render_table(rec["methods"], rec["fractions"], rec["median"], rec["seeds"])
        if any(c["test_auc"] is not None for c in rec["cells"]):
            auc = median_table(rec["cells"], rec["methods"], rec["fractions"], "test_auc")
            md += "\n" + render_table(rec["methods"], rec["fractions"], auc, rec["seeds"], "AUC")
    else:
        report = _load_report(args.out_dir)
        if not report["rows"]:
            raise DataError(f"nothing to report in {args.out_dir}")
        methods = [m for m in METHODS if any(r["method"] == m for r in report["rows"])]
        fractions = sorted({r["overlap"] for r in report["rows"]})
        seeds = sorted({r["seed"] for r in report["rows"]})
        table = median_table(report["rows"], methods, fractions)
        md = render_table(methods, fractions, table, seeds)
    with open(os.path.join(args.out_dir, "report.md"), "w") as fh:
        fh.write(md)
    print(md, end="")


def build_parser():
    parser = argparse.ArgumentParser(prog="risa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--out-dir", required=True, help="bundle / output directory")
        p.add_argument("--seed", help="random seed (sweep: comma-separated list)")
        if config:
            p.add_argument("--config", help="JSON file of training settings")
        return p

    p = common(sub.add_parser("prepare", help="split a dataset into party files"), config=False)
    p.add_argument("--overlap", help="overlapping fraction of training rows (default 0.1)")
    p.add_argument("--csv", help="source table with a 'label' column (default: synthetic)")
    p.add_argument("--n-parties", type=int, default=2)
    p.set_defaults(func=cmd_prepare, seed_type=int)

    p = common(sub.add_parser("run", help="train one method on a prepared bundle"))
    p.add_argument("--method", help=f"one of {', '.join(METHODS)} (default risa)")
    p.add_argument("--dump-opinions", metavar="PATH", help="write test-set opinions as JSON lines")
    p.add_argument("--trace-messages", metavar="PATH", help="write message headers as JSON lines")
    p.set_defaults(func=cmd_run, seed_type=int)

    p = common(sub.add_parser("sweep", help="methods x overlap fractions x seeds"))
    p.add_argument("--method", help="comma-separated methods")
    p.add_argument("--overlap", help="comma-separated fractions (default 0.01,0.1,0.5)")
    p.add_argument("--csv", help="source table (default: synthetic benchmark)")
    p.set_defaults(func=cmd_sweep, seed_type=str)

    p = sub.add_parser("report", help="render results as a Markdown table")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report, seed_type=None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if getattr(args, "seed", None) is not None and args.seed_type is int:
            try:
                args.seed = int(args.seed)
            except ValueError:
                raise ConfigError(f"seed must be an integer, got {args.seed!r}") from None
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergence, EmptyTrainingSet) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        diag = getattr(exc, "diagnostics", None)
        if diag:
            print(json.dumps(diag), file=sys.stderr)
        return EXIT_DIVERGENCE
    return 0


if __name__ == "__main__":
    sys.exit(main())
