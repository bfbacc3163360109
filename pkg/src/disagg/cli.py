"""``disagg`` command line: synth, ingest, run, report.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
failure during training.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import platform
import sys
import time
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from disagg import __version__, kernels
from disagg.data import (SPLITS, DataError, HourWindow, SplitRule, descriptive_stats,
                         ingest_points, make_splits, read_points_csv, write_frame_csv,
                         write_points_csv)
from disagg.experiment import (BASELINE_MODELS, METRIC_COLUMNS, ConfigError, atomic_write,
                               check_levels, load_matrix, matrix_data, median_rows, run_matrix)
from disagg.geo import HierarchyError, load_hierarchy, save_hierarchy
from disagg.optim import TrainingError
from disagg.synth import SynthConfig, default_config, load_config, synth_generate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _table(header, rows) -> str:
    cells = [list(map(str, header))] + [[_fmt(v) if isinstance(v, float) else str(v) for v in r]
                                        for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells)


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    return out


# -------------------------------------------------------------------- synth

def stats_rows(frames: dict, h) -> list:
    rows = []
    for lv in h.levels:
        mean, std = descriptive_stats(frames[lv.name])
        rows.append([lv.name, lv.d, round(mean, 6), round(std, 6)])
    return rows


def cmd_synth(args) -> int:
    try:
        cfg = load_config(args.config) if args.config else default_config()
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read synth config: {exc}") from None
    if args.seed is not None:
        cfg = SynthConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    out = _out_dir(args.out)
    records, h, frames = synth_generate(cfg)
    write_points_csv(records, out / "records.csv")
    save_hierarchy(h, out / "hierarchy.json")
    (out / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n",
                                           encoding="utf-8")
    fdir = out / "frames"
    fdir.mkdir(exist_ok=True)
    for lv in h.levels:
        write_frame_csv(frames[lv.name], fdir / f"{lv.name}.csv", lv.unit_ids, h.digest)
    header = ["level", "units", "mean", "std"]
    rows = stats_rows(frames, h)
    (out / "stats.csv").write_text(_csv_text(header, rows), encoding="utf-8")
    print(f"{len(records)} records over {cfg.hours} hours -> {out}")
    print(_table(header, rows))
    return EXIT_OK


# ------------------------------------------------------------------- ingest

def cmd_ingest(args) -> int:
    try:
        h = load_hierarchy(args.hierarchy)
        with open(args.splits, encoding="utf-8") as fh:
            split_spec = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read inputs: {exc}") from None
    records = read_points_csv(args.points)
    if "test_hours" in split_spec:
        # tail rule: the window is the hour span of the records themselves
        if len(records) == 0:
            raise DataError("a tail split rule needs at least one record to fix the window")
        lo, hi = int(np.floor(records.ts.min() / 3600)), int(np.floor(records.ts.max() / 3600))
        rule = SplitRule.from_dict(split_spec, np.arange(lo, hi + 1))
    else:
        rule = SplitRule.from_dict(split_spec)
    window = HourWindow(rule.train[0], rule.test[1])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        frames, report = ingest_points(records, h, window)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    splits = make_splits(frames, rule)
    out = _out_dir(args.out)
    save_hierarchy(h, out / "hierarchy.json")
    for name in SPLITS:
        d = out / name
        d.mkdir(exist_ok=True)
        for lv in h.levels:
            write_frame_csv(splits[name][lv.name], d / f"{lv.name}.csv", lv.unit_ids, h.digest)
    counts = splits.row_counts()
    header = ["split", "start_hour", "end_hour", "hours"]
    rows = [[n, *rule.ranges()[n], counts[n]] for n in SPLITS]
    (out / "split_summary.csv").write_text(_csv_text(header, rows), encoding="utf-8")
    rep = {"records": report.n_records, "counted": report.n_counted,
           "out_of_bounds": report.n_out_of_bounds, "out_of_window": report.n_out_of_window}
    (out / "ingest_report.json").write_text(json.dumps(rep, indent=1) + "\n", encoding="utf-8")
    print(_table(header, rows))
    print(f"records: {report.n_records}, counted: {report.n_counted}, dropped out of bounds: "
          f"{report.n_out_of_bounds}, dropped out of window: {report.n_out_of_window}")
    return EXIT_OK


# ---------------------------------------------------------------------- run

def cmd_run(args) -> int:
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    started = datetime.now(timezone.utc).isoformat()
    m = load_matrix(args.config)
    if args.seed is not None:
        m.seeds = [args.seed + k for k in range(len(m.seeds))]
    h, splits = matrix_data(m)
    m.validate(h)
    check_levels(m, h, splits)
    cells = m.cells()
    out = _out_dir(args.out)
    hist = out / "history"
    hist.mkdir(exist_ok=True)

    def save_history(r):
        if r.cell.model in BASELINE_MODELS:
            return
        atomic_write(hist / f"{r.cell.key}.csv",
                     _csv_text(["epoch", "train_loss", "val_loss"],
                               [[e, repr(tl), repr(vl)] for e, tl, vl in r.history]))

    t0 = time.perf_counter()
    print(f"running {len(cells)} cells with {args.jobs} job(s)", file=sys.stderr)
    results = run_matrix(m, h, splits, jobs=args.jobs, on_result=save_history)
    rows = [r.row() for r in results]
    atomic_write(out / "metrics.csv",
                 _csv_text(METRIC_COLUMNS, [[_fmt(r[c]) for c in METRIC_COLUMNS] for r in rows]))
    med = median_rows(rows)
    med_cols = ["task", "model", "scheme", "weighted", "n", "mae_raw", "mae_per_area"]
    atomic_write(out / "metrics_median.csv",
                 _csv_text(med_cols, [[_fmt(r[c]) for c in med_cols] for r in med]))
    manifest = {
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "kernel_backend": kernels.BACKEND,
        "config": str(args.config),
        "config_hash": m.digest(),
        "hierarchy_hash": h.digest,
        "seeds": list(m.seeds),
        "jobs": args.jobs,
        "cells": len(cells),
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "seconds": round(time.perf_counter() - t0, 3),
        "cell_seconds": {r.cell.key: round(r.seconds, 3) for r in results},
    }
    atomic_write(out / "manifest.json", json.dumps(manifest, indent=1) + "\n")
    print(_table(med_cols, [[r[c] for c in med_cols] for r in med]))
    return EXIT_OK


# ------------------------------------------------------------------- report

def read_metrics(path) -> list:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            need = {"task", "model", "scheme", "mae_raw", "mae_per_area"}
            if reader.fieldnames is None or not need <= set(reader.fieldnames):
                raise DataError(f"{path}: metrics CSV needs columns {sorted(need)}")
            rows = []
            for lineno, r in enumerate(reader, start=2):
                try:
                    r["mae_raw"], r["mae_per_area"] = float(r["mae_raw"]), float(r["mae_per_area"])
                except (TypeError, ValueError):
                    raise DataError(f"{path}: line {lineno}: non-numeric MAE") from None
                r["n"] = int(r.get("n") or 1)
                rows.append(r)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None
    return rows


def scheme_label(r) -> str:
    return r["scheme"] + ("(unweighted)" if r.get("weighted") == "false" else "")


def column_label(r) -> str:
    scheme = scheme_label(r)
    return r["model"] if scheme in ("-", "plain") else f"{r['model']}+{scheme}"


def pivot(rows: list, metric: str):
    """``(tasks, columns, values, counts, groups)``: median of ``metric`` per task and column."""
    tasks, cols, groups = [], [], {}
    for r in rows:
        t, c = r["task"], column_label(r)
        if t not in tasks:
            tasks.append(t)
        if c not in cols:
            cols.append(c)
        groups.setdefault((t, c), []).append(r)
    values = {k: float(np.median([r[metric] for r in rs])) for k, rs in groups.items()}
    counts = {k: sum(r["n"] for r in rs) for k, rs in groups.items()}
    return tasks, cols, values, counts, groups


def cmd_report(args) -> int:
    rows = read_metrics(args.metrics)
    if not rows:
        raise DataError(f"{args.metrics}: no metric rows")
    out = _out_dir(args.out)
    long_rows = []
    for metric in ("mae_raw", "mae_per_area"):
        tasks, cols, values, counts, groups = pivot(rows, metric)
        table = []
        for t in tasks:
            present = [c for c in cols if (t, c) in values]
            best = min(present, key=lambda c: values[(t, c)])
            table.append([t, *[_fmt(values[(t, c)]) if (t, c) in values else "" for c in cols],
                          best])
            for c in present:
                first = groups[(t, c)][0]
                long_rows.append([t, first["model"], scheme_label(first), metric,
                                  _fmt(values[(t, c)]), counts[(t, c)]])
        (out / f"pivot_{metric}.csv").write_text(_csv_text(["task", *cols, "best"], table),
                                                 encoding="utf-8")
        if metric == args.metric:
            print(_table(["task", *cols, "best"], table))
    (out / "long.csv").write_text(
        _csv_text(["task", "model", "scheme", "metric", "value", "n"], long_rows), encoding="utf-8")
    return EXIT_OK


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="disagg", description="Hierarchical spatial disaggregation of hourly counts.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic city and its ground-truth frames")
    s.add_argument("--config", help="synth config JSON (default: bundled desk-scale city)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, help="override the config's data seed")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="bin point records into per-level, per-split frames")
    s.add_argument("--points", required=True, help="CSV with header timestamp,x,y")
    s.add_argument("--hierarchy", required=True, help="hierarchy JSON")
    s.add_argument("--splits", required=True, help="split rule JSON")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("run", help="run an experiment matrix")
    s.add_argument("--config", required=True, help="matrix config JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1, help="parallel matrix cells (default 1)")
    s.add_argument("--seed", type=int, help="first seed; keeps the config's seed count")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("report", help="pivot tables and long-format CSV from metrics")
    s.add_argument("metrics", help="metrics.csv or metrics_median.csv from 'disagg run'")
    s.add_argument("--out", required=True)
    s.add_argument("--metric", choices=("mae_raw", "mae_per_area"), default="mae_raw",
                   help="metric printed to the terminal")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, HierarchyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining validation failures (e.g. synth config fields) are config errors
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
