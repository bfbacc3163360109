"""Experiment matrix: expansion, validation and execution of single cells.

A matrix config is JSON::

    {
      "data": "path/to/ingest-output",   # or "synth": {...} or "synth.json", plus "splits"
      "tasks": [["PUMA", "NTA"], ["PUMA", "EXTREME"]],
      "models": ["CW", "AW", "HR", "FNN",
                 {"name": "LSTM", "schemes": ["plain"], "targets": ["NTA"]}],
      "schemes": ["plain", "cot", "cot+rec-full"],
      "weighted": [true],
      "seeds": [0, 1, 2],
      "train": {"batch_size": 8, "lr": 1e-4, "max_epochs": 200, "patience": 10},
      "model": {"hidden": [64, 256], "lstm_hidden": 128, "window": 5, "input_scale": 1.0},
      "clamp": true
    }

``schemes`` and ``weighted`` apply to neural models only; the classical
baselines run once per task and seed under the label ``-``. A model entry
given as an object may narrow the schemes and the target levels it runs on.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from disagg import baselines
from disagg.data import SPLITS, DataError, SplitRule, SplitSet, make_splits, read_frame_csv
from disagg.geo import GeoHierarchy, load_hierarchy
from disagg.models import ModelSpec, build_model
from disagg.training import LossScheme, TrainConfig, evaluate, predict, train

BASELINE_MODELS = ("CW", "AW", "HR")
NEURAL_MODELS = ("FNN", "LSTM")
MODELS = BASELINE_MODELS + NEURAL_MODELS
NO_SCHEME = "-"

METRIC_COLUMNS = ("task", "model", "scheme", "weighted", "seed", "mae_raw", "mae_per_area",
                  "best_epoch", "epochs_run")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Cell:
    source: str
    target: str
    model: str
    scheme: str
    weighted: bool
    seed: int

    @property
    def task(self) -> str:
        return f"{self.source}->{self.target}"

    @property
    def key(self) -> str:
        w = "w" if self.weighted else "u"
        scheme = self.scheme.replace("+", "_") if self.scheme != NO_SCHEME else "none"
        return f"{self.source}-{self.target}.{self.model}.{scheme}.{w}.s{self.seed}"


@dataclass
class ExperimentMatrix:
    tasks: list
    models: list  # (name, schemes or None, targets or None)
    schemes: list = field(default_factory=lambda: ["plain"])
    weighted: list = field(default_factory=lambda: [True])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    train: TrainConfig = field(default_factory=TrainConfig)
    model: dict = field(default_factory=dict)
    clamp: bool = True
    data: str | None = None
    synth: dict | None = None
    splits: dict | None = None

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "ExperimentMatrix":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown matrix fields {sorted(unknown)}")
        try:
            tasks = [tuple(t) for t in d.pop("tasks")]
            models = [(m, None, None) if isinstance(m, str)
                      else (m["name"], m.get("schemes"), m.get("targets"))
                      for m in d.pop("models")]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"matrix needs 'tasks' and 'models': {exc}") from None
        if any(len(t) != 2 for t in tasks):
            raise ConfigError("each task is a [source, target] pair")
        try:
            tcfg = TrainConfig(**d.pop("train", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from None
        unknown = set(d.get("model", {})) - {"hidden", "lstm_hidden", "window", "input_scale"}
        if unknown:
            raise ConfigError(f"model: unknown options {sorted(unknown)}")
        if base_dir is not None:
            for key in ("data", "synth"):
                if isinstance(d.get(key), str):
                    d[key] = str(Path(base_dir) / d[key])
        m = cls(tasks=tasks, models=models, train=tcfg, **d)
        m._check()
        return m

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = [list(t) for t in self.tasks]
        d["models"] = []
        for n, s, t in self.models:
            if s is None and t is None:
                d["models"].append(n)
                continue
            entry = {"name": n}
            if s is not None:
                entry["schemes"] = list(s)
            if t is not None:
                entry["targets"] = list(t)
            d["models"].append(entry)
        return d

    def _check(self):
        if not self.tasks or not self.models or not self.seeds:
            raise ConfigError("tasks, models and seeds must be nonempty")
        if (self.data is None) == (self.synth is None):
            raise ConfigError("give exactly one of 'data' (ingest output dir) or 'synth'")
        if self.synth is not None and self.splits is None:
            raise ConfigError("'synth' data needs a 'splits' rule")
        if not self.weighted or any(not isinstance(w, bool) for w in self.weighted):
            raise ConfigError("'weighted' is a nonempty list of booleans")
        for name, schemes, _ in self.models:
            if name not in MODELS:
                raise ConfigError(f"unknown model {name!r}; choose from {MODELS}")
            for s in schemes if schemes is not None else ():
                if name in BASELINE_MODELS and s != "plain":
                    raise ConfigError(f"scheme {s!r} requested for classical baseline {name}")
        for s in self.schemes:
            try:
                LossScheme.parse(s)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        for name, schemes, _ in self.models:
            for s in schemes or ():
                try:
                    LossScheme.parse(s)
                except ValueError as exc:
                    raise ConfigError(f"{name}: {exc}") from None

    def validate(self, h: GeoHierarchy) -> None:
        for src, tgt in self.tasks:
            for lv in (src, tgt):
                if lv not in h.names:
                    raise ConfigError(f"task {src}->{tgt}: no level {lv!r} in hierarchy {h.names}")
            if h.level_index(src) >= h.level_index(tgt):
                raise ConfigError(f"task {src}->{tgt}: source must be coarser than target")
        for name, _, targets in self.models:
            for lv in targets or ():
                if lv not in h.names:
                    raise ConfigError(f"{name}: no target level {lv!r} in hierarchy {h.names}")

    def cells(self) -> list:
        out = []
        for src, tgt in self.tasks:
            for name, schemes, targets in self.models:
                if targets is not None and tgt not in targets:
                    continue
                for seed in self.seeds:
                    if name in BASELINE_MODELS:
                        out.append(Cell(src, tgt, name, NO_SCHEME, True, int(seed)))
                        continue
                    for s in schemes if schemes is not None else self.schemes:
                        label = LossScheme.parse(s).label
                        for w in self.weighted:
                            out.append(Cell(src, tgt, name, label, w, int(seed)))
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


def load_matrix(path) -> ExperimentMatrix:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read matrix config: {exc}") from None
    return ExperimentMatrix.from_dict(d, base_dir=Path(path).parent)


# --------------------------------------------------------------------- data

def load_splits(data_dir) -> tuple:
    """Read an ingest output directory: ``hierarchy.json`` plus ``<split>/<level>.csv``."""
    data_dir = Path(data_dir)
    hpath = data_dir / "hierarchy.json"
    if not hpath.exists():
        raise DataError(f"{data_dir}: no hierarchy.json")
    h = load_hierarchy(hpath)
    parts = {}
    for name in SPLITS:
        d = data_dir / name
        if not d.is_dir():
            raise DataError(f"{data_dir}: missing split directory {name!r}")
        parts[name] = {lv: read_frame_csv(d / f"{lv}.csv", h) for lv in h.names
                       if (d / f"{lv}.csv").exists()}
    firsts = [next(iter(parts[n].values()), None) for n in SPLITS]
    if any(f is None for f in firsts):
        raise DataError(f"{data_dir}: a split directory holds no frames")
    rule = SplitRule(*((int(f.hours[0]), int(f.hours[-1]) + 1) for f in firsts))
    return h, SplitSet(parts["train"], parts["val"], parts["test"], rule)


def matrix_data(m: ExperimentMatrix):
    if m.data is not None:
        return load_splits(m.data)
    from disagg.synth import SynthConfig, synth_generate

    try:
        if isinstance(m.synth, str):
            with open(m.synth, encoding="utf-8") as fh:
                cfg = SynthConfig.from_dict(json.load(fh))
        else:
            cfg = SynthConfig.from_dict(m.synth)
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    _, h, frames = synth_generate(cfg)
    hours = next(iter(frames.values())).hours
    return h, make_splits(frames, SplitRule.from_dict(m.splits, hours))


def check_levels(m: ExperimentMatrix, h: GeoHierarchy, splits: SplitSet) -> None:
    need = set()
    for src, tgt in m.tasks:
        need.update(lv.name for lv in h.levels[h.level_index(src):h.level_index(tgt) + 1])
    for name in SPLITS:
        missing = sorted(need - set(splits[name]), key=h.level_index)
        if missing:
            raise DataError(f"split {name!r} lacks frames for levels {missing}")


# ---------------------------------------------------------------- execution

@dataclass
class CellResult:
    cell: Cell
    mae_raw: float
    mae_per_area: float
    best_epoch: int
    epochs_run: int
    history: list
    seconds: float

    def row(self) -> dict:
        c = self.cell
        return {"task": c.task, "model": c.model, "scheme": c.scheme,
                "weighted": "-" if c.model in BASELINE_MODELS else str(c.weighted).lower(),
                "seed": c.seed, "mae_raw": self.mae_raw, "mae_per_area": self.mae_per_area,
                "best_epoch": self.best_epoch, "epochs_run": self.epochs_run}


def run_cell(cell: Cell, m: ExperimentMatrix, h: GeoHierarchy, splits: SplitSet) -> CellResult:
    t0 = time.perf_counter()
    test_truth = splits.test[cell.target]
    rows, history, best, epochs = None, [], 0, 0
    if cell.model in BASELINE_MODELS:
        x = splits.test[cell.source].counts
        if cell.model == "CW":
            pred = baselines.cw_disaggregate(x, h, cell.target, cell.source)
        elif cell.model == "AW":
            pred = baselines.aw_disaggregate(x, h, cell.target, cell.source)
        else:
            table = baselines.hr_fit(splits.train[cell.source], splits.train[cell.target], h)
            pred = baselines.hr_disaggregate(x, table)
    else:
        scheme = LossScheme.parse(cell.scheme, cell.weighted)
        opts = dict(m.model)
        if "hidden" in opts:
            opts["hidden"] = tuple(opts["hidden"])
        spec = ModelSpec(cell.model, cell.source, cell.target, cot=scheme.cot, **opts)
        model = build_model(spec, h, seed=cell.seed)
        cfg = TrainConfig(**{**asdict(m.train), "seed": cell.seed})
        res = train(model, splits, h, scheme, cfg)
        rows, pred = predict(model, splits.test, splits.val)
        history, best, epochs = res.history, res.best_epoch, res.epochs_run
    rep = evaluate(pred, test_truth, h, rows, clamp=m.clamp)
    return CellResult(cell, rep.mae_raw, rep.mae_per_area, best, epochs, history,
                      time.perf_counter() - t0)


# per-process state for parallel execution
_WORKER = {}


def _init_worker(m, h, splits):
    _WORKER.update(m=m, h=h, splits=splits)


def _run_in_worker(cell):
    return run_cell(cell, _WORKER["m"], _WORKER["h"], _WORKER["splits"])


def run_matrix(m: ExperimentMatrix, h: GeoHierarchy, splits: SplitSet, jobs: int = 1,
               on_result=None) -> list:
    """Run every cell; results come back in cell order regardless of ``jobs``."""
    cells = m.cells()
    if jobs <= 1 or len(cells) == 1:
        results = []
        for c in cells:
            r = run_cell(c, m, h, splits)
            if on_result:
                on_result(r)
            results.append(r)
        return results
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                             initargs=(m, h, splits)) as pool:
        results = []
        for r in pool.map(_run_in_worker, cells):
            if on_result:
                on_result(r)
            results.append(r)
    return results


def median_rows(rows: list) -> list:
    """Per-(task, model, scheme, weighted) medians over seeds, in first-seen order."""
    groups = {}
    for r in rows:
        groups.setdefault((r["task"], r["model"], r["scheme"], r["weighted"]), []).append(r)
    out = []
    for (task, model, scheme, weighted), rs in groups.items():
        out.append({"task": task, "model": model, "scheme": scheme, "weighted": weighted,
                    "n": len(rs),
                    "mae_raw": float(np.median([r["mae_raw"] for r in rs])),
                    "mae_per_area": float(np.median([r["mae_per_area"] for r in rs]))})
    return out


def atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
