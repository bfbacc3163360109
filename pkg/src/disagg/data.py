"""Point records to hourly per-level count frames, splits and summary stats."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from disagg import kernels
from disagg.geo import GeoHierarchy

SPLITS = ("train", "val", "test")


class DataError(ValueError):
    """Malformed input data (record files, frames, split rules)."""


@dataclass(frozen=True)
class PointRecord:
    timestamp: float  # UTC seconds
    x: float  # meters, grid frame
    y: float


@dataclass(frozen=True, eq=False)
class Records:
    """Column-oriented batch of point records."""

    ts: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if not (len(self.ts) == len(self.x) == len(self.y)):
            raise DataError("record columns differ in length")

    def __len__(self):
        return len(self.ts)

    @classmethod
    def from_iter(cls, records) -> "Records":
        rows = [(r.timestamp, r.x, r.y) for r in records]
        a = np.array(rows, dtype=np.float64).reshape(-1, 3)
        return cls(a[:, 0].copy(), a[:, 1].copy(), a[:, 2].copy())


@dataclass(frozen=True)
class HourWindow:
    """Half-open range of absolute hour indices ``floor(ts / 3600)``."""

    start: int
    end: int

    def __post_init__(self):
        if self.end <= self.start:
            raise DataError(f"empty hour window [{self.start}, {self.end})")

    @property
    def n_hours(self) -> int:
        return self.end - self.start

    @classmethod
    def from_dates(cls, start, end) -> "HourWindow":
        return cls(to_hour(start), to_hour(end))


def to_hour(value) -> int:
    """Absolute hour index of an int hour, an ISO date/datetime or a datetime (UTC)."""
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, str):
        value = datetime.fromisoformat(value)
    if isinstance(value, datetime):
        if value.tzinfo is None:
            value = value.replace(tzinfo=timezone.utc)
        ts = value.timestamp()
        return int(np.floor(ts / 3600.0))
    raise DataError(f"cannot interpret {value!r} as an hour")


@dataclass(frozen=True, eq=False)
class CountFrame:
    """Hourly counts for one level: ``counts[t, u]`` for hour ``hours[t]``."""

    level: str
    hours: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        hours = np.asarray(self.hours, dtype=np.int64)
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] != hours.shape[0]:
            raise DataError(f"counts shape {counts.shape} does not match {len(hours)} hours")
        if len(hours) > 1 and np.any(np.diff(hours) != 1):
            raise DataError(f"frame {self.level!r}: hours must be contiguous and ascending")
        object.__setattr__(self, "hours", hours)
        object.__setattr__(self, "counts", counts)

    @property
    def n_hours(self) -> int:
        return len(self.hours)

    @property
    def d(self) -> int:
        return self.counts.shape[1]

    def rows(self, start: int, end: int) -> "CountFrame":
        """Sub-frame for absolute hours in ``[start, end)``."""
        mask = (self.hours >= start) & (self.hours < end)
        return CountFrame(self.level, self.hours[mask], self.counts[mask])

    def equals(self, other: "CountFrame") -> bool:
        return (self.level == other.level and np.array_equal(self.hours, other.hours)
                and np.array_equal(self.counts, other.counts))


@dataclass(frozen=True)
class IngestReport:
    n_records: int
    n_out_of_bounds: int
    n_out_of_window: int

    @property
    def n_counted(self) -> int:
        return self.n_records - self.n_out_of_bounds - self.n_out_of_window


def ingest_points(records, h: GeoHierarchy, window: HourWindow):
    """Count records per hour and unit at every level of ``h``.

    Returns ``(frames, report)`` with ``frames`` keyed by level name. Records
    outside the grid or the window are not counted; the report says how many.
    """
    if not isinstance(records, Records):
        records = Records.from_iter(records)
    finest = h.levels[-1]
    ts = np.ascontiguousarray(records.ts, dtype=np.float64)
    x = np.ascontiguousarray(records.x, dtype=np.float64)
    y = np.ascontiguousarray(records.y, dtype=np.float64)
    fine_counts, n_oob, n_win = kernels.bin_records(
        ts, x, y, window.start, window.n_hours, h.grid.cell_size,
        h.grid.rows, h.grid.cols, np.asarray(finest.cell_unit, dtype=np.int64), finest.d)
    fine_counts = np.asarray(fine_counts, dtype=np.int64)
    if len(records) == 0:
        warnings.warn("no point records: all count frames are zero", stacklevel=2)
    hours = np.arange(window.start, window.end, dtype=np.int64)
    frames = {}
    src = np.ascontiguousarray(fine_counts, dtype=np.float64)
    for k, lv in enumerate(h.levels[:-1]):
        agg = kernels.segment_sum(src, h.parent_map(len(h.levels) - 1, k), lv.d)
        frames[lv.name] = CountFrame(lv.name, hours, np.rint(agg).astype(np.int64))
    frames[finest.name] = CountFrame(finest.name, hours, fine_counts)
    return frames, IngestReport(len(records), int(n_oob), int(n_win))


@dataclass(frozen=True)
class SplitRule:
    """Absolute hour ranges ``[start, end)`` for train, val and test."""

    train: tuple
    val: tuple
    test: tuple

    def ranges(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test}

    @classmethod
    def tail(cls, hours, val_hours: int, test_hours: int) -> "SplitRule":
        """Last ``test_hours`` rows for test, the ``val_hours`` before for val, rest train."""
        start, end = int(hours[0]), int(hours[-1]) + 1
        test0 = end - test_hours
        val0 = test0 - val_hours
        return cls((start, val0), (val0, test0), (test0, end))

    @classmethod
    def from_dict(cls, spec: dict, hours=None) -> "SplitRule":
        """Parse a split config.

        Either explicit ranges ``{"train": [a, b], "val": [...], "test": [...]}``
        with ISO dates or absolute hour indices, or the tail form
        ``{"val_hours": n, "test_hours": m}`` (needs ``hours``).
        """
        if "test_hours" in spec:
            if hours is None:
                raise DataError("tail split rule needs the frame hours")
            return cls.tail(hours, int(spec.get("val_hours", 0)), int(spec["test_hours"]))
        try:
            return cls(*(tuple(to_hour(v) for v in spec[name]) for name in SPLITS))
        except KeyError as exc:
            raise DataError(f"split rule missing {exc}") from None


@dataclass(frozen=True)
class SplitSet:
    train: dict
    val: dict
    test: dict
    rule: SplitRule

    def __getitem__(self, name) -> dict:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def row_counts(self) -> dict:
        return {name: next(iter(self[name].values())).n_hours for name in SPLITS}


def make_splits(frames: dict, rule: SplitRule) -> SplitSet:
    """Cut every level's frame into chronological train/val/test pieces."""
    first = next(iter(frames.values()))
    lo, hi = int(first.hours[0]), int(first.hours[-1]) + 1
    prev_end = None
    for name, (a, b) in rule.ranges().items():
        if b <= a:
            raise DataError(f"split {name!r} is empty: [{a}, {b})")
        if a < lo or b > hi:
            raise DataError(f"split {name!r} [{a}, {b}) outside frame hours [{lo}, {hi})")
        if prev_end is not None and a < prev_end:
            raise DataError(f"split {name!r} overlaps or precedes the previous split")
        prev_end = b
    parts = {name: {lv: f.rows(a, b) for lv, f in frames.items()}
             for name, (a, b) in rule.ranges().items()}
    return SplitSet(parts["train"], parts["val"], parts["test"], rule)


def descriptive_stats(frame: CountFrame):
    """Grand mean and population std of per-unit hourly counts."""
    c = np.asarray(frame.counts, dtype=np.float64)
    if c.size == 0:
        raise DataError(f"frame {frame.level!r} is empty")
    return float(c.mean()), float(c.std())


# ---------------------------------------------------------------- file formats

def write_points_csv(records: Records, path) -> None:
    data = np.column_stack([records.ts, records.x, records.y])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("timestamp,x,y\n")
        np.savetxt(fh, data, fmt="%.17g", delimiter=",")


def read_points_csv(path) -> Records:
    """Parse ``timestamp,x,y`` records; every malformed line is reported."""
    ts, xs, ys, errors = [], [], [], []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return Records(np.empty(0), np.empty(0), np.empty(0))
        if [c.strip() for c in header] != ["timestamp", "x", "y"]:
            raise DataError(f"{path}: line 1: expected header 'timestamp,x,y', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                errors.append(f"line {lineno}: expected 3 fields, got {len(row)}")
                continue
            try:
                t, x, y = (float(v) for v in row)
            except ValueError:
                errors.append(f"line {lineno}: non-numeric field in {row}")
                continue
            if not np.isfinite(t):
                errors.append(f"line {lineno}: non-finite timestamp")
                continue
            ts.append(t)
            xs.append(x)
            ys.append(y)
    if errors:
        shown = "; ".join(errors[:20])
        more = f" (+{len(errors) - 20} more)" if len(errors) > 20 else ""
        raise DataError(f"{path}: {len(errors)} malformed record lines: {shown}{more}")
    return Records(np.array(ts), np.array(xs), np.array(ys))


def _fmt(v):
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_frame_csv(frame: CountFrame, path, unit_ids, hierarchy_digest: str) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hour", *unit_ids])
        integral = np.issubdtype(frame.counts.dtype, np.integer)
        for hour, row in zip(frame.hours, frame.counts):
            w.writerow([int(hour), *(map(int, row) if integral else map(_fmt, row))])
    meta = {"level": frame.level, "hierarchy": hierarchy_digest, "hours": frame.n_hours,
            "units": len(unit_ids)}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")


def read_frame_csv(path, hierarchy: GeoHierarchy | None = None) -> CountFrame:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    if hierarchy is not None and meta.get("hierarchy") != hierarchy.digest:
        raise DataError(f"{path}: frame was built on a different hierarchy")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    if header[0] != "hour":
        raise DataError(f"{path}: first column must be 'hour'")
    if hierarchy is not None and tuple(header[1:]) != tuple(map(str, hierarchy.level(meta["level"]).unit_ids)):
        raise DataError(f"{path}: unit columns do not match level {meta['level']!r}")
    try:
        a = np.array([[float(v) for v in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    a = a.reshape(len(rows), len(header))
    counts = a[:, 1:]
    if np.all(counts == np.rint(counts)):
        counts = counts.astype(np.int64)
    return CountFrame(meta["level"], a[:, 0].astype(np.int64), counts)
