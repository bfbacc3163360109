"""Training-free disaggregation: constant, areal and historical-ratio weighting.

All three split each coarse value among the fine units below it using a
fixed share per fine unit; shares of one parent's children sum to 1, so
re-aggregating the output returns the input.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from disagg import kernels
from disagg.data import CountFrame, DataError
from disagg.geo import GeoHierarchy


@dataclass(frozen=True, eq=False)
class RatioTable:
    fine_level: str
    coarse_level: str
    parent: np.ndarray  # coarse index per fine unit
    ratio: np.ndarray  # share per fine unit
    d_coarse: int

    def to_csv(self, path, h: GeoHierarchy) -> None:
        fine, coarse = h.level(self.fine_level), h.level(self.coarse_level)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fine_unit", "parent_unit", "ratio"])
            for j, (p, r) in enumerate(zip(self.parent, self.ratio)):
                w.writerow([fine.unit_ids[j], coarse.unit_ids[p], repr(float(r))])

    @classmethod
    def from_csv(cls, path, h: GeoHierarchy, fine, coarse) -> "RatioTable":
        fine_lv, coarse_lv = h.level(fine), h.level(coarse)
        parent = h.parent_map(fine, coarse)
        ratio = np.full(fine_lv.d, np.nan)
        with open(path, encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                j = fine_lv.index(row["fine_unit"])
                if coarse_lv.index(row["parent_unit"]) != parent[j]:
                    raise DataError(f"{path}: {row['fine_unit']} is not under {row['parent_unit']}")
                ratio[j] = float(row["ratio"])
        if np.isnan(ratio).any():
            raise DataError(f"{path}: ratios missing for some {fine_lv.name} units")
        return cls(fine_lv.name, coarse_lv.name, parent, ratio, coarse_lv.d)


def _coarse_for(h: GeoHierarchy, d: int, fine, coarse):
    if coarse is not None:
        return h.level_index(coarse)
    for i, lv in enumerate(h.levels):
        if lv.d == d:
            return i
    raise ValueError(f"no level of {h!r} has {d} units")


def _apply(x_coarse, parent, share, d_coarse):
    x = np.asarray(x_coarse, dtype=np.float64)
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[-1] != d_coarse:
        raise ValueError(f"expected {d_coarse} coarse values, got shape {x.shape}")
    out = kernels.scatter_shares(np.ascontiguousarray(x2), parent, share)
    return out[0] if squeeze else out


def _shares(parent, weight, d_coarse):
    weight = np.asarray(weight, dtype=np.float64)
    tot = np.bincount(parent, weights=weight, minlength=d_coarse)
    return weight / tot[parent]


def cw_shares(h: GeoHierarchy, fine, coarse) -> np.ndarray:
    parent = h.parent_map(fine, coarse)
    return _shares(parent, np.ones(len(parent)), h.level(coarse).d)


def aw_shares(h: GeoHierarchy, fine, coarse) -> np.ndarray:
    parent = h.parent_map(fine, coarse)
    return _shares(parent, h.level(fine).cell_count, h.level(coarse).d)


def cw_disaggregate(x_coarse, h: GeoHierarchy, fine, coarse=None) -> np.ndarray:
    """Equal split of each coarse value among its fine descendants.

    ``x_coarse`` is one vector or an ``(N, d_coarse)`` matrix; the coarse
    level is inferred from its width unless given.
    """
    ci = _coarse_for(h, np.shape(x_coarse)[-1], fine, coarse)
    return _apply(x_coarse, h.parent_map(fine, ci), cw_shares(h, fine, ci), h.levels[ci].d)


def aw_disaggregate(x_coarse, h: GeoHierarchy, fine, coarse=None) -> np.ndarray:
    """Split proportional to fine-unit area."""
    ci = _coarse_for(h, np.shape(x_coarse)[-1], fine, coarse)
    return _apply(x_coarse, h.parent_map(fine, ci), aw_shares(h, fine, ci), h.levels[ci].d)


def hr_fit(train_coarse: CountFrame, train_fine: CountFrame, h: GeoHierarchy) -> RatioTable:
    """Historical shares: each fine unit's summed count over its parent's.

    The parent total is the sum of its children's totals, which equals the
    coarse frame's total whenever the two frames come from the same records.
    Parents with no history fall back to equal shares.
    """
    if not np.array_equal(train_coarse.hours, train_fine.hours):
        raise DataError("hr_fit: coarse and fine frames cover different hours")
    fine, coarse = h.level(train_fine.level), h.level(train_coarse.level)
    if train_fine.d != fine.d or train_coarse.d != coarse.d:
        raise DataError("hr_fit: frame widths do not match their levels")
    parent = h.parent_map(fine.name, coarse.name)
    child_tot = np.asarray(train_fine.counts, dtype=np.float64).sum(axis=0)
    parent_tot = np.bincount(parent, weights=child_tot, minlength=coarse.d)
    n_children = np.bincount(parent, minlength=coarse.d)
    ratio = np.where(parent_tot[parent] > 0,
                     child_tot / np.where(parent_tot[parent] > 0, parent_tot[parent], 1.0),
                     1.0 / n_children[parent])
    return RatioTable(fine.name, coarse.name, parent, ratio, coarse.d)


def hr_disaggregate(x_coarse, table: RatioTable) -> np.ndarray:
    """Apply fitted shares to unseen coarse values."""
    return _apply(x_coarse, table.parent, table.ratio, table.d_coarse)
