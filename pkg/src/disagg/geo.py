"""Nested grid-cell geographies and exact aggregation operators.

Every areal unit is a union of cells of a rectangular lattice. Levels are
ordered coarse to fine and must nest strictly: each fine unit lies inside
exactly one unit of every coarser level.

Cells are numbered row-major, ``cell = row * cols + col``. A point ``(x, y)``
in meters falls in column ``floor(x / cell_size)`` and row
``floor(y / cell_size)``; intervals are half-open so boundary points belong
to the cell on their upper side.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from disagg import kernels


class HierarchyError(ValueError):
    """Raised for hierarchy descriptions that violate nesting or coverage."""


class OutOfBoundsError(ValueError):
    """Raised when a coordinate lies outside the grid bounding box."""


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Grid:
    rows: int
    cols: int
    cell_size: float  # edge length in meters

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise HierarchyError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")
        if not self.cell_size > 0:
            raise HierarchyError(f"cell_size must be positive, got {self.cell_size}")

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    @property
    def cell_area(self) -> float:
        return self.cell_size * self.cell_size

    @property
    def width(self) -> float:
        return self.cols * self.cell_size

    @property
    def height(self) -> float:
        return self.rows * self.cell_size

    def locate(self, x: float, y: float) -> int:
        """Cell index containing ``(x, y)``; raises :class:`OutOfBoundsError`."""
        if not (np.isfinite(x) and np.isfinite(y)):
            raise OutOfBoundsError(f"non-finite coordinate ({x}, {y})")
        c = int(np.floor(x / self.cell_size))
        r = int(np.floor(y / self.cell_size))
        if not (0 <= r < self.rows and 0 <= c < self.cols):
            raise OutOfBoundsError(
                f"coordinate ({x}, {y}) outside grid [0, {self.width}) x [0, {self.height})")
        return r * self.cols + c


@dataclass(frozen=True, eq=False)
class LevelSpec:
    """One geographic level: unit ids plus the unit index of every grid cell."""

    name: str
    unit_ids: tuple
    cell_unit: np.ndarray
    cell_area: float

    @property
    def d(self) -> int:
        return len(self.unit_ids)

    @cached_property
    def cell_count(self) -> np.ndarray:
        return _frozen(np.bincount(self.cell_unit, minlength=self.d), np.int64)

    @cached_property
    def unit_area(self) -> np.ndarray:
        """Area of every unit in m^2, in ``unit_ids`` order."""
        return _frozen(self.cell_count * self.cell_area, np.float64)

    @cached_property
    def _index(self) -> dict:
        return {u: i for i, u in enumerate(self.unit_ids)}

    def index(self, unit_id) -> int:
        try:
            return self._index[unit_id]
        except KeyError:
            raise KeyError(f"level {self.name!r} has no unit {unit_id!r}") from None

    def unit_cells(self, unit_id) -> np.ndarray:
        return np.flatnonzero(self.cell_unit == self.index(unit_id))


@dataclass(frozen=True)
class AggregationMatrix:
    """Binary fine-to-coarse summation operator.

    ``parent[j]`` is the coarse unit index containing fine unit ``j``;
    ``matrix[p, j] == 1`` exactly when ``parent[j] == p``.
    """

    fine_level: str
    coarse_level: str
    parent: np.ndarray
    d_coarse: int

    @property
    def d_fine(self) -> int:
        return len(self.parent)

    @cached_property
    def matrix(self) -> np.ndarray:
        m = np.zeros((self.d_coarse, self.d_fine))
        m[self.parent, np.arange(self.d_fine)] = 1.0
        m.setflags(write=False)
        return m

    @property
    def shape(self):
        return (self.d_coarse, self.d_fine)

    def __matmul__(self, other: "AggregationMatrix") -> np.ndarray:
        return self.matrix @ other.matrix


class GeoHierarchy:
    """Validated, immutable multi-level geography.

    Use :func:`build_hierarchy` to construct one from a description.
    """

    def __init__(self, grid: Grid, levels):
        self.grid = grid
        self.levels = tuple(levels)
        self._validate()
        parents = []
        for coarse, fine in zip(self.levels[:-1], self.levels[1:]):
            parent = np.empty(fine.d, dtype=np.int64)
            parent[fine.cell_unit] = coarse.cell_unit
            parents.append(_frozen(parent))
        self._parents = tuple(parents)

    def _validate(self):
        if len(self.levels) < 2:
            raise HierarchyError(f"need at least 2 levels, got {len(self.levels)}")
        names = [lv.name for lv in self.levels]
        if len(set(names)) != len(names):
            raise HierarchyError(f"duplicate level names in {names}")
        for lv in self.levels:
            if lv.cell_unit.shape != (self.grid.n_cells,):
                raise HierarchyError(f"level {lv.name!r} does not assign every grid cell")
            if np.any(lv.cell_count == 0):
                empty = [lv.unit_ids[i] for i in np.flatnonzero(lv.cell_count == 0)[:5]]
                raise HierarchyError(f"level {lv.name!r} has units with no cells: {empty}")
        for coarse, fine in zip(self.levels[:-1], self.levels[1:]):
            if not coarse.d < fine.d:
                raise HierarchyError(
                    f"unit counts must increase coarse to fine: {coarse.name}={coarse.d}, "
                    f"{fine.name}={fine.d}")
            # a fine unit nests iff all its cells share one coarse unit
            lo = np.full(fine.d, np.iinfo(np.int64).max)
            hi = np.full(fine.d, -1)
            np.minimum.at(lo, fine.cell_unit, coarse.cell_unit)
            np.maximum.at(hi, fine.cell_unit, coarse.cell_unit)
            bad = np.flatnonzero(lo != hi)
            if bad.size:
                uid = fine.unit_ids[bad[0]]
                raise HierarchyError(
                    f"non-nested membership: {fine.name} unit {uid!r} spans several "
                    f"{coarse.name} units")

    @property
    def names(self) -> list:
        return [lv.name for lv in self.levels]

    @property
    def dims(self) -> list:
        return [lv.d for lv in self.levels]

    def level_index(self, level) -> int:
        if isinstance(level, (int, np.integer)):
            if not 0 <= level < len(self.levels):
                raise KeyError(f"level index {level} out of range")
            return int(level)
        for i, lv in enumerate(self.levels):
            if lv.name == level:
                return i
        raise KeyError(f"unknown level {level!r}; have {self.names}")

    def level(self, level) -> LevelSpec:
        return self.levels[self.level_index(level)]

    def parent_map(self, fine, coarse) -> np.ndarray:
        """Coarse unit index of every fine unit, composing adjacent memberships."""
        fi, ci = self.level_index(fine), self.level_index(coarse)
        if not ci < fi:
            raise HierarchyError(
                f"{self.levels[ci].name!r} is not strictly coarser than {self.levels[fi].name!r}")
        idx = np.arange(self.levels[fi].d)
        for k in range(fi - 1, ci - 1, -1):
            idx = self._parents[k][idx]
        return idx

    def memberships(self, fine) -> dict:
        """``child id -> parent id`` for ``fine`` and the level directly above it."""
        fi = self.level_index(fine)
        if fi == 0:
            raise HierarchyError("the coarsest level has no parent level")
        up, lv = self.levels[fi - 1], self.levels[fi]
        return {lv.unit_ids[j]: up.unit_ids[p] for j, p in enumerate(self._parents[fi - 1])}

    @cached_property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([self.grid.rows, self.grid.cols, self.grid.cell_size]).encode())
        for lv in self.levels:
            h.update(json.dumps([lv.name, list(map(str, lv.unit_ids))]).encode())
            h.update(np.ascontiguousarray(lv.cell_unit, dtype="<i8").tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        levels = []
        for lv in self.levels:
            order = np.argsort(lv.cell_unit, kind="stable")
            bounds = np.concatenate([[0], np.cumsum(lv.cell_count)])
            units = [{"id": uid, "cells": order[bounds[i]:bounds[i + 1]].tolist()}
                     for i, uid in enumerate(lv.unit_ids)]
            levels.append({"name": lv.name, "units": units})
        return {
            "grid": {"rows": self.grid.rows, "cols": self.grid.cols,
                     "cell_size": self.grid.cell_size},
            "levels": levels,
        }

    def __repr__(self):
        dims = ", ".join(f"{lv.name}={lv.d}" for lv in self.levels)
        return f"GeoHierarchy({self.grid.rows}x{self.grid.cols} cells, {dims})"


def _level_from_units(name, units, grid):
    ids = [u["id"] for u in units]
    if len(set(ids)) != len(ids):
        raise HierarchyError(f"level {name!r} has duplicate unit ids")
    cell_unit = np.full(grid.n_cells, -1, dtype=np.int64)
    for i, u in enumerate(units):
        cells = np.asarray(u["cells"], dtype=np.int64)
        if cells.size == 0:
            raise HierarchyError(f"level {name!r} unit {u['id']!r} has no cells")
        if cells.min() < 0 or cells.max() >= grid.n_cells:
            raise HierarchyError(f"level {name!r} unit {u['id']!r} references cells off the grid")
        if np.unique(cells).size != cells.size or np.any(cell_unit[cells] >= 0):
            raise HierarchyError(f"level {name!r}: doubly-covered cell in unit {u['id']!r}")
        cell_unit[cells] = i
    if np.any(cell_unit < 0):
        raise HierarchyError(
            f"level {name!r}: uncovered cells, e.g. {np.flatnonzero(cell_unit < 0)[:5].tolist()}")
    return LevelSpec(name, tuple(ids), _frozen(cell_unit), grid.cell_area)


def _pair(f):
    if isinstance(f, (list, tuple)):
        fr, fc = f
    else:
        fr = fc = f
    if int(fr) < 1 or int(fc) < 1:
        raise HierarchyError(f"subdivision factors must be >= 1, got {f}")
    return int(fr), int(fc)


def _cuts(lo, hi, f, jitter, rng, min_seg=1):
    """Split ``[lo, hi)`` into ``f`` integer segments of at least ``min_seg`` cells."""
    s = hi - lo
    if s < f * min_seg:
        raise HierarchyError(f"cannot split a span of {s} cells into {f} parts of {min_seg}")
    edges = [lo + (s * i) // f for i in range(f + 1)]
    if jitter > 0 and rng is not None:
        amp = int(jitter * s / (2 * f))
        for i in range(1, f):
            if amp:
                cand = edges[i] + int(rng.integers(-amp, amp + 1))
                edges[i] = min(max(cand, edges[i - 1] + min_seg), hi - (f - i) * min_seg)
    return edges


def subdivision_levels(grid: Grid, factors, names=None, jitter=0.0, seed=0):
    """Cell assignments for recursive rectangular subdivision.

    Level 0 splits the grid into ``factors[0]`` blocks per axis, and each
    further level splits every parent rectangle by its own factor. With
    ``jitter > 0`` the cut lines are displaced by up to ``jitter`` times half
    the nominal child size, giving unequal areas.
    """
    rng = np.random.default_rng(seed) if jitter > 0 else None
    names = list(names) if names is not None else [f"L{i}" for i in range(len(factors))]
    if len(names) != len(factors):
        raise HierarchyError("need one level name per subdivision factor")
    pairs = [_pair(f) for f in factors]
    rects = [(0, grid.rows, 0, grid.cols)]
    levels = []
    for k, (name, (fr, fc)) in enumerate(zip(names, pairs)):
        # leave room for every later split along each axis
        min_r = int(np.prod([p[0] for p in pairs[k + 1:]], dtype=np.int64))
        min_c = int(np.prod([p[1] for p in pairs[k + 1:]], dtype=np.int64))
        children = []
        for r0, r1, c0, c1 in rects:
            re = _cuts(r0, r1, fr, jitter, rng, min_r)
            ce = _cuts(c0, c1, fc, jitter, rng, min_c)
            for i in range(fr):
                for j in range(fc):
                    children.append((re[i], re[i + 1], ce[j], ce[j + 1]))
        cell_unit = np.empty((grid.rows, grid.cols), dtype=np.int64)
        for k, (r0, r1, c0, c1) in enumerate(children):
            cell_unit[r0:r1, c0:c1] = k
        levels.append(LevelSpec(name, tuple(str(k) for k in range(len(children))),
                                _frozen(cell_unit.ravel()), grid.cell_area))
        rects = children
    return levels


def build_hierarchy(spec: dict) -> GeoHierarchy:
    """Validate a hierarchy description and build the hierarchy.

    ``spec`` is the parsed JSON description: a ``grid`` block with ``rows``,
    ``cols`` and ``cell_size`` plus either ``levels`` (each with ``name``
    and ``units``, a unit being ``{"id", "cells"}``) or ``subdivision``
    (per-level factors, optional ``names``, ``jitter`` and ``seed``).
    """
    try:
        g = spec["grid"]
        grid = Grid(int(g["rows"]), int(g["cols"]), float(g["cell_size"]))
    except (KeyError, TypeError) as exc:
        raise HierarchyError(f"missing or malformed grid block: {exc}") from None
    if "levels" in spec:
        levels = [_level_from_units(lv["name"], lv["units"], grid) for lv in spec["levels"]]
    elif "subdivision" in spec:
        levels = subdivision_levels(grid, spec["subdivision"], spec.get("names"),
                                    float(spec.get("jitter", 0.0)), int(spec.get("seed", 0)))
    else:
        raise HierarchyError("description needs either 'levels' or 'subdivision'")
    return GeoHierarchy(grid, levels)


def load_hierarchy(path) -> GeoHierarchy:
    with open(path, encoding="utf-8") as fh:
        return build_hierarchy(json.load(fh))


def save_hierarchy(h: GeoHierarchy, path) -> None:
    Path(path).write_text(json.dumps(h.to_dict(), separators=(",", ":")), encoding="utf-8")


def aggregation_matrix(h: GeoHierarchy, fine, coarse) -> AggregationMatrix:
    parent = _frozen(h.parent_map(fine, coarse), np.int64)
    return AggregationMatrix(h.level(fine).name, h.level(coarse).name, parent, h.level(coarse).d)


def aggregate(x, M: AggregationMatrix) -> np.ndarray:
    """Sum fine-level counts into their coarse parents.

    Accepts one vector of length ``d_fine`` or an ``(N, d_fine)`` matrix.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.ndim != 2 or x2.shape[1] != M.d_fine:
        raise ValueError(f"expected trailing dimension {M.d_fine}, got shape {x.shape}")
    y = kernels.segment_sum(np.ascontiguousarray(x2), M.parent, M.d_coarse)
    return y[0] if squeeze else y


def assign_point(h: GeoHierarchy, x: float, y: float) -> dict:
    """Unit id containing ``(x, y)`` at every level."""
    cell = h.grid.locate(x, y)
    return {lv.name: lv.unit_ids[lv.cell_unit[cell]] for lv in h.levels}
