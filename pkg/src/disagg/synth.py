"""Synthetic cities: Gaussian hotspots with a daily cycle, Poisson-sampled.

Expected records per cell and hour::

    rate(cell, t) = background
                    + sum_k amp_k * exp(-|p - c_k|^2 / (2 s_k^2))
                            * (1 + A * sin(2 pi (t - phase_k) / 24))

where ``p`` is the cell center, ``A`` the daily amplitude and ``phase_k``
the hotspot's own phase (defaulting to the global one). Counts are drawn
per cell and hour from a seeded Poisson sampler and each record is placed
uniformly inside its cell and hour.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from disagg.data import HourWindow, Records, ingest_points, to_hour
from disagg.geo import GeoHierarchy, build_hierarchy

_CHUNK_HOURS = 48


@dataclass(frozen=True)
class Hotspot:
    center: tuple  # meters
    scale: float  # meters
    amplitude: float  # expected records per cell-hour at the peak
    phase: float | None = None  # hours


@dataclass(frozen=True)
class SynthConfig:
    rows: int = 128
    cols: int = 128
    cell_size: float = 50.0
    subdivision: tuple = (2, 2, 2, 2, 2)
    level_names: tuple = ("PUMA", "NTA", "TRACT", "BLOCK", "EXTREME")
    jitter: float = 0.5
    hotspots: tuple = ()
    background: float = 0.0
    daily_amplitude: float = 0.5
    daily_phase: float = 0.0
    hours: int = 720
    start: str = "2016-01-01T00:00:00"
    seed: int = 0
    hierarchy_seed: int = 0

    def __post_init__(self):
        errors = []
        if self.hours < 24:
            errors.append(f"hours: need at least 24, got {self.hours}")
        if not 0 <= self.daily_amplitude <= 1:
            errors.append(f"daily_amplitude: must lie in [0, 1], got {self.daily_amplitude}")
        if self.background < 0:
            errors.append(f"background: must be >= 0, got {self.background}")
        for i, hs in enumerate(self.hotspots):
            if hs.amplitude < 0:
                errors.append(f"hotspots[{i}].amplitude: must be >= 0, got {hs.amplitude}")
            if not hs.scale > 0:
                errors.append(f"hotspots[{i}].scale: must be > 0, got {hs.scale}")
        if len(self.level_names) != len(self.subdivision):
            errors.append("level_names: need one name per subdivision factor")
        if errors:
            raise ValueError("invalid synth config: " + "; ".join(errors))

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"invalid synth config: unknown fields {sorted(unknown)}")
        try:
            hotspots = tuple(Hotspot(tuple(h["center"]), float(h["scale"]), float(h["amplitude"]),
                                     h.get("phase")) for h in d.pop("hotspots", ()))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"invalid synth config: hotspots: {exc}") from None
        for key in ("subdivision", "level_names"):
            if key in d:
                d[key] = tuple(tuple(v) if isinstance(v, list) else v for v in d[key])
        return cls(hotspots=hotspots, **d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hotspots"] = [asdict(h) for h in self.hotspots]
        return d

    @property
    def window(self) -> HourWindow:
        h0 = to_hour(self.start)
        return HourWindow(h0, h0 + self.hours)

    def hierarchy(self) -> GeoHierarchy:
        return build_hierarchy({
            "grid": {"rows": self.rows, "cols": self.cols, "cell_size": self.cell_size},
            "subdivision": [list(f) if isinstance(f, tuple) else f for f in self.subdivision],
            "names": list(self.level_names), "jitter": self.jitter, "seed": self.hierarchy_seed,
        })


def default_config(seed: int = 0, hours: int = 720) -> SynthConfig:
    """Desk-scale stand-in city: 5 levels, d = [4, 16, 64, 256, 1024]."""
    w = 128 * 50.0
    hotspots = (
        Hotspot((0.45 * w, 0.55 * w), 0.10 * w, 0.6, 8.0),   # downtown, morning peak
        Hotspot((0.30 * w, 0.25 * w), 0.06 * w, 0.8, 18.0),  # nightlife, evening peak
        Hotspot((0.75 * w, 0.70 * w), 0.08 * w, 0.4, 12.0),
        Hotspot((0.80 * w, 0.20 * w), 0.05 * w, 0.6, 3.0),
        Hotspot((0.15 * w, 0.80 * w), 0.12 * w, 0.12, 14.0),
    )
    return SynthConfig(hotspots=hotspots, background=0.001, hours=hours, seed=seed)


def intensity(cfg: SynthConfig, hours: np.ndarray) -> np.ndarray:
    """Expected counts, shape ``(len(hours), rows * cols)``; hours relative to start."""
    r, c = np.divmod(np.arange(cfg.rows * cfg.cols), cfg.cols)
    px = (c + 0.5) * cfg.cell_size
    py = (r + 0.5) * cfg.cell_size
    t = np.asarray(hours, dtype=np.float64)[:, None]
    lam = np.full((len(t), len(px)), float(cfg.background))
    for hs in cfg.hotspots:
        phase = cfg.daily_phase if hs.phase is None else hs.phase
        g = hs.amplitude * np.exp(-((px - hs.center[0]) ** 2 + (py - hs.center[1]) ** 2)
                                  / (2.0 * hs.scale ** 2))
        lam += g[None, :] * (1.0 + cfg.daily_amplitude * np.sin(2 * np.pi * (t - phase) / 24.0))
    return lam


def _inside(lo_idx, frac, size):
    """``(lo_idx + frac) * size`` nudged down so it floors back to ``lo_idx``."""
    v = (lo_idx + frac) * size
    bad = np.floor(v / size) != lo_idx
    while np.any(bad):
        v[bad] = np.nextafter(v[bad], -np.inf)
        bad = np.floor(v / size) != lo_idx
    return v


def synth_generate(cfg: SynthConfig):
    """Sample a record stream and its ground-truth frames.

    Returns ``(records, hierarchy, frames)``; ``frames`` is exactly what
    :func:`~disagg.data.ingest_points` yields on ``records``.
    """
    h = cfg.hierarchy()
    window = cfg.window
    rng = np.random.default_rng(cfg.seed)
    ts_parts, x_parts, y_parts = [], [], []
    for a in range(0, cfg.hours, _CHUNK_HOURS):
        hrs = np.arange(a, min(a + _CHUNK_HOURS, cfg.hours))
        counts = rng.poisson(intensity(cfg, hrs))
        flat = counts.ravel()
        idx = np.repeat(np.arange(flat.size), flat)
        hour_rel = hrs[idx // counts.shape[1]]
        cell = idx % counts.shape[1]
        row, col = np.divmod(cell, cfg.cols)
        u = rng.random((3, idx.size))
        x_parts.append(_inside(col, u[0], cfg.cell_size))
        y_parts.append(_inside(row, u[1], cfg.cell_size))
        ts_parts.append(_inside(window.start + hour_rel, u[2], 3600.0))
    records = Records(np.concatenate(ts_parts) if ts_parts else np.empty(0),
                      np.concatenate(x_parts) if x_parts else np.empty(0),
                      np.concatenate(y_parts) if y_parts else np.empty(0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # zero-intensity configs legitimately emit nothing
        frames, _ = ingest_points(records, h, window)
    return records, h, frames


def load_config(path) -> SynthConfig:
    with open(path, encoding="utf-8") as fh:
        return SynthConfig.from_dict(json.load(fh))
