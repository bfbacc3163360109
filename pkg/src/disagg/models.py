"""FNN and LSTM disaggregators, plain or with chain-of-training heads.

In chain-of-training (COT) form the hidden layers of the dense head have
exactly as many units as the geographic levels between source and target,
and their post-ReLU activations double as predictions for those levels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from disagg import autodiff as ad
from disagg.autodiff import Tensor
from disagg.data import CountFrame
from disagg.geo import GeoHierarchy

FAMILIES = ("FNN", "LSTM")


class ModelSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    family: str
    source: str
    target: str
    cot: bool = False
    hidden: tuple = (64, 256)  # plain-mode head widths
    lstm_hidden: int = 128
    window: int = 5  # LSTM sequence length T
    input_scale: float = 1.0  # multiplies raw counts before the first layer

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelSpecError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.family == "LSTM" and self.window < 1:
            raise ModelSpecError(f"LSTM window must be >= 1, got {self.window}")
        if any(int(w) < 1 for w in self.hidden):
            raise ModelSpecError(f"hidden widths must be positive, got {self.hidden}")
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))

    @property
    def T(self) -> int:
        return self.window if self.family == "LSTM" else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{**d, "hidden": tuple(d.get("hidden", (64, 256)))})


def intermediate_levels(h: GeoHierarchy, source, target) -> list:
    si, ti = h.level_index(source), h.level_index(target)
    if not si < ti:
        raise ModelSpecError(f"source {source!r} must be coarser than target {target!r}")
    return [lv.name for lv in h.levels[si + 1:ti]]


class Disaggregator:
    """Initialized model; ``forward`` maps a batch to per-level predictions."""

    def __init__(self, spec: ModelSpec, h: GeoHierarchy, seed: int = 0):
        self.spec = spec
        self.seed = seed
        self.hierarchy_digest = h.digest
        self.intermediates = intermediate_levels(h, spec.source, spec.target) if spec.cot else []
        self.d_source = h.level(spec.source).d
        self.d_target = h.level(spec.target).d
        # COT without intermediates (adjacent levels) collapses to the plain head
        if self.intermediates:
            head_out = [h.level(n).d for n in self.intermediates]
            self.head_levels = self.intermediates + [spec.target]
        else:
            head_out = list(spec.hidden)
            self.head_levels = [None] * len(spec.hidden) + [spec.target]
        head_in = spec.lstm_hidden if spec.family == "LSTM" else self.d_source
        self.widths = [head_in] + head_out + [self.d_target]

        rng = np.random.default_rng(seed)
        self.params = {}
        if spec.family == "LSTM":
            H = spec.lstm_hidden
            fan_in = self.d_source + H
            self._init("lstm_W", (fan_in, 4 * H), fan_in, rng)
            self._init("lstm_b", (4 * H,), fan_in, rng)
        for k, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            self._init(f"W{k}", (a, b), a, rng)
            self._init(f"b{k}", (b,), a, rng)

    def _init(self, name, shape, fan_in, rng):
        bound = 1.0 / np.sqrt(fan_in)
        self.params[name] = Tensor(rng.uniform(-bound, bound, shape), requires_grad=True,
                                   name=name)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def descriptor(self) -> dict:
        return {"spec": self.spec.to_dict(), "seed": self.seed, "widths": self.widths,
                "intermediates": self.intermediates, "hierarchy": self.hierarchy_digest}

    def exposed_widths(self) -> dict:
        """Width of every level-labelled activation (COT intermediates and target)."""
        return {lv: w for lv, w in zip(self.head_levels, self.widths[1:]) if lv is not None}

    def get_state(self) -> dict:
        return {k: p.data for k, p in self.params.items()}

    def set_state(self, state: dict) -> None:
        for k, p in self.params.items():
            p.assign(state[k])

    def forward(self, x) -> dict:
        """Predictions keyed by level name.

        ``x`` is ``(B, d_source)`` for an FNN and ``(B, T, d_source)`` for an
        LSTM (a ``(B, 1, d_source)`` window is also accepted by the FNN).
        """
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if self.spec.family == "FNN":
            if x.ndim == 3 and x.shape[1] == 1:
                x = x[:, 0, :]
            if x.ndim != 2 or x.shape[1] != self.d_source:
                raise ValueError(f"FNN expects (batch, {self.d_source}) input, got {x.shape}")
            z = Tensor(x * self.spec.input_scale)
        else:
            T = self.spec.window
            if x.ndim != 3 or x.shape[1:] != (T, self.d_source):
                raise ValueError(f"LSTM expects (batch, {T}, {self.d_source}) input, got {x.shape}")
            B, H = x.shape[0], self.spec.lstm_hidden
            h = c = Tensor(np.zeros((B, H)))
            xs = x * self.spec.input_scale
            for t in range(T):
                h, c = ad.lstm_cell(xs[:, t, :], h, c, self.params["lstm_W"], self.params["lstm_b"])
            z = h
        out = {}
        for k in range(self.n_layers):
            z = ad.add_bias(ad.matmul(z, self.params[f"W{k}"]), self.params[f"b{k}"])
            if k < self.n_layers - 1:
                z = ad.relu(z)
            level = self.head_levels[k]
            if level is not None:
                out[level] = z
        return out

    __call__ = forward


def build_model(spec: ModelSpec, h: GeoHierarchy, seed: int = 0) -> Disaggregator:
    h.level(spec.source), h.level(spec.target)  # unknown names raise KeyError
    intermediate_levels(h, spec.source, spec.target)
    return Disaggregator(spec, h, seed)


# ----------------------------------------------------------------- batching

@dataclass
class Batch:
    rows: np.ndarray  # label row indices within the split
    x: np.ndarray  # (B, T, d_source)
    y: dict = field(default_factory=dict)  # level -> (B, d_level)


def label_rows(n_rows: int, T: int) -> np.ndarray:
    """Rows usable as labels: each needs T - 1 preceding rows of context."""
    if n_rows < T:
        raise ValueError(f"split has {n_rows} rows, fewer than the window T={T}")
    return np.arange(T - 1, n_rows)


def windows(source: np.ndarray, rows: np.ndarray, T: int) -> np.ndarray:
    """``(len(rows), T, d)`` stack of the T source rows ending at each label row."""
    offs = np.arange(-T + 1, 1)
    return np.asarray(source, dtype=np.float64)[rows[:, None] + offs[None, :]]


def window_batches(source: CountFrame, targets: dict, T: int, batch_size: int,
                   seed: int, epoch: int = 0, shuffle: bool = True):
    """Mini-batches of (T-hour source window, targets at the window's last hour).

    The order is a seeded permutation that depends on ``(seed, epoch)`` only.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rows = label_rows(source.n_hours, T)
    if shuffle:
        rows = np.random.default_rng([seed, epoch]).permutation(rows)
    src = np.asarray(source.counts, dtype=np.float64)
    tgt = {lv: np.asarray(f.counts, dtype=np.float64) for lv, f in targets.items()}
    for a in range(0, len(rows), batch_size):
        r = rows[a:a + batch_size]
        yield Batch(r, windows(src, r, T), {lv: y[r] for lv, y in tgt.items()})
