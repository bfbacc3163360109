"""Multi-level objectives, mini-batch training with early stopping, and MAE.

Loss terms per level of a task (source, intermediates, target):

* prediction term -- L1 between a predicted level and its truth (target
  always; intermediates under chain-of-training);
* reconstruction term -- L1 between a coarser level's truth and the
  re-aggregation of finer predictions (Full, Bridge or BottomUp).

A level's terms are scaled by that level's weight and summed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from disagg import autodiff as ad
from disagg.autodiff import Tape, Tensor, backward, no_grad
from disagg.data import CountFrame, SplitSet
from disagg.geo import GeoHierarchy, aggregation_matrix
from disagg.models import Disaggregator, label_rows, window_batches, windows
from disagg.optim import Adam, TrainingError

REC_SCHEMES = ("none", "full", "bridge", "bottomup")


@dataclass(frozen=True)
class LossScheme:
    cot: bool = False
    rec: str = "none"
    weighted: bool = True

    def __post_init__(self):
        rec = self.rec.lower()
        if rec not in REC_SCHEMES:
            raise ValueError(f"rec must be one of {REC_SCHEMES}, got {self.rec!r}")
        if rec != "none" and not self.cot:
            raise ValueError("reconstruction loss is only defined together with COT")
        object.__setattr__(self, "rec", rec)

    @property
    def label(self) -> str:
        if not self.cot:
            return "plain"
        return "cot" if self.rec == "none" else f"cot+rec-{self.rec}"

    @classmethod
    def parse(cls, label: str, weighted: bool = True) -> "LossScheme":
        label = label.lower().replace(" ", "")
        if label == "plain":
            return cls(False, "none", weighted)
        if label == "cot":
            return cls(True, "none", weighted)
        if label.startswith("cot+rec-"):
            return cls(True, label[len("cot+rec-"):], weighted)
        raise ValueError(f"unknown scheme {label!r}; use plain, cot or cot+rec-<full|bridge|bottomup>")


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-4
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


def level_weights(dims, weighted: bool = True) -> np.ndarray:
    """Per-level loss weights, inversely proportional to unit count.

    ``alpha_l = (1/d_l) / sum_k (1/d_k)``; unweighted mode gives ``1/L``.
    """
    dims = np.asarray(dims, dtype=np.float64)
    if dims.size == 0 or np.any(dims <= 0):
        raise ValueError(f"level dimensions must be positive, got {dims.tolist()}")
    if not weighted:
        return np.full(dims.size, 1.0 / dims.size)
    inv = 1.0 / dims
    return inv / inv.sum()


def task_levels(h: GeoHierarchy, source, target) -> list:
    si, ti = h.level_index(source), h.level_index(target)
    return [lv.name for lv in h.levels[si:ti + 1]]


def loss_levels(h: GeoHierarchy, source, target, scheme: LossScheme) -> dict:
    """Which terms each level carries under ``scheme``: level -> set of 'pred'/'rec'."""
    levels = task_levels(h, source, target)
    terms = {lv: set() for lv in levels}
    terms[levels[-1]].add("pred")
    if scheme.cot:
        for lv in levels[1:-1]:
            terms[lv].add("pred")
    if scheme.rec != "none":
        for lv in levels[:-1]:
            terms[lv].add("rec")
    return {lv: t for lv, t in terms.items() if t}


def scheme_weights(h: GeoHierarchy, source, target, scheme: LossScheme) -> dict:
    levels = list(loss_levels(h, source, target, scheme))
    alpha = level_weights([h.level(lv).d for lv in levels], scheme.weighted)
    return dict(zip(levels, alpha.tolist()))


def _agg_op(h, fine, coarse):
    # constant (d_fine, d_coarse) operator applied on the right of row batches
    return Tensor(aggregation_matrix(h, fine, coarse).matrix.T)


def reconstruct(predictions: dict, h: GeoHierarchy, scheme: str, source=None) -> dict:
    """Re-aggregate predicted levels onto every coarser task level.

    ``predictions`` maps level names to ``(B, d)`` tensors or arrays. The
    levels reconstructed run from ``source`` (default: one level above the
    coarsest prediction) down to just above the finest prediction.

    * full -- average of the aggregations of every strictly finer predicted level
    * bridge -- aggregation of the nearest finer predicted level only
    * bottomup -- aggregation of the finest predicted level only
    """
    scheme = scheme.lower()
    if scheme not in REC_SCHEMES[1:]:
        raise ValueError(f"unknown reconstruction scheme {scheme!r}")
    if not predictions:
        raise ValueError("reconstruct needs at least one predicted level")
    pred_idx = sorted(h.level_index(lv) for lv in predictions)
    names = {h.level_index(lv): lv for lv in predictions}
    lo = pred_idx[0] - 1 if source is None else h.level_index(source)
    if lo < 0:
        raise ValueError("nothing coarser than the predicted levels to reconstruct")
    out = {}
    for ci in range(lo, pred_idx[-1]):
        finer = [p for p in pred_idx if p > ci]
        if scheme == "bridge":
            finer = finer[:1]
        elif scheme == "bottomup":
            finer = finer[-1:]
        c_name = h.levels[ci].name
        parts = [ad.matmul(ad.as_tensor(predictions[names[p]]), _agg_op(h, names[p], c_name))
                 for p in finer]
        total = parts[0]
        for part in parts[1:]:
            total = ad.add(total, part)
        out[c_name] = total if len(parts) == 1 else ad.scalar_mul(total, 1.0 / len(parts))
    return out


def compose_loss(predictions: dict, reconstructions: dict, truths: dict,
                 scheme: LossScheme, weights: dict):
    """Weighted sum of per-level L1 terms.

    Returns ``(total, breakdown)``; ``breakdown`` maps ``"pred:<level>"`` and
    ``"rec:<level>"`` to the weighted value of each term, so the values sum
    to the total.
    """
    target = list(predictions)[-1]
    pred_levels = list(predictions) if scheme.cot else [target]
    rec_levels = list(reconstructions) if scheme.rec != "none" else []
    names, terms, alphas = [], [], []
    for kind, levels, source in (("pred", pred_levels, predictions),
                                 ("rec", rec_levels, reconstructions)):
        for lv in levels:
            if lv not in truths:
                raise KeyError(f"no truth frame for level {lv!r}")
            if lv not in weights:
                raise KeyError(f"no loss weight for level {lv!r}")
            names.append(f"{kind}:{lv}")
            terms.append(ad.l1_loss(source[lv], truths[lv]))
            alphas.append(weights[lv])
    total = ad.weighted_sum(terms, alphas)
    breakdown = {n: a * float(t.data) for n, t, a in zip(names, terms, alphas)}
    return total, breakdown


# ------------------------------------------------------------------ training

@dataclass
class TrainResult:
    model: Disaggregator
    history: list  # (epoch, train_loss, val_loss)
    best_epoch: int
    epochs_run: int
    best_val: float


def _split_inputs(model, split: dict, context: dict | None, levels):
    """Windows and truths for every usable row of a split, optionally with
    the previous split's tail as LSTM context."""
    T = model.spec.T
    src = np.asarray(split[model.spec.source].counts, dtype=np.float64)
    pad = 0
    if T > 1 and context is not None:
        ctx = np.asarray(context[model.spec.source].counts, dtype=np.float64)[-(T - 1):]
        pad = len(ctx)
        src = np.vstack([ctx, src])
    rows = label_rows(len(src), T)
    rows = rows[rows >= pad]
    x = windows(src, rows, T)
    y = {lv: np.asarray(split[lv].counts, dtype=np.float64)[rows - pad] for lv in levels}
    return x, y, rows - pad


def _loss_on(model, h, scheme, weights, x, y):
    preds = model(x)
    recs = (reconstruct(preds, h, scheme.rec, model.spec.source)
            if scheme.rec != "none" else {})
    return compose_loss(preds, recs, y, scheme, weights)


def train(model: Disaggregator, splits: SplitSet, h: GeoHierarchy, scheme: LossScheme,
          cfg: TrainConfig) -> TrainResult:
    """Mini-batch Adam with early stopping on the validation objective.

    The validation loss is the same composed objective as training. The
    returned model carries the parameters of the best validation epoch.
    """
    spec = model.spec
    if scheme.cot != model.spec.cot:
        raise ValueError(f"scheme {scheme.label!r} does not match model (cot={model.spec.cot})")
    weights = scheme_weights(h, spec.source, spec.target, scheme)
    levels = list(dict.fromkeys([spec.source, *weights]))
    for name in ("train", "val"):
        missing = [lv for lv in levels if lv not in splits[name]]
        if missing:
            raise KeyError(f"{name} split lacks levels {missing}")
    train_split = splits.train
    if train_split[spec.source].n_hours < spec.T:
        raise ValueError("training split is shorter than the model window")
    opt = Adam(model.params, lr=cfg.lr)
    xv, yv, _ = _split_inputs(model, splits.val, splits.train, levels)

    history = []
    best_val, best_epoch, best_state, stale = math.inf, 0, model.get_state(), 0
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        tot, n = 0.0, 0
        batches = window_batches(train_split[spec.source], {lv: train_split[lv] for lv in levels},
                                 spec.T, cfg.batch_size, cfg.seed, epoch)
        for step, batch in enumerate(batches):
            opt.zero_grad()
            with Tape():
                loss, _ = _loss_on(model, h, scheme, weights, batch.x, batch.y)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
                backward(loss)
            try:
                opt.step()
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, step {step}: {exc}") from None
            tot += value * len(batch.rows)
            n += len(batch.rows)
        with no_grad():
            val, _ = _loss_on(model, h, scheme, weights, xv, yv)
        val = float(val.data)
        if not math.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.append((epoch, tot / n, val))
        if val < best_val:
            best_val, best_epoch, best_state, stale = val, epoch, model.get_state(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.set_state(best_state)
    return TrainResult(model, history, best_epoch, epoch, best_val)


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    mae_raw: float
    mae_per_area: float
    level: str
    n_rows: int
    loss_terms: dict = field(default_factory=dict)
    epochs_run: int = 0
    best_epoch: int = 0


def mae(pred, truth, areas, clamp: bool = True):
    """Raw MAE and area-normalized MAE (abs error divided by unit area)."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.shape[-1] != len(areas):
        raise ValueError(f"{len(areas)} unit areas for {pred.shape[-1]} units")
    if clamp:
        pred = np.maximum(pred, 0.0)
    err = np.abs(pred - truth)
    return float(err.mean()), float((err / np.asarray(areas, dtype=np.float64)).mean())


def predict(model: Disaggregator, split: dict, context: dict | None = None):
    """Target-level predictions for every labelled row of ``split``.

    Returns ``(rows, predictions)``; with ``context`` (the previous split)
    an LSTM gets its first windows from that split's tail, so every row
    is labelled.
    """
    x, _, rows = _split_inputs(model, split, context, [])
    with no_grad():
        out = model(x)
    return rows, out[model.spec.target].numpy()


def evaluate(pred, truth: CountFrame, h: GeoHierarchy, rows=None, clamp: bool = True,
             **extra) -> EvalReport:
    """MAE of ``pred`` against ``truth``; ``rows`` selects truth rows when
    the prediction covers only part of the split."""
    t = np.asarray(truth.counts, dtype=np.float64)
    if rows is not None:
        t = t[rows]
    raw, per_area = mae(pred, t, h.level(truth.level).unit_area, clamp)
    return EvalReport(raw, per_area, truth.level, len(t), **extra)
