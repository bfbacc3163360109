"""Adaptive-moment (Adam) optimizer and parameter checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from disagg import kernels
from disagg.autodiff import Tensor


class TrainingError(RuntimeError):
    """Numerical failure during training (NaN/inf loss or gradient)."""


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict, grads: dict, state: OptimizerState) -> dict:
    """One bias-corrected Adam update; returns the new parameter arrays.

    ``params`` and ``grads`` map names to arrays. A missing gradient counts
    as zero. Raises :class:`TrainingError` on non-finite gradients.
    """
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1, bc2 = 1 - b1 ** t, 1 - b2 ** t
    new = {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, param {p.shape}")
        if name not in state.m:
            state.m[name], state.v[name] = np.zeros(p.size), np.zeros(p.size)
        out = kernels.adam_update(np.ascontiguousarray(p).ravel(), np.ascontiguousarray(g).ravel(),
                                  state.m[name], state.v[name], state.lr, b1, b2, bc1, bc2,
                                  state.eps)
        if out is None:
            raise TrainingError(f"non-finite gradient for {name!r} at optimizer step {t}")
        new[name] = out.reshape(p.shape)
    state.step = t
    return new


class Adam:
    def __init__(self, params: dict, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.state = OptimizerState(lr, betas[0], betas[1], eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        new = optimizer_step({k: p.data for k, p in self.params.items()},
                             {k: p.grad for k, p in self.params.items()}, self.state)
        for k, p in self.params.items():
            p.assign(new[k], copy=False)


def save_checkpoint(path, params: dict, descriptor: dict, hierarchy_digest: str) -> None:
    """JSON manifest: architecture descriptor, hierarchy hash, row-major values."""
    doc = {
        "descriptor": descriptor,
        "hierarchy": hierarchy_digest,
        "params": [{"name": k, "shape": list(p.shape), "values": p.data.ravel().tolist()}
                   for k, p in params.items()],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path, params: dict | None = None, hierarchy_digest: str | None = None):
    """Read a checkpoint; when ``params`` is given, load values into it in place.

    Returns ``(descriptor, arrays)``.
    """
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if hierarchy_digest is not None and doc["hierarchy"] != hierarchy_digest:
        raise ValueError(f"{path}: checkpoint was trained on a different hierarchy")
    arrays = {e["name"]: np.array(e["values"], dtype=np.float64).reshape(e["shape"])
              for e in doc["params"]}
    if params is not None:
        if set(arrays) != set(params):
            raise ValueError(f"{path}: parameter names differ from the model's")
        for k, p in params.items():
            if arrays[k].shape != p.shape:
                raise ValueError(f"{path}: {k!r} has shape {arrays[k].shape}, model expects {p.shape}")
        for k, p in params.items():
            p.assign(arrays[k])
    return doc["descriptor"], arrays
