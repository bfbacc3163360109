"""Numpy implementations of the kernels in ``_ckernels.pyx``.

Same signatures and results; used when the extension is not built or when
``DISAGG_PURE_PYTHON`` is set.
"""

import numpy as np


def bin_records(ts, x, y, hour0, n_hours, cell_size, rows, cols, cell_unit, d):
    ts = np.asarray(ts, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        hour = np.floor(ts / 3600.0) - hour0
        in_window = np.isfinite(ts) & (hour >= 0) & (hour < n_hours)
        fx = np.floor(x / cell_size)
        fy = np.floor(y / cell_size)
        in_grid = (np.isfinite(fx) & np.isfinite(fy)
                   & (fx >= 0) & (fy >= 0) & (fx < cols) & (fy < rows))
    n_window = int(np.count_nonzero(~in_window))
    keep = in_window & in_grid
    n_oob = int(np.count_nonzero(in_window & ~in_grid))
    cell = fy[keep].astype(np.int64) * cols + fx[keep].astype(np.int64)
    unit = np.asarray(cell_unit, dtype=np.int64)[cell]
    flat = hour[keep].astype(np.int64) * d + unit
    counts = np.bincount(flat, minlength=n_hours * d).reshape(n_hours, d)
    return counts.astype(np.int64), n_oob, n_window


def segment_sum(values, parent, d_coarse):
    values = np.asarray(values, dtype=np.float64)
    out = np.zeros((values.shape[0], d_coarse))
    np.add.at(out.T, np.asarray(parent, dtype=np.int64), values.T)
    return out


def scatter_shares(coarse, parent, share):
    coarse = np.asarray(coarse, dtype=np.float64)
    return coarse[:, np.asarray(parent, dtype=np.int64)] * np.asarray(share, dtype=np.float64)


def adam_update(p, g, m, v, lr, b1, b2, bc1, bc2, eps):
    if not np.all(np.isfinite(g)):
        return None
    m *= b1
    m += (1 - b1) * g
    v *= b2
    v += (1 - b2) * (g * g)
    denom = np.sqrt(v * (1.0 / bc2))
    denom += eps
    num = (lr / bc1) * m
    num /= denom
    return p - num
