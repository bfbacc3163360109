"""Hot-loop kernels with a compiled backend and a numpy fallback.

The backend is chosen once at import time. Set ``DISAGG_PURE_PYTHON=1`` to
force the numpy path (useful for benchmarking and for platforms without a
C compiler).
"""

import os

from disagg import _pykernels

if os.environ.get("DISAGG_PURE_PYTHON"):
    _impl = _pykernels
else:
    try:
        from disagg import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

bin_records = _impl.bin_records
segment_sum = _impl.segment_sum
scatter_shares = _impl.scatter_shares
adam_update = _impl.adam_update

__all__ = ["BACKEND", "adam_update", "bin_records", "segment_sum", "scatter_shares"]
