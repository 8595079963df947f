"""Backend selection for the ragged-row kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback is used.  Setting ``INFTRACE_PURE_PYTHON=1`` forces the fallback.
"""

import os

import numpy as np

from . import _kernels_py

if os.environ.get("INFTRACE_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"


def _rows(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _index(a):
    return np.ascontiguousarray(a, dtype=np.int_)


def scatter_add_rows(grad, index, n_rows):
    return _impl.scatter_add_rows(_rows(grad), _index(index), int(n_rows))


def segment_mean(x, offsets):
    return _impl.segment_mean(_rows(x), _index(offsets))


def segment_spread(g, offsets):
    return _impl.segment_spread(_rows(g), _index(offsets))
