"""Backend selection for the segment kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is used. Set ``IKQE_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from ikqe import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("IKQE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from ikqe import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def _prep(values, segments):
    values = np.ascontiguousarray(values, dtype=np.float64)
    segments = np.ascontiguousarray(segments, dtype=np.int64)
    if values.ndim != 2:
        raise ValueError(f"expected 2-D values, got shape {values.shape}")
    if segments.shape != (values.shape[0],):
        raise ValueError("one segment id per row is required")
    return values, segments


def segment_sum(values, segments, num_segments):
    values, segments = _prep(values, segments)
    return _impl.segment_sum(values, segments, int(num_segments))


def segment_max(values, segments, num_segments):
    values, segments = _prep(values, segments)
    return _impl.segment_max(values, segments, int(num_segments))


def segment_min(values, segments, num_segments):
    values, segments = _prep(values, segments)
    return _impl.segment_min(values, segments, int(num_segments))


def scatter_max_1d(values, segments, num_segments):
    values = np.ascontiguousarray(values, dtype=np.float64)
    segments = np.ascontiguousarray(segments, dtype=np.int64)
    return _impl.scatter_max_1d(values, segments, int(num_segments))


def use_backend(name):
    """Switch backend at runtime (``"cython"`` or ``"python"``); used by the benchmark."""
    global _impl, BACKEND
    if name == "python":
        _impl, BACKEND = _kernels_py, "python"
    elif name == "cython":
        from ikqe import _kernels as compiled

        _impl, BACKEND = compiled, "cython"
    else:
        raise ValueError(f"unknown backend {name!r}")
