"""Pure-numpy reference versions of the segment kernels.

Every function here has a compiled twin in ``_kernels.pyx`` with the same
signature and bit-identical results; ``ikqe.kernels`` picks one at import.
"""
import numpy as np


def segment_sum(values, segments, num_segments):
    """Row-wise sum of ``values`` (M, d) into ``num_segments`` buckets.

    Rows are accumulated in ascending row order so results do not depend on
    the backend.
    """
    out = np.zeros((num_segments, values.shape[1]), dtype=np.float64)
    np.add.at(out, segments, values)
    return out


def _segment_extreme(values, segments, num_segments, ufunc, init):
    m, d = values.shape
    out = np.full((num_segments, d), init, dtype=np.float64)
    ufunc.at(out, segments, values)
    # lowest row index among the rows that attain the extreme
    hit = values == out[segments]
    rows = np.where(hit, np.arange(m, dtype=np.int64)[:, None], m)
    arg = np.full((num_segments, d), m, dtype=np.int64)
    np.minimum.at(arg, segments, rows)
    empty = arg == m
    out[empty] = 0.0
    arg[empty] = -1
    return out, arg


def segment_max(values, segments, num_segments):
    """Per-segment column-wise max and the winning row (-1 for empty segments)."""
    return _segment_extreme(values, segments, num_segments, np.maximum, -np.inf)


def segment_min(values, segments, num_segments):
    """Per-segment column-wise min and the winning row (-1 for empty segments)."""
    return _segment_extreme(values, segments, num_segments, np.minimum, np.inf)


def scatter_max_1d(values, segments, num_segments):
    """``out[s] = max(0, max(values[segments == s]))``.

    Used by exact traversal, where memberships are non-negative.
    """
    out = np.zeros(num_segments, dtype=np.float64)
    np.maximum.at(out, segments, values)
    return out
