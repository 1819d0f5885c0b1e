"""Hot-loop kernels, compiled when available.

The Cython build is used unless it failed to compile or ``ERDA_PURE_PYTHON=1``
is set, in which case the numpy implementations take over. ``BACKEND`` names
the active one.
"""

import os

import numpy as np

from . import _kernels_py

if os.environ.get("ERDA_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = "cython" if _impl is not _kernels_py else "python"


def knn_indices(coords, k):
    """Indices of the k nearest points (Euclidean) for every point, self first.

    Equal distances resolve to the lower point index.
    """
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    return _impl.knn_indices(coords, int(k))


def neighbor_mean(x, nbr):
    return _impl.neighbor_mean(
        np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(nbr, dtype=np.int64)
    )


def neighbor_mean_backward(grad, nbr, n_src):
    return _impl.neighbor_mean_backward(
        np.ascontiguousarray(grad, dtype=np.float64),
        np.ascontiguousarray(nbr, dtype=np.int64),
        int(n_src),
    )


def confusion(gt, pred, K):
    return _impl.confusion(
        np.ascontiguousarray(gt, dtype=np.int64), np.ascontiguousarray(pred, dtype=np.int64), int(K)
    )
