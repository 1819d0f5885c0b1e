"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np

_ROW_CHUNK = 512


def knn_indices(coords, k):
    n = coords.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, _ROW_CHUNK):
        rows = np.arange(start, min(start + _ROW_CHUNK, n))
        diff = coords[None, :, :] - coords[rows, None, :]
        d = np.zeros((rows.size, n))
        for c in range(coords.shape[1]):
            d = d + diff[:, :, c] * diff[:, :, c]
        d[np.arange(rows.size), rows] = -1.0
        # stable sort: equal distances keep ascending index order
        out[rows] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def neighbor_mean(x, nbr):
    return x[nbr].sum(axis=1) / nbr.shape[1]


def neighbor_mean_backward(grad, nbr, n_src):
    out = np.zeros((n_src, grad.shape[1]))
    k = nbr.shape[1]
    np.add.at(out, nbr.ravel(), np.repeat(grad / k, k, axis=0))
    return out


def confusion(gt, pred, K):
    return np.bincount(gt * K + pred, minlength=K * K).reshape(K, K).astype(np.int64)
