"""Pure-numpy geometry kernels: the fallback backend.

Result-identical to the compiled kernels in `_kernels.pyx` (the parity tests
compare them exhaustively): distances are squared Euclidean in float64 with
the same operation order, neighbor ordering is ascending (distance, index),
and farthest-point sampling breaks ties toward the lowest index.
"""

from __future__ import annotations

import numpy as np


def fps_kernel(coords: np.ndarray, m: int) -> np.ndarray:
    """Greedy max-min selection seeded at the lexicographically smallest point."""
    n = coords.shape[0]
    x, y, z = coords[:, 0], coords[:, 1], coords[:, 2]
    seed = int(np.lexsort((z, y, x))[0])
    out = np.empty(m, dtype=np.int64)
    out[0] = seed
    dx = x - x[seed]
    dy = y - y[seed]
    dz = z - z[seed]
    d2 = dx * dx + dy * dy + dz * dz
    d2[seed] = -1.0  # selected points can never be re-picked
    for i in range(1, m):
        nxt = int(np.argmax(d2))  # first occurrence: lowest index on ties
        out[i] = nxt
        dx = x - x[nxt]
        dy = y - y[nxt]
        dz = z - z[nxt]
        nd2 = dx * dx + dy * dy + dz * dz
        np.minimum(d2, nd2, out=d2)
        d2[nxt] = -1.0
    return out


def knn_kernel(queries: np.ndarray, points: np.ndarray, k: int) -> np.ndarray:
    """Exact brute-force KNN, chunked over queries to bound the working set."""
    mq = queries.shape[0]
    n = points.shape[0]
    out = np.empty((mq, k), dtype=np.int64)
    chunk = max(1, int(4_000_000 // max(n, 1)))
    for s in range(0, mq, chunk):
        q = queries[s : s + chunk]
        diff = points[None, :, :] - q[:, None, :]
        d2 = (diff * diff).sum(axis=-1)
        # stable sort keeps ascending index among equal distances
        out[s : s + chunk] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out
