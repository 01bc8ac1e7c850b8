"""Exact Euclidean k-nearest-neighbour search with deterministic tie-breaks."""
from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

_CHUNK = 256


def kneighbors(queries: np.ndarray, points: np.ndarray, k: int, *, exclude_self: bool = False):
    """Indices and squared distances of the ``k`` nearest ``points`` per query.

    Neighbours are ordered by distance, equal distances by lower point index.
    With ``exclude_self`` the queries must be ``points`` itself and each row
    skips its own index (but not exact duplicates stored at other indices).
    """
    queries = np.asarray(queries, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    n_avail = len(points) - (1 if exclude_self else 0)
    if k < 1 or k > n_avail:
        raise ValueError(f"k={k} but only {n_avail} candidate neighbours")
    idx = np.empty((len(queries), k), dtype=np.int64)
    dist = np.empty((len(queries), k), dtype=np.float64)
    for start in range(0, len(queries), _CHUNK):
        D = cdist(queries[start:start + _CHUNK], points, "sqeuclidean")
        rows = np.arange(len(D))
        if exclude_self:
            D[rows, rows + start] = np.inf
        kth = np.partition(D, k - 1, axis=1)[:, k - 1]
        for r in rows:
            cand = np.flatnonzero(D[r] <= kth[r])
            order = np.lexsort((cand, D[r, cand]))[:k]
            idx[start + r] = cand[order]
            dist[start + r] = D[r, cand[order]]
    return idx, dist
