"""Hot loops: farthest-point sampling, kNN grouping, point-splat depth test.

Each kernel has a numba @njit implementation and a pure-numpy fallback.
Set PCXP_DISABLE_NUMBA=1 to force the numpy path (it is also used when
numba is not importable). Both paths perform the same float64 arithmetic
in the same order, so their outputs are bit-identical; a test asserts
this whenever numba is available.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLE = os.environ.get("PCXP_DISABLE_NUMBA", "") not in ("", "0")

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


def backend() -> str:
    """Which implementation the public kernels dispatch to."""
    return "numba" if (HAS_NUMBA and not _DISABLE) else "numpy"


# farthest-point sampling ------------------------------------------------------


def _fps_np(pts: np.ndarray, n: int, start: int) -> np.ndarray:
    m = pts.shape[0]
    out = np.empty(n, dtype=np.int64)
    best = np.full(m, np.inf)
    cur = start
    out[0] = cur
    for i in range(1, n):
        d = pts - pts[cur]
        d = (d * d).sum(axis=1)
        np.minimum(best, d, out=best)
        best[cur] = -1.0  # selected points never win again
        cur = int(np.argmax(best))
        out[i] = cur
    return out


@njit(cache=True)
def _fps_numba(pts, n, start):  # pragma: no cover - mirrored by _fps_np
    m = pts.shape[0]
    out = np.empty(n, dtype=np.int64)
    best = np.full(m, np.inf)
    cur = start
    out[0] = cur
    for i in range(1, n):
        cx, cy, cz = pts[cur, 0], pts[cur, 1], pts[cur, 2]
        for j in range(m):
            dx = pts[j, 0] - cx
            dy = pts[j, 1] - cy
            dz = pts[j, 2] - cz
            d = dx * dx + dy * dy + dz * dz
            if d < best[j]:
                best[j] = d
        best[cur] = -1.0
        bi = 0
        bv = -np.inf
        for j in range(m):
            if best[j] > bv:
                bv = best[j]
                bi = j
        cur = bi
        out[i] = cur
    return out


def fps_indices(points: np.ndarray, n: int, start: int) -> np.ndarray:
    """Greedy max-min-distance subset of n indices, first index given.

    Ties (and already-selected points) resolve to the lowest index, so the
    result is a pure function of (points, n, start). With n == len(points)
    the result is a permutation even when points coincide.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    m = pts.shape[0]
    if not 1 <= n <= m:
        raise ValueError(f"cannot sample {n} points from {m}")
    if not 0 <= start < m:
        raise ValueError(f"start index {start} out of range")
    if backend() == "numba":
        return _fps_numba(pts, n, start)
    return _fps_np(pts, n, start)


# kNN grouping -----------------------------------------------------------------


def _knn_np(pts: np.ndarray, centroids: np.ndarray, k: int) -> np.ndarray:
    diff = pts[None, :, :] - pts[centroids][:, None, :]
    d = (diff * diff).sum(axis=2)
    tie = np.arange(pts.shape[0])
    out = np.empty((centroids.shape[0], k), dtype=np.int64)
    for i in range(centroids.shape[0]):
        out[i] = np.lexsort((tie, d[i]))[:k]
    return out


@njit(cache=True)
def _knn_numba(pts, centroids, k):  # pragma: no cover - mirrored by _knn_np
    m = pts.shape[0]
    n = centroids.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    d = np.empty(m, dtype=np.float64)
    for i in range(n):
        c = centroids[i]
        cx, cy, cz = pts[c, 0], pts[c, 1], pts[c, 2]
        for j in range(m):
            dx = pts[j, 0] - cx
            dy = pts[j, 1] - cy
            dz = pts[j, 2] - cz
            d[j] = dx * dx + dy * dy + dz * dz
        for s in range(k):
            bi = -1
            bv = np.inf
            for j in range(m):
                if d[j] < bv:
                    bv = d[j]
                    bi = j
            out[i, s] = bi
            d[bi] = np.inf
    return out


def knn_indices(points: np.ndarray, centroid_indices: np.ndarray, k: int) -> np.ndarray:
    """k nearest neighbours of each centroid (the centroid itself is eligible).

    Distance ties resolve to the lowest point index.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    cid = np.ascontiguousarray(centroid_indices, dtype=np.int64)
    if not 1 <= k <= pts.shape[0]:
        raise ValueError(f"k={k} invalid for {pts.shape[0]} points")
    if backend() == "numba":
        return _knn_numba(pts, cid, k)
    return _knn_np(pts, cid, k)


# point-splat depth buffer -----------------------------------------------------


def _splat_np(rows: np.ndarray, cols: np.ndarray, z: np.ndarray, h: int, w: int) -> np.ndarray:
    zbuf = np.full((h, w), -np.inf)
    np.maximum.at(zbuf, (rows, cols), z)
    return zbuf


@njit(cache=True)
def _splat_numba(rows, cols, z, h, w):  # pragma: no cover - mirrored by _splat_np
    zbuf = np.full((h, w), -np.inf)
    for i in range(rows.shape[0]):
        if z[i] > zbuf[rows[i], cols[i]]:
            zbuf[rows[i], cols[i]] = z[i]
    return zbuf


def splat_depth(rows: np.ndarray, cols: np.ndarray, z: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-depth buffer: each pixel keeps the largest z that lands on it.

    Empty pixels hold -inf. Max is order-independent, so permuting the input
    points cannot change the buffer.
    """
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    cols = np.ascontiguousarray(cols, dtype=np.int64)
    z = np.ascontiguousarray(z, dtype=np.float64)
    if backend() == "numba":
        return _splat_numba(rows, cols, z, h, w)
    return _splat_np(rows, cols, z, h, w)
