"""Kernel correctness against brute-force oracles, plus bit-identity of the
numba and numpy paths (the backend flag must never change results)."""

import numpy as np
import pytest

from pcxp import kernels as K


def clouds(seed=0, m=200):
    return np.random.default_rng(seed).normal(size=(m, 3))


# oracles ---------------------------------------------------------------------


def fps_oracle(pts, n, start):
    """Literal greedy max-min selection with lowest-index tie-breaks."""
    chosen = [start]
    dist = {j: np.inf for j in range(len(pts))}
    for _ in range(n - 1):
        for j in dist:
            d = float(((pts[j] - pts[chosen[-1]]) ** 2).sum())
            dist[j] = min(dist[j], d)
        best_j, best_d = None, -np.inf
        for j in sorted(dist):
            if j in chosen:
                continue
            if dist[j] > best_d:
                best_j, best_d = j, dist[j]
        chosen.append(best_j)
    return np.array(chosen, dtype=np.int64)


def knn_oracle(pts, cent_idx, k):
    out = []
    for c in cent_idx:
        d = ((pts - pts[c]) ** 2).sum(axis=1)
        order = np.lexsort((np.arange(len(pts)), d))  # distance, then index
        out.append(order[:k])
    return np.array(out, dtype=np.int64)


def splat_oracle(rows, cols, z, h, w):
    buf = np.full((h, w), -np.inf)
    for r, c, depth in zip(rows, cols, z):
        if depth > buf[r, c]:
            buf[r, c] = depth
    return buf


# fps -------------------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fps_matches_oracle(seed):
    pts = clouds(seed, m=60)
    got = K.fps_indices(pts, 12, start=seed % 60)
    want = fps_oracle(pts, 12, start=seed % 60)
    assert np.array_equal(got, want)


def test_fps_indices_unique_and_spread():
    pts = clouds(3, m=500)
    idx = K.fps_indices(pts, 64, 0)
    assert len(set(idx.tolist())) == 64
    # any fps point is farther from the rest of the selection than a random
    # subset's average nearest-neighbour distance
    sel = pts[idx]
    d = ((sel[:, None] - sel[None, :]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    rnd = pts[np.random.default_rng(0).choice(500, 64, replace=False)]
    dr = ((rnd[:, None] - rnd[None, :]) ** 2).sum(-1)
    np.fill_diagonal(dr, np.inf)
    assert d.min(1).mean() > dr.min(1).mean()


def test_fps_full_permutation_with_duplicates():
    pts = np.zeros((8, 3))
    pts[:4] = clouds(4, m=4)
    idx = K.fps_indices(pts, 8, 0)
    assert sorted(idx.tolist()) == list(range(8))


def test_fps_validates():
    pts = clouds(0, m=10)
    with pytest.raises(ValueError):
        K.fps_indices(pts, 11, 0)
    with pytest.raises(ValueError):
        K.fps_indices(pts, 5, 10)


# knn -------------------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1])
def test_knn_matches_oracle(seed):
    pts = clouds(seed, m=80)
    cent = K.fps_indices(pts, 10, 0)
    got = K.knn_indices(pts, cent, 7)
    want = knn_oracle(pts, cent, 7)
    assert np.array_equal(got, want)


def test_knn_contains_centroid_first():
    pts = clouds(2, m=50)
    cent = np.array([3, 17, 42])
    got = K.knn_indices(pts, cent, 5)
    assert np.array_equal(got[:, 0], cent)  # self-distance 0 wins


def test_knn_tie_break_lowest_index():
    pts = np.zeros((6, 3))  # all coincident: ties everywhere
    got = K.knn_indices(pts, np.array([4]), 4)
    assert got.tolist() == [[0, 1, 2, 3]]


def test_knn_validates():
    with pytest.raises(ValueError):
        K.knn_indices(clouds(0, 10), np.array([0]), 11)


# splat -----------------------------------------------------------------------


def test_splat_matches_oracle():
    rng = np.random.default_rng(5)
    rows = rng.integers(0, 16, 300)
    cols = rng.integers(0, 16, 300)
    z = rng.uniform(size=300)
    got = K.splat_depth(rows, cols, z, 16, 16)
    assert np.array_equal(got, splat_oracle(rows, cols, z, 16, 16))


def test_splat_order_independent():
    rng = np.random.default_rng(6)
    rows = rng.integers(0, 8, 100)
    cols = rng.integers(0, 8, 100)
    z = rng.uniform(size=100)
    a = K.splat_depth(rows, cols, z, 8, 8)
    p = rng.permutation(100)
    b = K.splat_depth(rows[p], cols[p], z[p], 8, 8)
    assert np.array_equal(a, b)


def test_splat_empty_pixels_are_neg_inf():
    out = K.splat_depth(np.array([0]), np.array([0]), np.array([0.5]), 2, 2)
    assert out[0, 0] == 0.5
    assert np.isneginf(out).sum() == 3


# backend parity ---------------------------------------------------------------


@pytest.mark.skipif(not K.HAS_NUMBA, reason="numba not installed")
def test_numba_numpy_bit_identical():
    pts = clouds(9, m=300)
    fps_a = K._fps_np(pts, 40, 0)
    fps_b = K._fps_numba(pts, 40, 0)
    assert np.array_equal(fps_a, fps_b)

    knn_a = K._knn_np(pts, fps_a, 9)
    knn_b = K._knn_numba(pts, fps_a, 9)
    assert np.array_equal(knn_a, knn_b)

    rng = np.random.default_rng(10)
    rows = rng.integers(0, 32, 5000)
    cols = rng.integers(0, 32, 5000)
    z = rng.uniform(size=5000)
    sp_a = K._splat_np(rows, cols, z, 32, 32)
    sp_b = K._splat_numba(rows, cols, z, 32, 32)
    assert np.array_equal(sp_a, sp_b)


def test_backend_flag(monkeypatch):
    # the env flag selects numpy even when numba is importable
    monkeypatch.setattr(K, "_DISABLE", True)
    assert K.backend() == "numpy"
    monkeypatch.setattr(K, "_DISABLE", False)
    assert K.backend() == ("numba" if K.HAS_NUMBA else "numpy")
