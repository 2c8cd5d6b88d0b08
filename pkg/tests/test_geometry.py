"""Geometry tests: oracle equivalence for FPS/KNN plus the remaining kernels."""

import numpy as np
import pytest

import cdformer.geometry as G
import cdformer.geometry._kernels_py as KP
from cdformer.errors import ContractError


def fps_oracle(coords, m):
    """Brute-force greedy max-min: seed at lexicographically smallest triple,
    each pick maximizes the min distance to the selected set, ties -> lowest index."""
    n = len(coords)
    seed = min(range(n), key=lambda i: (coords[i][0], coords[i][1], coords[i][2]))
    chosen = [seed]
    for _ in range(m - 1):
        best_j, best_d = -1, -1.0
        for j in range(n):
            if j in chosen:
                continue
            dmin = min(
                (coords[j][0] - coords[c][0]) ** 2
                + (coords[j][1] - coords[c][1]) ** 2
                + (coords[j][2] - coords[c][2]) ** 2
                for c in chosen
            )
            if dmin > best_d:
                best_d, best_j = dmin, j
        chosen.append(best_j)
    return np.array(chosen, dtype=np.int64)


def knn_oracle(queries, points, k):
    """Full sort by (squared distance, index) per query."""
    out = []
    for q in queries:
        d2 = [
            (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 + (p[2] - q[2]) ** 2 for p in points
        ]
        out.append(sorted(range(len(points)), key=lambda j: (d2[j], j))[:k])
    return np.array(out, dtype=np.int64)


# --- FPS ---


def test_fps_exhaustive_is_permutation():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(17, 3))
    idx = G.farthest_point_sample(pts, 17)
    assert sorted(idx.tolist()) == list(range(17))


def test_fps_m1_is_lex_smallest():
    pts = np.array([[1.0, 0, 0], [0.0, 5, 5], [0.0, 2, 9], [0.0, 2, 3]])
    assert G.farthest_point_sample(pts, 1)[0] == 3


def test_fps_line_example():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.1, 0, 0], [2.0, 0, 0]])
    idx = G.farthest_point_sample(pts, 2)
    assert idx.tolist() == [0, 3]


def test_fps_m_exceeds_n():
    with pytest.raises(ContractError):
        G.farthest_point_sample(np.zeros((4, 3)), 5)


def test_fps_matches_oracle_200_trials():
    rng = np.random.default_rng(42)
    for _ in range(200):
        n = int(rng.integers(2, 65))
        m = int(rng.integers(1, n + 1))
        pts = rng.normal(size=(n, 3))
        assert np.array_equal(G.farthest_point_sample(pts, m), fps_oracle(pts, m))


def test_fps_set_permutation_invariant():
    rng = np.random.default_rng(9)
    for _ in range(50):
        n = int(rng.integers(4, 48))
        m = int(rng.integers(1, n + 1))
        pts = rng.normal(size=(n, 3))
        perm = rng.permutation(n)
        a = pts[G.farthest_point_sample(pts, m)]
        b = pts[perm][G.farthest_point_sample(pts[perm], m)]
        assert np.array_equal(np.sort(a, axis=0), np.sort(b, axis=0))


def test_fps_translation_invariant():
    rng = np.random.default_rng(10)
    pts = rng.normal(size=(40, 3))
    t = np.array([13.5, -2.25, 7.0])
    assert np.array_equal(
        G.farthest_point_sample(pts, 11), G.farthest_point_sample(pts + t, 11)
    )


# --- KNN ---


def test_knn_simple_example():
    q = np.array([[0.0, 0, 0]])
    pts = np.array([[1.0, 0, 0], [0.0, 1, 0], [3.0, 0, 0]])
    assert G.knn_indices(q, pts, 2).tolist() == [[0, 1]]


def test_knn_k_equals_n_sorted():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(9, 3))
    q = rng.normal(size=(2, 3))
    assert np.array_equal(G.knn_indices(q, pts, 9), knn_oracle(q, pts, 9))


def test_knn_tie_prefers_lower_index():
    q = np.array([[0.0, 0, 0]])
    pts = np.array([[2.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0]])
    assert G.knn_indices(q, pts, 2).tolist() == [[1, 2]]


def test_knn_k_exceeds_n():
    with pytest.raises(ContractError):
        G.knn_indices(np.zeros((1, 3)), np.zeros((3, 3)), 4)


def test_knn_matches_oracle_200_trials():
    rng = np.random.default_rng(43)
    for _ in range(200):
        n = int(rng.integers(1, 65))
        k = int(rng.integers(1, min(n, 16) + 1))
        mq = int(rng.integers(1, 9))
        pts = rng.normal(size=(n, 3))
        q = rng.normal(size=(mq, 3))
        assert np.array_equal(G.knn_indices(q, pts, k), knn_oracle(q, pts, k))


def test_knn_translation_invariant():
    rng = np.random.default_rng(11)
    pts = rng.normal(size=(50, 3))
    q = rng.normal(size=(7, 3))
    t = np.array([-4.0, 9.5, 1.0])
    assert np.array_equal(G.knn_indices(q, pts, 5), G.knn_indices(q + t, pts + t, 5))


# --- backend parity ---

needs_compiled = pytest.mark.skipif(
    G.backend_name() != "compiled", reason="compiled kernels not built"
)


@needs_compiled
def test_compiled_fps_matches_python_backend():
    from cdformer.geometry import _kernels as KC

    rng = np.random.default_rng(2)
    for _ in range(40):
        n = int(rng.integers(2, 200))
        m = int(rng.integers(1, n + 1))
        pts = np.ascontiguousarray(rng.normal(size=(n, 3)))
        assert np.array_equal(KC.fps_kernel(pts, m), KP.fps_kernel(pts, m))


@needs_compiled
def test_compiled_knn_brute_matches_python_backend():
    from cdformer.geometry import _kernels as KC

    rng = np.random.default_rng(3)
    for _ in range(40):
        n = int(rng.integers(1, 300))
        k = int(rng.integers(1, min(n, 20) + 1))
        q = np.ascontiguousarray(rng.normal(size=(int(rng.integers(1, 20)), 3)))
        pts = np.ascontiguousarray(rng.normal(size=(n, 3)))
        assert np.array_equal(KC.knn_brute_kernel(q, pts, k), KP.knn_kernel(q, pts, k))


@needs_compiled
@pytest.mark.parametrize("dist", ["uniform", "clustered", "planar", "outside"])
def test_grid_knn_identical_to_brute(dist):
    from cdformer.geometry import _kernels as KC

    rng = np.random.default_rng(hash(dist) % 2**32)
    for trial in range(10):
        n = int(rng.integers(50, 2500))
        k = int(rng.integers(1, 17))
        if dist == "uniform":
            pts = rng.uniform(-1, 1, size=(n, 3))
            q = rng.uniform(-1, 1, size=(64, 3))
        elif dist == "clustered":
            centers = rng.normal(size=(5, 3)) * 4
            pts = centers[rng.integers(0, 5, n)] + rng.normal(size=(n, 3)) * 0.05
            q = centers[rng.integers(0, 5, 64)] + rng.normal(size=(64, 3)) * 0.05
        elif dist == "planar":
            pts = rng.uniform(-1, 1, size=(n, 3))
            pts[:, 2] = 0.0
            q = pts[rng.integers(0, n, 64)]
        else:  # queries far outside the point bounding box
            pts = rng.uniform(-1, 1, size=(n, 3))
            q = rng.uniform(-1, 1, size=(64, 3)) + np.array([5.0, -3.0, 8.0])
        pts = np.ascontiguousarray(pts)
        q = np.ascontiguousarray(q)
        assert np.array_equal(
            KC.knn_grid_kernel(q, pts, k), KC.knn_brute_kernel(q, pts, k)
        ), f"{dist} trial {trial}"


# --- patch division ---


def test_patch_divide_single_patch():
    rng = np.random.default_rng(4)
    cloud = G.PointCloud(rng.normal(size=(8, 3)), rng.normal(size=(8, 2)))
    pi = G.patch_divide(cloud, 8, 3)
    assert pi.center_idx.shape == (1,) and pi.neighbor_idx.shape == (1, 3)


def test_patch_divide_paper_scale():
    rng = np.random.default_rng(5)
    cloud = G.PointCloud(rng.normal(size=(1024, 3)), rng.normal(size=(1024, 3)))
    pi = G.patch_divide(cloud, 4, 16)
    assert pi.center_idx.shape == (256,)
    assert pi.neighbor_idx.shape == (256, 16)


def test_patch_divide_degenerate_scale_one():
    rng = np.random.default_rng(6)
    cloud = G.PointCloud(rng.normal(size=(12, 3)), rng.normal(size=(12, 1)))
    pi = G.patch_divide(cloud, 1, 1)
    assert pi.center_idx.shape == (12,)
    assert np.array_equal(np.sort(pi.center_idx), np.arange(12))
    assert np.array_equal(pi.neighbor_idx[:, 0], pi.center_idx)


def test_patch_divide_invariants():
    rng = np.random.default_rng(7)
    cloud = G.PointCloud(rng.normal(size=(50, 3)), rng.normal(size=(50, 4)))
    pi = G.patch_divide(cloud, 4, 6)
    m = -(-50 // 4)
    assert pi.center_idx.shape == (m,)
    assert len(set(pi.center_idx.tolist())) == m
    assert pi.neighbor_idx.min() >= 0 and pi.neighbor_idx.max() < 50
    for row, c in zip(pi.neighbor_idx, pi.center_idx):
        assert c in row  # a point is its own nearest neighbor


# --- grid subsample ---


def test_grid_subsample_single_voxel():
    cloud = G.PointCloud(np.full((5, 3), 0.2), np.arange(10.0).reshape(5, 2))
    out = G.grid_subsample(cloud, 10.0)
    assert out.n == 1
    assert np.allclose(out.coords[0], 0.2)
    assert np.allclose(out.feats[0], cloud.feats.mean(axis=0))


def test_grid_subsample_hand_bucketing():
    coords = np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [1.5, 0.0, 0.0]])
    cloud = G.PointCloud(coords, np.zeros((3, 0)))
    out = G.grid_subsample(cloud, 1.0)
    assert out.n == 2
    got = {tuple(np.round(c, 6)) for c in out.coords}
    assert got == {(0.15, 0.15, 0.15), (1.5, 0.0, 0.0)}


def test_grid_subsample_fine_grid_identity():
    rng = np.random.default_rng(8)
    coords = rng.uniform(0, 1, size=(30, 3))
    cloud = G.PointCloud(coords, rng.normal(size=(30, 2)).astype(np.float64))
    out = G.grid_subsample(cloud, 1e-6)
    assert out.n == 30
    order_in = np.lexsort((coords[:, 0], coords[:, 1], coords[:, 2]))
    order_out = np.lexsort((out.coords[:, 0], out.coords[:, 1], out.coords[:, 2]))
    assert np.allclose(coords[order_in], out.coords[order_out])


def test_grid_subsample_majority_label_tie_low():
    coords = np.zeros((4, 3))
    labels = np.array([3, 1, 3, 1])
    cloud = G.PointCloud(coords, np.zeros((4, 0)), labels)
    out = G.grid_subsample(cloud, 1.0)
    assert out.labels.tolist() == [1]


def test_grid_subsample_never_grows():
    rng = np.random.default_rng(9)
    cloud = G.PointCloud(rng.normal(size=(100, 3)), rng.normal(size=(100, 3)))
    for grid in [0.01, 0.3, 2.0]:
        assert G.grid_subsample(cloud, grid).n <= 100


# --- relative offsets ---


def test_relative_offsets_zero_and_sign():
    q = np.array([[1.0, 0, 0]])
    keys = np.array([[[1.0, 0, 0], [0.0, 0, 0]]])
    out = G.relative_offsets(q, keys)
    assert np.array_equal(out[0, 0], [0.0, 0, 0])
    assert np.array_equal(out[0, 1], [-1.0, 0, 0])


def test_relative_offsets_translation_invariant():
    rng = np.random.default_rng(10)
    q = rng.normal(size=(4, 3))
    keys = rng.normal(size=(4, 5, 3))
    t = np.array([3.0, -1.0, 2.0])
    assert np.allclose(G.relative_offsets(q + t, keys + t), G.relative_offsets(q, keys))


# --- interpolation ---


def test_interpolate_exact_copy_on_source():
    src = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0]])
    feats = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    out = G.interpolate_upsample(src, feats, src[1:2])
    assert np.array_equal(out[0], feats[1])


def test_interpolate_single_source_broadcasts():
    src = np.array([[0.0, 0, 0]])
    feats = np.array([[7.0, 8.0]])
    out = G.interpolate_upsample(src, feats, np.random.default_rng(0).normal(size=(5, 3)))
    assert np.allclose(out, feats[0])


def test_interpolate_midpoint_weights():
    src = np.array([[0.0, 0, 0], [2.0, 0, 0], [1000.0, 0, 0]])
    feats = np.array([[0.0], [2.0], [1.0]])
    out = G.interpolate_upsample(src, feats, np.array([[1.0, 0, 0]]))
    assert abs(out[0, 0] - 1.0) < 1e-3


def test_interpolate_differentiable_through_features():
    import cdformer.tensor as T

    rng = np.random.default_rng(11)
    src = rng.normal(size=(6, 3))
    dst = rng.normal(size=(4, 3))

    def f(feats):
        return T.tsum(G.interpolate_upsample(src, feats, dst))

    assert T.grad_check(f, rng.normal(size=(6, 2))) < 1e-6
