"""Point-set kernels: sampling, neighborhoods, voxel subsampling, interpolation.

Distance computations run in float64 regardless of input dtype so results do
not depend on the storage precision, and every kernel has a deterministic tie
rule (lowest index / lowest label). Two interchangeable backends provide FPS
and KNN: a compiled Cython extension and a pure-numpy fallback. Selection
happens at import; override with CDF_KERNELS=compiled|python|auto.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import ContractError
from .. import tensor as T
from . import _kernels_py

_BACKEND_ENV = os.environ.get("CDF_KERNELS", "auto")
_compiled = None
if _BACKEND_ENV in ("auto", "compiled"):
    try:
        from . import _kernels as _compiled  # type: ignore[no-redef]
    except ImportError:
        if _BACKEND_ENV == "compiled":
            raise ImportError(
                "CDF_KERNELS=compiled but the cdformer.geometry._kernels extension "
                "is not built; run `pip install --no-build-isolation -e .`"
            )
        _compiled = None
elif _BACKEND_ENV != "python":
    raise ContractError(f"CDF_KERNELS must be auto|compiled|python, got {_BACKEND_ENV!r}")


def backend_name() -> str:
    return "compiled" if _compiled is not None else "python"


def _as_f64(a) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64))


# --- domain types ---------------------------------------------------------------


@dataclass
class PointCloud:
    """Coordinates (N x 3), features (N x C), optional per-point labels."""

    coords: np.ndarray
    feats: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords)
        self.feats = np.asarray(self.feats)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ContractError(f"coords must be N x 3, got {self.coords.shape}")
        if self.feats.ndim != 2 or self.feats.shape[0] != self.coords.shape[0]:
            raise ContractError(
                f"feats must share leading extent with coords: {self.feats.shape} vs {self.coords.shape}"
            )
        if self.coords.shape[0] < 1:
            raise ContractError("a point cloud needs at least one point")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.coords.shape[0],):
                raise ContractError(f"labels must be (N,), got {self.labels.shape}")

    @property
    def n(self) -> int:
        return self.coords.shape[0]


@dataclass
class PatchIndex:
    """FPS centers (M) plus K nearest neighbors per center (M x K)."""

    center_idx: np.ndarray
    neighbor_idx: np.ndarray
    scale: int


# --- sampling / neighborhoods ------------------------------------------------------


def farthest_point_sample(coords, m: int) -> np.ndarray:
    """Greedy max-min subset of point indices.

    Seeded at the lexicographically smallest coordinate triple; each pick
    maximizes the minimum distance to the already-selected set, ties toward
    the lowest index.
    """
    coords = _as_f64(coords)
    n = coords.shape[0]
    if not 1 <= m <= n:
        raise ContractError(f"farthest_point_sample: need 1 <= m <= {n}, got m={m}")
    kern = _compiled if _compiled is not None else _kernels_py
    return np.asarray(kern.fps_kernel(coords, m))


# beyond this many query*point pairs the compiled backend switches to the cell grid
_GRID_CUTOVER = 262_144


def knn_indices(queries, points, k: int) -> np.ndarray:
    """Exact k nearest neighbors per query, rows ascending by (distance, index)."""
    queries = _as_f64(queries)
    points = _as_f64(points)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ContractError(f"knn_indices: need 1 <= k <= {n}, got k={k}")
    if _compiled is not None:
        if queries.shape[0] * n > _GRID_CUTOVER and n > 4 * k:
            return np.asarray(_compiled.knn_grid_kernel(queries, points, k))
        return np.asarray(_compiled.knn_brute_kernel(queries, points, k))
    return _kernels_py.knn_kernel(queries, points, k)


def patch_divide(cloud: PointCloud, s: int, k: int) -> PatchIndex:
    """Split a cloud into M = ceil(N/s) patches of K nearest neighbors."""
    n = cloud.n
    if s < 1:
        raise ContractError(f"patch_divide: scale must be >= 1, got {s}")
    if k > n:
        raise ContractError(f"patch_divide: k={k} exceeds point count {n}")
    m = -(-n // s)
    centers = farthest_point_sample(cloud.coords, m)
    neighbors = knn_indices(cloud.coords[centers], cloud.coords, k)
    return PatchIndex(centers, neighbors, s)


# --- voxel subsampling ----------------------------------------------------------------


def grid_subsample(cloud: PointCloud, grid: float) -> PointCloud:
    """One point per occupied voxel: coordinate centroid, feature mean, majority label.

    Voxel key is floor(coord / grid) per axis; output rows ascend by key with
    z most significant. Label ties resolve to the lowest class id.
    """
    if grid <= 0:
        raise ContractError(f"grid_subsample: grid must be > 0, got {grid}")
    coords = _as_f64(cloud.coords)
    keys = np.floor(coords / grid).astype(np.int64)
    # columns ordered (z, y, x) so lexicographic row order is z-major
    zyx = keys[:, ::-1]
    uniq, inverse = np.unique(zyx, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    g = uniq.shape[0]
    counts = np.bincount(inverse, minlength=g).astype(np.float64)

    csum = np.zeros((g, 3), dtype=np.float64)
    np.add.at(csum, inverse, coords)
    new_coords = (csum / counts[:, None]).astype(cloud.coords.dtype)

    c = cloud.feats.shape[1]
    fsum = np.zeros((g, c), dtype=np.float64)
    if c:
        np.add.at(fsum, inverse, cloud.feats.astype(np.float64))
    new_feats = (fsum / counts[:, None]).astype(cloud.feats.dtype) if c else np.empty((g, 0), cloud.feats.dtype)

    new_labels = None
    if cloud.labels is not None:
        pairs = inverse * (int(cloud.labels.max()) + 1) + cloud.labels
        pair_ids, pair_counts = np.unique(pairs, return_counts=True)
        pg = pair_ids // (int(cloud.labels.max()) + 1)
        pl = pair_ids % (int(cloud.labels.max()) + 1)
        # per voxel: highest count wins, ties to the lowest label
        order = np.lexsort((pl, -pair_counts, pg))
        first = np.unique(pg[order], return_index=True)[1]
        new_labels = pl[order][first]

    return PointCloud(new_coords, new_feats, new_labels)


# --- relative geometry -------------------------------------------------------------


def relative_offsets(queries, keys) -> np.ndarray:
    """Offsets key - query: (A x 3, A x K x 3) -> A x K x 3."""
    queries = np.asarray(queries)
    keys = np.asarray(keys)
    if queries.shape[0] != keys.shape[0]:
        raise ContractError(
            f"relative_offsets: leading extents disagree ({queries.shape[0]} vs {keys.shape[0]})"
        )
    return keys - queries[:, None, :]


def interpolate_upsample(src_coords, src_feats, dst_coords):
    """Inverse-distance interpolation over the 3 nearest sources.

    Weights are 1/(d + 1e-8), normalized; a destination sitting on a source
    (d < 1e-8) copies that source's features exactly. src_feats may be a
    Tensor (gradients flow through the weighted gather) or a plain array.
    """
    src_coords = _as_f64(src_coords)
    dst_coords = _as_f64(dst_coords)
    m = src_coords.shape[0]
    if m < 1:
        raise ContractError("interpolate_upsample needs at least one source point")
    kk = min(3, m)
    idx = knn_indices(dst_coords, src_coords, kk)
    diff = src_coords[idx] - dst_coords[:, None, :]
    d = np.sqrt((diff * diff).sum(axis=-1))
    w = 1.0 / (d + 1e-8)
    w /= w.sum(axis=1, keepdims=True)
    exact = d[:, 0] < 1e-8
    if exact.any():
        w[exact] = 0.0
        w[exact, 0] = 1.0

    if isinstance(src_feats, T.Tensor):
        wt = T.Tensor(w.astype(src_feats.data.dtype))
        gathered = T.gather_rows(src_feats, idx)
        return T.einsum2("nkc,nk->nc", gathered, wt)
    src_feats = np.asarray(src_feats)
    return np.einsum("nkc,nk->nc", src_feats[idx], w.astype(src_feats.dtype))
