"""Geometric-aware point sampling.

Dense multi-view-stereo clouds are thinned by scoring every point with its
confidence times the L2 norm of its unit-sum FPFH descriptor and keeping the
best ``k`` points per voxel. Voxels are cubes whose edge is the shortest edge
of the cloud's bounding box divided by ``N``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .ply import read_ply_vertices, write_ply_vertices

N_BINS = 11
DIST_FLOOR = 1e-9


@dataclass
class Point:
    position: np.ndarray
    confidence: float = 1.0
    color: Optional[np.ndarray] = None
    normal: Optional[np.ndarray] = None


@dataclass
class PointCloud:
    positions: np.ndarray
    confidence: np.ndarray
    colors: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        n = len(self.positions)
        self.confidence = np.asarray(self.confidence, dtype=float).reshape(n)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=float).reshape(n, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(n, 3)

    def __len__(self):
        return len(self.positions)

    @classmethod
    def from_positions(cls, positions, confidence=None, **kw) -> "PointCloud":
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        if confidence is None:
            confidence = np.ones(len(positions))
        return cls(positions, confidence, **kw)

    def points(self) -> list[Point]:
        return [
            Point(self.positions[i].copy(), float(self.confidence[i]),
                  None if self.colors is None else self.colors[i].copy(),
                  None if self.normals is None else self.normals[i].copy())
            for i in range(len(self))
        ]

    def take(self, index) -> "PointCloud":
        return PointCloud(
            self.positions[index], self.confidence[index],
            None if self.colors is None else self.colors[index],
            None if self.normals is None else self.normals[index],
        )


@dataclass
class SamplingConfig:
    n: int = 80
    k: int = 3
    k_neighbors: int = 10
    normalization: str = "l1"   # "l1" (unit-sum) or "minmax" (per-dimension over the cloud)
    workers: int = 1            # KD-tree query threads

    def __post_init__(self):
        if self.n <= 0 or self.k <= 0 or self.k_neighbors <= 0:
            raise ValueError("N, k and K_neighbors must be positive")
        if self.normalization not in ("l1", "minmax"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


# ---------------------------------------------------------------- PLY


def read_ply(path) -> PointCloud:
    """x, y, z required; confidence defaults to 1.0; red/green/blue and nx/ny/nz optional."""
    cols = read_ply_vertices(path)
    for c in "xyz":
        if c not in cols:
            raise ValueError(f"{path}: PLY vertex is missing property {c!r}")
    pos = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(float)
    conf = cols["confidence"].astype(float) if "confidence" in cols else np.ones(len(pos))
    colors = None
    if all(c in cols for c in ("red", "green", "blue")):
        rgb = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1)
        colors = rgb / 255.0 if cols["red"].dtype == np.uint8 else rgb.astype(float)
    normals = None
    if all(c in cols for c in ("nx", "ny", "nz")):
        normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1).astype(float)
    return PointCloud(pos, conf, colors, normals)


def write_ply(path, cloud: PointCloud, binary: bool = True):
    cols = {"x": cloud.positions[:, 0], "y": cloud.positions[:, 1], "z": cloud.positions[:, 2],
            "confidence": cloud.confidence}
    if cloud.colors is not None:
        rgb = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)
        cols.update(red=rgb[:, 0], green=rgb[:, 1], blue=rgb[:, 2])
    if cloud.normals is not None:
        cols.update(nx=cloud.normals[:, 0], ny=cloud.normals[:, 1], nz=cloud.normals[:, 2])
    write_ply_vertices(path, cols, binary=binary)


# ---------------------------------------------------------------- neighbors and normals


def knn(positions, k: int, workers: int = 1):
    """K nearest neighbors of every point, excluding the point itself.

    Ties in distance are broken by lower point index so results do not depend
    on the KD-tree's internal order.
    """
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    if k >= n:
        raise ValueError(f"need more than {k} points for {k} neighbors, got {n}")
    tree = cKDTree(positions)
    extra = min(n, k + 2)
    dist, idx = tree.query(positions, k=extra, workers=workers)
    # drop self, reorder exact ties by index
    self_mask = idx == np.arange(n)[:, None]
    d = np.where(self_mask, np.inf, dist)
    order = np.lexsort((idx, d), axis=1)
    idx = np.take_along_axis(idx, order, axis=1)[:, :k]
    # distances recomputed from coordinates; the tree's may differ in the last ulp
    diff = positions[idx] - positions[:, None, :]
    return np.sqrt((diff * diff).sum(axis=2)), idx


def estimate_normals(cloud: PointCloud, k_neighbors: int = 10, neighbors=None) -> PointCloud:
    """PCA normals from each point plus its K nearest neighbors.

    Orientation: z >= 0; if z == 0 then y >= 0; then x >= 0.
    """
    n = len(cloud)
    if n <= k_neighbors:
        raise ValueError(f"cloud has {n} points, need more than K_neighbors={k_neighbors}")
    _, idx = neighbors if neighbors is not None else knn(cloud.positions, k_neighbors)
    nb = np.concatenate([cloud.positions[:, None, :], cloud.positions[idx]], axis=1)
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / nb.shape[1]
    spread = np.abs(centered).max(axis=(1, 2))
    bad = np.flatnonzero(spread == 0.0)
    if bad.size:
        raise ValueError(f"degenerate neighborhood at point {int(bad[0])}: all neighbors coincide")
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals = orient_normals(normals)
    return PointCloud(cloud.positions, cloud.confidence, cloud.colors, normals)


def orient_normals(normals):
    normals = np.array(normals, dtype=float)
    sign = np.sign(normals[:, 2])
    zero = sign == 0
    sign[zero] = np.sign(normals[zero, 1])
    zero = sign == 0
    sign[zero] = np.sign(normals[zero, 0])
    sign[sign == 0] = 1.0
    return normals * sign[:, None]


# ---------------------------------------------------------------- descriptors


def pair_features(p, n_p, q, n_q):
    """Darboux-frame features (alpha, phi, theta) from source ``p`` to target ``q``.

    u = n_p, v = u x d / |u x d|, w = u x v with d the unit offset p -> q;
    alpha = v . n_q, phi = u . d, theta = atan2(w . n_q, u . n_q). When d is
    parallel to n_p the frame is degenerate and v = w = 0.
    """
    diff = q - p
    dist = np.linalg.norm(diff, axis=-1, keepdims=True)
    d = diff / np.maximum(dist, 1e-300)
    u = n_p
    v = np.cross(u, d)
    vn = np.linalg.norm(v, axis=-1, keepdims=True)
    v = np.where(vn > 1e-12, v / np.where(vn > 1e-12, vn, 1.0), 0.0)
    w = np.cross(u, v)
    alpha = (v * n_q).sum(-1)
    phi = (u * d).sum(-1)
    theta = np.arctan2((w * n_q).sum(-1), (u * n_q).sum(-1))
    return alpha, phi, theta


def _bin(values, lo, hi):
    b = np.floor((values - lo) / (hi - lo) * N_BINS).astype(np.int64)
    return np.clip(b, 0, N_BINS - 1)


def _spfh_from_neighbors(positions, normals, idx, src=None):
    if normals is None:
        raise ValueError("SPFH needs normals; run estimate_normals first")
    n, k = idx.shape
    src = np.arange(n) if src is None else np.asarray(src)
    p = np.repeat(positions[src][:, None, :], k, axis=1)
    n_p = np.repeat(normals[src][:, None, :], k, axis=1)
    q = positions[idx]
    n_q = normals[idx]
    alpha, phi, theta = pair_features(p, n_p, q, n_q)
    valid = np.linalg.norm(q - p, axis=-1) > 0.0
    counts = valid.sum(axis=1)
    hist = np.zeros((n, 3 * N_BINS))
    rows = np.repeat(np.arange(n)[:, None], k, axis=1)
    for block, (vals, lo, hi) in enumerate(((alpha, -1.0, 1.0), (phi, -1.0, 1.0), (theta, -math.pi, math.pi))):
        cols = block * N_BINS + _bin(vals, lo, hi)
        np.add.at(hist, (rows[valid], cols[valid]), 1.0)
    nz = counts > 0
    hist[nz] /= counts[nz, None]
    return hist


def spfh(index: int, cloud: PointCloud, k_neighbors: int = 10) -> np.ndarray:
    """33-bin simplified histogram of one point against its K nearest neighbors."""
    if cloud.normals is None:
        raise ValueError("SPFH needs normals; run estimate_normals first")
    _, idx = knn(cloud.positions, k_neighbors)
    return _spfh_from_neighbors(cloud.positions, cloud.normals, idx[index:index + 1], [index])[0]


def spfh_all(cloud: PointCloud, k_neighbors: int = 10) -> np.ndarray:
    _, idx = knn(cloud.positions, k_neighbors)
    return _spfh_from_neighbors(cloud.positions, cloud.normals, idx)


def fpfh(cloud: PointCloud, k_neighbors: int = 10, neighbors=None) -> np.ndarray:
    """FPFH(p) = SPFH(p) + 1/K * sum_q SPFH(q) / d(p, q) over the K nearest neighbors.

    ``neighbors`` may carry a precomputed ``knn(positions, k_neighbors)`` result.
    """
    if cloud.normals is None:
        raise ValueError("FPFH needs normals; run estimate_normals first")
    dist, idx = neighbors if neighbors is not None else knn(cloud.positions, k_neighbors)
    s = _spfh_from_neighbors(cloud.positions, cloud.normals, idx)
    wts = 1.0 / np.maximum(dist, DIST_FLOOR)
    return s + np.einsum("nk,nkb->nb", wts, s[idx]) / k_neighbors


def normalize_descriptors(desc, mode: str = "l1"):
    desc = np.asarray(desc, dtype=float)
    if mode == "l1":
        tot = desc.sum(axis=-1, keepdims=True)
        return np.where(tot > 0, desc / np.where(tot > 0, tot, 1.0), 0.0)
    if mode == "minmax":
        lo, hi = desc.min(axis=0), desc.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        return (desc - lo) / span
    raise ValueError(f"unknown normalization {mode!r}")


def score(confidence, descriptor, mode: str = "l1"):
    """Confidence times the L2 norm of the normalized descriptor (vectorized over points)."""
    d = normalize_descriptors(descriptor, mode)
    return np.asarray(confidence, dtype=float) * np.linalg.norm(d, axis=-1)


# ---------------------------------------------------------------- voxel grid and sampling


@dataclass
class SampleGrid:
    aabb_min: np.ndarray
    aabb_max: np.ndarray
    voxel_length: float
    dims: tuple[int, int, int]
    n: int
    point_voxel: np.ndarray = field(repr=False)   # flat voxel index per point

    def voxel_index(self, positions, clamp=True):
        """Integer (i, j, k) voxel coordinates; boundary points go to the higher index."""
        rel = (np.asarray(positions, dtype=float) - self.aabb_min) / self.voxel_length
        ijk = np.floor(rel).astype(np.int64)
        if clamp:
            ijk = np.clip(ijk, 0, np.array(self.dims) - 1)
        return ijk

    def flat(self, ijk):
        ijk = np.asarray(ijk, dtype=np.int64)
        return np.ravel_multi_index(tuple(np.moveaxis(ijk, -1, 0)), self.dims)

    def unflat(self, flat):
        return np.stack(np.unravel_index(np.asarray(flat), self.dims), axis=-1)

    def voxel_center(self, ijk):
        return self.aabb_min + (np.asarray(ijk, dtype=float) + 0.5) * self.voxel_length

    def members(self) -> dict[int, np.ndarray]:
        order = np.argsort(self.point_voxel, kind="stable")
        vox = self.point_voxel[order]
        uniq, start = np.unique(vox, return_index=True)
        groups = np.split(order, start[1:])
        return {int(v): g for v, g in zip(uniq, groups)}


def build_grid(cloud: PointCloud | np.ndarray, n: int = 80) -> SampleGrid:
    pos = np.asarray(getattr(cloud, "positions", cloud), dtype=float)
    if len(pos) == 0:
        raise ValueError("cannot build a grid on an empty cloud")
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    edges = hi - lo
    positive = edges[edges > 0]
    if positive.size == 0:
        grid = SampleGrid(lo, hi, 1.0, (1, 1, 1), n, np.zeros(len(pos), dtype=np.int64))
        return grid
    length = float(positive.min()) / n
    dims = tuple(int(max(1, math.ceil(e / length - 1e-9))) for e in edges)
    grid = SampleGrid(lo, hi, length, dims, n, np.zeros(len(pos), dtype=np.int64))
    grid.point_voxel = grid.flat(grid.voxel_index(pos))
    return grid


def top_k_per_voxel(point_voxel, scores, k: int) -> np.ndarray:
    """Indices (ascending) of the k best-scoring points in each voxel; ties -> lower index."""
    point_voxel = np.asarray(point_voxel)
    scores = np.asarray(scores, dtype=float)
    idx = np.arange(len(scores))
    order = np.lexsort((idx, -scores, point_voxel))
    vox = point_voxel[order]
    first = np.r_[True, vox[1:] != vox[:-1]]
    group_start = np.maximum.accumulate(np.where(first, np.arange(len(vox)), 0))
    rank = np.arange(len(vox)) - group_start
    return np.sort(order[rank < k])


@dataclass
class SampleResult:
    cloud: PointCloud
    indices: np.ndarray
    grid: SampleGrid
    scores: np.ndarray
    descriptors: np.ndarray


def sample(cloud: PointCloud, config: SamplingConfig = SamplingConfig()) -> SampleResult:
    """Estimate normals if needed, score every point and keep the top k per voxel."""
    nb = knn(cloud.positions, config.k_neighbors, config.workers)
    work = cloud if cloud.normals is not None else estimate_normals(cloud, config.k_neighbors, nb)
    desc = fpfh(work, config.k_neighbors, nb)
    sc = score(work.confidence, desc, config.normalization)
    grid = build_grid(work, config.n)
    keep = top_k_per_voxel(grid.point_voxel, sc, config.k)
    return SampleResult(cloud.take(keep), keep, grid, sc, desc)
