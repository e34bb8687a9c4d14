"""Synthetic benchmark scenes: dynamic drone-style sequences, a two-voxel
limited-view scene and a dense stereo-like point cloud."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .pointcloud import PointCloud
from .scene import DistractorScript, Gaussian3D, GaussianSet, OrthoCamera, SyntheticSceneSpec, logit


@dataclass
class DistractorParams:
    """One scripted car: straight drive from ``start`` to ``end`` (world xy).

    With ``park_frame`` set the car stops there and stays for the rest of
    the sequence.
    """

    name: str
    color: tuple[float, float, float]
    start: tuple[float, float]
    end: tuple[float, float]
    length: float = 0.8
    width: float = 0.45
    park_frame: Optional[int] = None


@dataclass
class SequenceParams:
    n_frames: int = 10
    width: int = 48
    height: int = 48
    pixels_per_unit: float = 10.0
    tiles_x: int = 6
    tiles_y: int = 5
    tile_size: float = 0.65
    pan: float = 0.6            # total camera travel along x; the ground stays in view
    ground_z: float = 1.0
    distractor_z: float = 0.5
    n_distractors: int = 2
    travel: float = 0.35        # fraction of the ground half-width each car drives past the center
    stationary_half: bool = False   # first distractor parks for the second half of the sequence
    seed: int = 0
    color_noise: float = 0.0
    distractors: list[DistractorParams] = field(default_factory=list)


def tiled_ground(p: SequenceParams, rng) -> tuple[list[Gaussian3D], list[int]]:
    """Colored tiles on a ground plane; each tile is one segmentable object of 2x2 Gaussians."""
    gaussians, ids = [], []
    x0 = -p.tiles_x * p.tile_size / 2
    y0 = -p.tiles_y * p.tile_size / 2
    obj = 1
    for ty in range(p.tiles_y):
        for tx in range(p.tiles_x):
            base = rng.uniform(0.15, 0.85, 3)
            for sy in range(2):
                for sx in range(2):
                    cx = x0 + (tx + 0.25 + 0.5 * sx) * p.tile_size
                    cy = y0 + (ty + 0.25 + 0.5 * sy) * p.tile_size
                    color = np.clip(base + rng.normal(0, 0.04, 3), 0, 1)
                    gaussians.append(Gaussian3D(
                        center=(cx, cy, p.ground_z),
                        log_scale=np.log([0.2 * p.tile_size, 0.2 * p.tile_size, 0.05]),
                        rotation=(1, 0, 0, 0),
                        opacity_logit=float(logit(0.97)),
                        color=color,
                    ))
                    ids.append(obj)
            obj += 1
    return gaussians, ids


_CAR_COLORS = [(0.95, 0.1, 0.1), (0.1, 0.2, 0.95), (0.95, 0.9, 0.1), (0.1, 0.9, 0.3)]


def _car(color, length=0.8, width=0.45, z=0.5) -> tuple[Gaussian3D, list[Gaussian3D]]:
    """A box of small blobs so the car has crisp edges; offsets are from the car center."""
    nx = max(2, int(round(length / 0.13)))
    ny = max(2, int(round(width / 0.13)))
    sx = length / nx
    sy = width / ny
    color = np.asarray(color, dtype=float)
    blobs = []
    for iy in range(ny):
        for ix in range(nx):
            shade = 1.0 if ix >= nx // 2 else 0.8      # darker rear half
            blobs.append(Gaussian3D(
                center=((ix + 0.5) * sx - length / 2, (iy + 0.5) * sy - width / 2, z),
                log_scale=np.log([0.55 * sx, 0.55 * sy, 0.1]),
                rotation=(1, 0, 0, 0),
                opacity_logit=float(logit(0.99)),
                color=np.clip(color * shade, 0, 1),
            ))
    return blobs[0], blobs[1:]


def default_distractors(p: SequenceParams) -> list[DistractorParams]:
    """Cars crossing the view in alternating directions on separate lanes."""
    rng = np.random.default_rng(p.seed + 1)
    half_w = p.tiles_x * p.tile_size / 2
    half_h = p.tiles_y * p.tile_size / 2
    out = []
    for j in range(p.n_distractors):
        lane = (-0.5 + j * 1.1) * half_h * 0.8
        direction = 1.0 if j % 2 == 0 else -1.0
        out.append(DistractorParams(
            name=f"car{j}",
            color=_CAR_COLORS[j % len(_CAR_COLORS)],
            start=(-direction * half_w * p.travel, lane),
            end=(direction * half_w * p.travel, lane + float(rng.uniform(-0.3, 0.3))),
            park_frame=p.n_frames // 2 if (p.stationary_half and j == 0) else None,
        ))
    return out


def dynamic_sequence(p: SequenceParams = SequenceParams()) -> SyntheticSceneSpec:
    rng = np.random.default_rng(p.seed)
    static, ids = tiled_ground(p, rng)
    n = p.n_frames
    xs = np.linspace(-p.pan / 2, p.pan / 2, n)
    cams = [OrthoCamera.top_down(x, 0.0, p.pixels_per_unit, p.width, p.height) for x in xs]
    scripts = []
    for d in p.distractors or default_distractors(p):
        template, extra = _car(d.color, d.length, d.width, z=p.distractor_z)
        start = np.array([d.start[0], d.start[1], p.distractor_z])
        end = np.array([d.end[0], d.end[1], p.distractor_z])
        t = np.linspace(0.0, 1.0, n)[:, None]
        way = start + t * (end - start)
        way[:, :2] += template.center[:2]
        if d.park_frame is not None:
            way[d.park_frame:] = way[min(d.park_frame, n - 1)]
        scripts.append(DistractorScript(template, way, name=d.name, extra=extra))
    return SyntheticSceneSpec(static, scripts, n, cams, np.zeros(3), p.seed, ids, p.color_noise)


def grid_init(p: SequenceParams, spacing: float = 0.25, scale: float = 0.12, opacity: float = 0.5,
              seed: int = 0) -> GaussianSet:
    """Gray Gaussians on a jittered lattice over the ground plane (training init)."""
    rng = np.random.default_rng(seed)
    hx = p.tiles_x * p.tile_size / 2
    hy = p.tiles_y * p.tile_size / 2
    xs = np.arange(-hx + spacing / 2, hx, spacing)
    ys = np.arange(-hy + spacing / 2, hy, spacing)
    gx, gy = np.meshgrid(xs, ys)
    n = gx.size
    centers = np.c_[gx.ravel(), gy.ravel(), np.full(n, p.ground_z)]
    centers[:, :2] += rng.uniform(-0.02, 0.02, (n, 2))
    return GaussianSet(
        centers,
        np.tile(np.log([scale, scale, 0.05]), (n, 1)),
        np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        np.full(n, float(logit(opacity))),
        np.full((n, 3), 0.5),
    )


def dense_cloud(n_points: int = 480_000, seed: int = 0) -> PointCloud:
    """Stereo-like dense cloud: a noisy ground square plus a tall box, AABB roughly a unit cube."""
    rng = np.random.default_rng(seed)
    ng = int(n_points * 0.6)
    nt = n_points - ng
    ground = np.c_[rng.uniform(0, 1, (ng, 2)), rng.normal(0, 0.0008, ng)]
    face = rng.integers(0, 4, nt)
    a = rng.uniform(0.4, 0.6, nt)
    z = rng.uniform(0, 1, nt)
    x = np.where(face == 0, 0.4, np.where(face == 1, 0.6, a))
    y = np.where(face == 2, 0.4, np.where(face == 3, 0.6, a))
    tower = np.c_[x + rng.normal(0, 0.0008, nt), y + rng.normal(0, 0.0008, nt), z]
    conf = rng.uniform(0.5, 3.0, n_points)
    colors = rng.uniform(0, 1, (n_points, 3))
    return PointCloud(np.r_[ground, tower], conf, colors)


@dataclass
class TwoVoxelScene:
    frames: list
    init: GaussianSet
    grid: object          # SampleGrid with dims (2, 1, 1)


def two_voxel_scene(voxel_length: float = 0.25, n_init: int = 16, n_views: int = 3, size: int = 40,
                    pixels_per_unit: float = 12.0, lure_distance: float = 1.2, lure_scale: tuple = (0.6, 0.1),
                    lure_brightness: float = 0.25, patch_tiles: int = 4, n_stray: int = 1,
                    seed: int = 0) -> TwoVoxelScene:
    """Limited-view fixture: a 2x1x1 sampling grid whose point prior covers voxel A.

    The geometry is a textured patch over voxel A, fine enough that every
    prior Gaussian is needed to explain it. Voxel B holds only ``n_stray``
    outlier points of the prior. An elongated lure beyond B, at
    ``lure_distance`` from B's center, drags unguided strays far from their
    voxel. The lure is faint, so pulling a Gaussian off the patch does not pay.
    """
    from .pointcloud import build_grid
    from .scene import generate_synthetic_sequence

    rng = np.random.default_rng(seed)
    l = voxel_length
    z = 1.0
    corners = np.array([[0.0, 0.0, z - l / 2], [2 * l, l, z + l / 2]])
    grid = build_grid(corners, 1)
    center_a = grid.voxel_center((0, 0, 0))
    center_b = grid.voxel_center((1, 0, 0))

    p = SequenceParams(tiles_x=patch_tiles, tiles_y=patch_tiles, tile_size=l / patch_tiles, ground_z=z, seed=seed)
    ground, ids = tiled_ground(p, rng)
    for g in ground:
        g.center[:2] += center_a[:2]
    lure = center_b + np.array([lure_distance, 0.0, 0.0])
    ground.append(Gaussian3D(center=lure, log_scale=np.log([*lure_scale, 0.05]), rotation=(1, 0, 0, 0),
                             opacity_logit=float(logit(0.97)), color=(lure_brightness,) * 3))
    ids.append(max(ids) + 1)
    cams = [OrthoCamera.top_down(center_b[0] + dx, center_a[1], pixels_per_unit, size, size)
            for dx in np.linspace(-0.1, 0.1, n_views)]
    spec = SyntheticSceneSpec(ground, [], n_views, cams, np.zeros(3), seed, ids)
    frames = generate_synthetic_sequence(spec)

    pts = center_a + rng.uniform(-0.45 * l, 0.45 * l, (n_init, 3)) * np.array([1, 1, 0])
    strays = center_b + rng.uniform(-0.3 * l, 0.3 * l, (n_stray, 3)) * np.array([1, 1, 0])
    pts = np.r_[pts, strays]
    n = len(pts)
    init = GaussianSet(
        pts,
        np.tile(np.log([0.2 * l, 0.2 * l, 0.1 * l]), (n, 1)),
        np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        np.full(n, float(logit(0.5))),
        rng.uniform(0.3, 0.7, (n, 3)),
    )
    return TwoVoxelScene(frames, init, grid)
