"""Voxel-guided Gaussian optimization.

Every Gaussian belongs to one voxel of the sampling grid. A Gaussian whose
center strays more than ``tau`` voxel lengths from its voxel center, or whose
largest scale exceeds that limit, is flagged unconstrained. Gradients of
center-flagged Gaussians decay exponentially with the excess distance.
Unconstrained Gaussians with a large accumulated positional gradient that
points into an empty voxel are cloned or split into it, and voxels holding
too few or too transparent Gaussians are removed along with their members.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .pointcloud import SampleGrid
from .scene import GaussianSet, quaternion_to_matrix, sigmoid

logger = logging.getLogger(__name__)


@dataclass
class GuideConfig:
    tau: float = 3.5
    gamma1: float = 0.003
    gamma2: int = 2
    gamma3: float = 0.075
    beta: float = 1.0
    densify_interval: int = 100
    datum: str = "center"   # "center": distance from voxel center; "face": minus half a voxel length

    def __post_init__(self):
        if self.tau <= 0 or self.gamma1 <= 0 or self.gamma2 <= 0 or self.beta <= 0:
            raise ValueError("tau, gamma1, gamma2 and beta must be positive")
        if not 0.0 <= self.gamma3 <= 1.0:
            raise ValueError("gamma3 must lie in [0, 1]")
        if self.datum not in ("center", "face"):
            raise ValueError(f"unknown datum {self.datum!r}")


@dataclass
class GuideVoxel:
    index: tuple[int, int, int]
    center: np.ndarray
    length: float
    members: set[int] = field(default_factory=set)
    alive: bool = False


class GuideGrid:
    """Voxel occupancy and membership (by Gaussian uid) on a sampling grid."""

    def __init__(self, grid: SampleGrid):
        self.grid = grid
        self.length = grid.voxel_length
        self.voxels: dict[int, GuideVoxel] = {}

    def voxel(self, flat: int) -> GuideVoxel:
        v = self.voxels.get(flat)
        if v is None:
            ijk = tuple(int(c) for c in self.grid.unflat(flat))
            v = GuideVoxel(ijk, self.grid.voxel_center(ijk), self.length)
            self.voxels[flat] = v
        return v

    def is_empty(self, flat: int) -> bool:
        v = self.voxels.get(flat)
        return v is None or not v.alive

    def in_grid(self, ijk) -> bool:
        ijk = np.asarray(ijk)
        return bool(np.all(ijk >= 0) and np.all(ijk < np.array(self.grid.dims)))

    def alive_voxels(self) -> list[int]:
        return sorted(k for k, v in self.voxels.items() if v.alive)

    def centers_of(self, voxel_ids) -> np.ndarray:
        return self.grid.voxel_center(self.grid.unflat(np.asarray(voxel_ids)))

    def add_member(self, flat: int, uid: int):
        v = self.voxel(flat)
        v.members.add(int(uid))
        v.alive = True

    def snapshot(self, gs: GaussianSet) -> list[tuple[tuple[int, int, int], int, float, bool]]:
        """(voxel index, member count, mean opacity, alive) for every known voxel."""
        op = dict(zip(gs.uids.tolist(), gs.opacities.tolist()))
        rows = []
        for flat in sorted(self.voxels):
            v = self.voxels[flat]
            vals = [op[u] for u in v.members if u in op]
            rows.append((v.index, len(v.members), float(np.mean(vals)) if vals else 0.0, v.alive))
        return rows

    def check_consistency(self, gs: GaussianSet):
        """Raise if member sets and the Gaussians' voxel ids disagree."""
        from_members = {}
        for flat, v in self.voxels.items():
            if v.members and not v.alive:
                raise AssertionError(f"dead voxel {v.index} still has members")
            for u in v.members:
                if u in from_members:
                    raise AssertionError(f"Gaussian {u} is in two voxels")
                from_members[u] = flat
        from_ids = {int(u): int(f) for u, f in zip(gs.uids, gs.voxel_ids) if f >= 0}
        if from_members != from_ids:
            raise AssertionError("voxel membership and Gaussian voxel ids disagree")


def assign_initial(gs: GaussianSet, grid: SampleGrid) -> GuideGrid:
    """Place every Gaussian in the voxel containing its center (sets ``gs.voxel_ids``)."""
    guide = GuideGrid(grid)
    raw = grid.voxel_index(gs.centers, clamp=False)
    outside = np.any((raw < 0) | (raw >= np.array(grid.dims)), axis=1)
    if np.any(outside):
        logger.warning("%d Gaussian(s) outside the grid; assigned to the nearest voxel", int(outside.sum()))
    flat = grid.flat(np.clip(raw, 0, np.array(grid.dims) - 1))
    gs.voxel_ids[:] = flat
    for u, f in zip(gs.uids, flat):
        guide.add_member(int(f), int(u))
    return guide


def _distance(centers, voxel_centers, length, datum):
    d = np.linalg.norm(np.asarray(centers) - np.asarray(voxel_centers), axis=-1)
    if datum == "face":
        d = np.maximum(d - 0.5 * length, 0.0)
    return d


def check_constraint(center, log_scale, voxel: GuideVoxel, tau: float, datum: str = "center") -> bool:
    dist = _distance(center, voxel.center, voxel.length, datum)
    limit = tau * voxel.length
    return bool(dist > limit or np.max(np.exp(log_scale)) > limit)


def flag_unconstrained(gs: GaussianSet, guide: GuideGrid, config: GuideConfig):
    """Vectorized constraint check; returns (unconstrained, center_violation, distance)."""
    guided = gs.voxel_ids >= 0
    dist = np.zeros(len(gs))
    if np.any(guided):
        vc = guide.centers_of(gs.voxel_ids[guided])
        dist[guided] = _distance(gs.centers[guided], vc, guide.length, config.datum)
    limit = config.tau * guide.length
    center_bad = guided & (dist > limit)
    scale_bad = guided & (gs.scales.max(axis=1) > limit)
    gs.unconstrained = center_bad | scale_bad
    return gs.unconstrained, center_bad, dist


def decay_multiplier(distance, length: float, config: GuideConfig):
    """exp(-beta * (distance - tau * length) / length) beyond the limit, 1 inside."""
    excess = (np.asarray(distance, dtype=float) - config.tau * length) / length
    return np.where(excess > 0, np.exp(-config.beta * np.maximum(excess, 0.0)), 1.0)


def decay_gradient(grad, center, voxel: GuideVoxel, config: GuideConfig):
    dist = _distance(center, voxel.center, voxel.length, config.datum)
    if dist <= config.tau * voxel.length:
        return grad
    return grad * float(decay_multiplier(dist, voxel.length, config))


def apply_decay(grads: dict, gs: GaussianSet, guide: GuideGrid, config: GuideConfig) -> np.ndarray:
    """Flag Gaussians and scale every gradient of center-flagged ones in place."""
    _, center_bad, dist = flag_unconstrained(gs, guide, config)
    mult = np.ones(len(gs))
    mult[center_bad] = decay_multiplier(dist[center_bad], guide.length, config)
    if np.any(center_bad):
        for name, g in grads.items():
            g[center_bad] = g[center_bad] * mult[center_bad].reshape((-1,) + (1,) * (g.ndim - 1))
    return mult


def accumulate(gs: GaussianSet, grad_dir: np.ndarray, grad_count: np.ndarray, center_grads: np.ndarray):
    """Running mean of positional gradient magnitudes plus the summed direction."""
    mag = np.linalg.norm(center_grads, axis=1)
    grad_count += 1
    gs.grad_accum += (mag - gs.grad_accum) / grad_count
    grad_dir += center_grads


def exit_neighbor(center, direction, guide: GuideGrid):
    """Voxel entered when leaving the voxel that contains ``center`` along ``direction``."""
    grid = guide.grid
    ijk = grid.voxel_index(center[None, :])[0]
    lo = grid.aabb_min + ijk * grid.voxel_length
    hi = lo + grid.voxel_length
    t = np.full(3, np.inf)
    pos = direction > 0
    neg = direction < 0
    t[pos] = (hi[pos] - center[pos]) / direction[pos]
    t[neg] = (lo[neg] - center[neg]) / direction[neg]
    if not np.isfinite(t).any():
        return None
    tmin = t.min()
    step = np.where(np.isclose(t, tmin, rtol=1e-12, atol=0.0), np.sign(direction), 0).astype(np.int64)
    nxt = ijk + step
    if not guide.in_grid(nxt):
        return None
    return int(grid.flat(nxt))


@dataclass
class DensifyReport:
    cloned: int = 0
    split: int = 0
    new_voxels: list[int] = field(default_factory=list)


def densify(gs: GaussianSet, guide: GuideGrid, config: GuideConfig, grad_dir: np.ndarray,
            next_uid: int) -> tuple[GaussianSet, DensifyReport, int]:
    """Clone or split unconstrained Gaussians whose gradient heads into an empty voxel.

    The Gaussian moves against its gradient, so the followed direction is the
    negative accumulated gradient. Returns the new set (accumulators reset),
    a report and the next free uid.
    """
    report = DensifyReport()
    length = guide.length
    keep = np.ones(len(gs), dtype=bool)
    children = []
    for i in np.flatnonzero(gs.unconstrained & (gs.grad_accum >= config.gamma1)):
        d = -grad_dir[i]
        norm = np.linalg.norm(d)
        if norm == 0:
            continue
        d = d / norm
        target = exit_neighbor(gs.centers[i], d, guide)
        if target is None or not guide.is_empty(target):
            continue
        parent = gs.subset([i])
        if gs.scales[i].max() < 0.5 * length:
            child = parent.copy()
            child.centers = child.centers + length * d
            kids = [child]
            report.cloned += 1
        else:
            rot = quaternion_to_matrix(gs.quats[i] / np.linalg.norm(gs.quats[i]))
            axis = int(np.argmax(gs.scales[i]))
            offset = 0.8 * gs.scales[i, axis] * rot[:, axis]
            kids = []
            for sgn in (1.0, -1.0):
                c = parent.copy()
                c.centers = c.centers + sgn * offset
                c.log_scales = c.log_scales - np.log(1.6)
                kids.append(c)
            keep[i] = False
            report.split += 1
        landed = False
        for c in kids:
            c.uids = np.array([next_uid])
            next_uid += 1
            inside = guide.grid.voxel_index(c.centers, clamp=False)[0]
            if guide.in_grid(inside) and int(guide.grid.flat(inside)) == target:
                c.voxel_ids = np.array([target])
                landed = True
            c.unconstrained[:] = False
            children.append(c)
        if landed:
            report.new_voxels.append(target)
            guide.voxel(target).alive = True

    removed = gs.uids[~keep]
    for u, f in zip(removed, gs.voxel_ids[~keep]):
        if f >= 0:
            guide.voxel(int(f)).members.discard(int(u))
    out = gs.subset(keep)
    for c in children:
        out = out.concat(c)
        if c.voxel_ids[0] >= 0:
            guide.add_member(int(c.voxel_ids[0]), int(c.uids[0]))
    out.grad_accum[:] = 0.0
    return out, report, next_uid


def prune_voxels(gs: GaussianSet, guide: GuideGrid, config: GuideConfig) -> tuple[GaussianSet, list[int]]:
    """Kill voxels with fewer than gamma2 members or mean opacity below gamma3."""
    op = dict(zip(gs.uids.tolist(), sigmoid(gs.opacity_logits).tolist()))
    doomed_voxels = []
    doomed_uids: set[int] = set()
    for flat in guide.alive_voxels():
        v = guide.voxels[flat]
        members = [u for u in v.members if u in op]
        mean_op = float(np.mean([op[u] for u in members])) if members else 0.0
        if len(members) < config.gamma2 or mean_op < config.gamma3:
            doomed_voxels.append(flat)
            doomed_uids.update(v.members)
            v.members = set()
            v.alive = False
    if not doomed_uids:
        return gs, doomed_voxels
    keep = ~np.isin(gs.uids, np.fromiter(doomed_uids, dtype=np.int64, count=len(doomed_uids)))
    return gs.subset(keep), doomed_voxels
