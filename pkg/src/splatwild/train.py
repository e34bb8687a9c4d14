"""Masked Gaussian-splat optimization loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .masking import dssim_map
from .renderer import backward_from_pixels, l1_image_grad, render_set
from .scene import Frame, GaussianSet
from . import voxelguide as vg

logger = logging.getLogger(__name__)

MaskProvider = Callable[[int, int, np.ndarray], np.ndarray]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 7000
    lr_centers: float = 0.004
    lr_log_scales: float = 0.005
    lr_quats: float = 0.001
    lr_opacity_logits: float = 0.05
    lr_colors: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    lambda_dssim: float = 0.2
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0
    log_dssim: bool = True

    def lr(self, name: str) -> float:
        return getattr(self, "lr_" + name)


@dataclass
class LogRow:
    iteration: int
    frame: int
    l1: float
    dssim: float
    n_gaussians: int
    masked_fraction: float


@dataclass
class TrainResult:
    gaussians: GaussianSet
    log: list[LogRow]
    guide: Optional[vg.GuideGrid] = None
    guide_events: list[tuple[int, int, int, list[int]]] = field(default_factory=list)

    def write_log(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["iteration", "l1", "dssim", "n_gaussians", "masked_fraction"])
            for r in self.log:
                w.writerow([r.iteration, repr(r.l1), repr(r.dssim), r.n_gaussians, repr(r.masked_fraction)])


class Adam:
    """Adam over the GaussianSet parameter groups, remappable by uid."""

    def __init__(self, gs: GaussianSet, config: TrainConfig):
        self.config = config
        self.step = 0
        self.m = {n: np.zeros_like(getattr(gs, n)) for n in GaussianSet.PARAMS}
        self.v = {n: np.zeros_like(getattr(gs, n)) for n in GaussianSet.PARAMS}
        self.uids = gs.uids.copy()

    def update(self, gs: GaussianSet, grads: dict):
        c = self.config
        self.step += 1
        b1c = 1.0 - c.beta1 ** self.step
        b2c = 1.0 - c.beta2 ** self.step
        for n in GaussianSet.PARAMS:
            g = grads[n]
            m = self.m[n]
            v = self.v[n]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p = getattr(gs, n)
            p -= c.lr(n) * (m / b1c) / (np.sqrt(v / b2c) + c.eps)
        gs.quats /= np.linalg.norm(gs.quats, axis=1, keepdims=True)
        np.clip(gs.colors, 0.0, 1.0, out=gs.colors)

    def remap(self, gs: GaussianSet):
        pos = {int(u): i for i, u in enumerate(self.uids)}
        src = np.array([pos.get(int(u), -1) for u in gs.uids], dtype=np.int64)
        have = src >= 0
        for n in GaussianSet.PARAMS:
            for store in (self.m, self.v):
                old = store[n]
                new = np.zeros((len(gs),) + old.shape[1:])
                new[have] = old[src[have]]
                store[n] = new
        self.uids = gs.uids.copy()


def _as_set(init) -> GaussianSet:
    if isinstance(init, GaussianSet):
        return init.copy()
    return GaussianSet.from_gaussians(list(init))


def train(init, frames: Sequence[Frame], config: TrainConfig,
          mask_provider: Optional[MaskProvider] = None,
          guide: Optional[vg.GuideGrid] = None,
          guide_config: Optional[vg.GuideConfig] = None,
          callback: Optional[Callable[[int, GaussianSet], None]] = None) -> TrainResult:
    """Round-robin over frames; one Adam step per iteration on the masked L1 loss.

    ``mask_provider(iteration, frame_index, render)`` returns per-pixel loss
    weights (True keeps a pixel). With ``guide`` the voxel hooks run every
    iteration (flag, decay, accumulate) and every ``densify_interval``
    iterations (densify, prune).
    """
    if not frames:
        raise ValueError("training needs at least one frame")
    gs = _as_set(init)
    if config.iterations == 0:
        return TrainResult(gs, [], guide)
    bg = np.asarray(config.background, dtype=float)
    gcfg = guide_config or vg.GuideConfig()
    opt = Adam(gs, config)
    grad_dir = np.zeros((len(gs), 3))
    grad_count = np.zeros(len(gs))
    next_uid = int(gs.uids.max()) + 1 if len(gs) else 0
    log: list[LogRow] = []
    events = []
    h, w = frames[0].image.shape[:2]

    for it in range(config.iterations):
        fi = it % len(frames)
        frame = frames[fi]
        out = render_set(gs, frame.camera, bg, record=True)
        if mask_provider is None:
            keep = np.ones((h, w), dtype=bool)
        else:
            keep = np.asarray(mask_provider(it, fi, out.image), dtype=bool)
        n_keep = keep.sum()
        per_px = np.abs(out.image - frame.image).mean(axis=2)
        l1 = float(per_px[keep].sum() / n_keep) if n_keep else 0.0
        dssim = 0.0
        if config.log_dssim and n_keep and min(h, w) >= 11:
            dssim = float(dssim_map(out.image, frame.image)[keep].sum() / n_keep)
        if not np.isfinite(l1) or not np.isfinite(dssim):
            bad = ~np.isfinite(gs.centers).all(axis=1) | ~np.isfinite(gs.log_scales).all(axis=1)
            raise TrainingError(
                f"non-finite loss at iteration {it} (frame {fi}): l1={l1}, dssim={dssim}, "
                f"{int(bad.sum())} Gaussian(s) with non-finite parameters, "
                f"max |log_scale|={np.nanmax(np.abs(gs.log_scales)) if len(gs) else 0}"
            )
        log.append(LogRow(it, fi, l1, dssim, len(gs), float(1.0 - keep.mean())))

        grads = backward_from_pixels(gs, frame.camera, out.per_pixel_contrib, l1_image_grad(out.image, frame.image, keep))
        if guide is not None:
            vg.apply_decay(grads, gs, guide, gcfg)
            vg.accumulate(gs, grad_dir, grad_count, grads["centers"])
        opt.update(gs, grads)

        if guide is not None and (it + 1) % gcfg.densify_interval == 0:
            vg.flag_unconstrained(gs, guide, gcfg)
            gs, rep, next_uid = vg.densify(gs, guide, gcfg, grad_dir, next_uid)
            gs, dead = vg.prune_voxels(gs, guide, gcfg)
            guide.check_consistency(gs)
            opt.remap(gs)
            grad_dir = np.zeros((len(gs), 3))
            grad_count = np.zeros(len(gs))
            events.append((it + 1, rep.cloned, rep.split, dead))
        if callback is not None:
            callback(it, gs)

    return TrainResult(gs, log, guide, events)


def render_all(gs: GaussianSet, frames: Sequence[Frame], background) -> list[np.ndarray]:
    return [render_set(gs, f.camera, background).image for f in frames]
