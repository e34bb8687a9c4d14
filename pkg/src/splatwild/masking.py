"""Adaptive local-global distractor masking.

Per training frame: L1 and D-SSIM residuals are min-max normalized, mixed,
averaged per segmented object and compared against a threshold built from
the frame's residual statistics. The local threshold is relaxed early in
training; a stricter global threshold nominates objects for tracking, and the
tracked masks accumulate into per-frame global sets that never shrink.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import correlate1d

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


class ResidualKind(enum.Enum):
    L1 = "l1"
    DSSIM = "dssim"
    NORMALIZED_L1 = "normalized_l1"
    NORMALIZED_DSSIM = "normalized_dssim"
    COMBINED = "combined"


_NORMALIZED = {ResidualKind.NORMALIZED_L1, ResidualKind.NORMALIZED_DSSIM, ResidualKind.COMBINED}


@dataclass
class ResidualMap:
    values: np.ndarray
    kind: ResidualKind

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.kind in _NORMALIZED and self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ValueError(f"{self.kind.value} residuals must lie in [0, 1]")


@dataclass
class ObjectResidualTable:
    ids: np.ndarray
    mean_residual: np.ndarray
    area: np.ndarray

    def as_dict(self) -> dict[int, float]:
        return {int(i): float(r) for i, r in zip(self.ids, self.mean_residual)}


@dataclass
class ResidualStats:
    expectation: float
    variance: float


@dataclass
class MaskingConfig:
    lambda_dssim: float = 0.2
    lambda_local: float = 0.4
    lambda_global: float = 2.8
    t_max: int = 7000
    activation_iter: int = 500
    stats_mode: str = "pixel"      # "pixel" (printed formulas) or "object"
    spread: str = "variance"       # "variance" (printed formulas) or "std"
    min_track_iou: float = 0.5
    use_global: bool = True

    def validate(self):
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ValueError("lambda_dssim must lie in [0, 1]")
        if self.lambda_global <= 1.0 + self.lambda_local:
            raise ValueError(
                f"lambda_global ({self.lambda_global}) must exceed 1 + lambda_local ({1 + self.lambda_local})"
            )
        if self.stats_mode not in ("pixel", "object"):
            raise ValueError(f"unknown stats_mode {self.stats_mode!r}")
        if self.spread not in ("variance", "std"):
            raise ValueError(f"unknown spread {self.spread!r}")


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def _blur(img, w):
    return correlate1d(correlate1d(img, w, axis=0, mode="reflect"), w, axis=1, mode="reflect")


def to_gray(img):
    img = np.asarray(img, dtype=float)
    return img.mean(axis=2) if img.ndim == 3 else img


def ssim_map(a, b) -> np.ndarray:
    """Per-pixel SSIM of the channel-mean luminance, 11x11 Gaussian window (sigma 1.5).

    Borders use symmetric reflection so constant images stay constant.
    """
    _check_pair(a, b)
    x, y = to_gray(a), to_gray(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    w = gaussian_window()
    mu_x, mu_y = _blur(x, w), _blur(y, w)
    sxx = _blur(x * x, w) - mu_x ** 2
    syy = _blur(y * y, w) - mu_y ** 2
    sxy = _blur(x * y, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + C1) * (2 * sxy + C2)
    den = (mu_x ** 2 + mu_y ** 2 + C1) * (sxx + syy + C2)
    return num / den


def dssim_map(a, b) -> np.ndarray:
    return np.clip((1.0 - ssim_map(a, b)) / 2.0, 0.0, 1.0)


def l1_residual(render, gt) -> ResidualMap:
    _check_pair(render, gt)
    return ResidualMap(np.abs(np.asarray(render, float) - np.asarray(gt, float)).mean(axis=2), ResidualKind.L1)


def dssim_residual(render, gt) -> ResidualMap:
    return ResidualMap(dssim_map(render, gt), ResidualKind.DSSIM)


def normalize(rmap: ResidualMap) -> ResidualMap:
    """Per-frame min-max scaling; a constant map becomes all zeros."""
    kind = {
        ResidualKind.L1: ResidualKind.NORMALIZED_L1,
        ResidualKind.DSSIM: ResidualKind.NORMALIZED_DSSIM,
        ResidualKind.NORMALIZED_L1: ResidualKind.NORMALIZED_L1,
        ResidualKind.NORMALIZED_DSSIM: ResidualKind.NORMALIZED_DSSIM,
    }.get(rmap.kind)
    if kind is None:
        raise ValueError(f"cannot normalize a {rmap.kind.value} map")
    v = rmap.values
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return ResidualMap(np.zeros_like(v), kind)
    return ResidualMap(np.clip((v - lo) / (hi - lo), 0.0, 1.0), kind)


def combine(norm_l1: ResidualMap, norm_dssim: ResidualMap, lambda_dssim: float) -> ResidualMap:
    if not 0.0 <= lambda_dssim <= 1.0:
        raise ValueError(f"lambda_dssim {lambda_dssim} outside [0, 1]")
    if norm_l1.kind is not ResidualKind.NORMALIZED_L1 or norm_dssim.kind is not ResidualKind.NORMALIZED_DSSIM:
        raise ValueError("combine expects normalized L1 and D-SSIM maps")
    _check_pair(norm_l1.values, norm_dssim.values)
    if lambda_dssim == 0.0:
        values = norm_l1.values.copy()
    elif lambda_dssim == 1.0:
        values = norm_dssim.values.copy()
    else:
        values = (1.0 - lambda_dssim) * norm_l1.values + lambda_dssim * norm_dssim.values
    return ResidualMap(np.clip(values, 0.0, 1.0), ResidualKind.COMBINED)


def combined_residual(render, gt, lambda_dssim: float) -> ResidualMap:
    return combine(normalize(l1_residual(render, gt)), normalize(dssim_residual(render, gt)), lambda_dssim)


def object_average(residual: ResidualMap, seg) -> ObjectResidualTable:
    ids_map = np.asarray(getattr(seg, "ids", seg))
    if ids_map.shape != residual.values.shape:
        raise ValueError(f"segmentation {ids_map.shape} does not match residual {residual.values.shape}")
    ids, inv = np.unique(ids_map.ravel(), return_inverse=True)
    area = np.bincount(inv, minlength=len(ids))
    sums = np.bincount(inv, weights=residual.values.ravel(), minlength=len(ids))
    return ObjectResidualTable(ids.astype(np.int64), sums / area, area.astype(np.int64))


def stats(residual: ResidualMap | np.ndarray) -> ResidualStats:
    v = np.asarray(getattr(residual, "values", residual), dtype=float).ravel()
    if v.size == 0:
        raise ValueError("statistics of an empty residual map")
    e = float(v.mean())
    var = float(np.mean((v - e) ** 2))
    return ResidualStats(e, var)


def _spread(s: ResidualStats, spread: str) -> float:
    return s.variance if spread == "variance" else float(np.sqrt(s.variance))


def local_threshold(s: ResidualStats, t: float, t_max: float, lambda_local: float, spread: str = "variance") -> float:
    if t > t_max:
        raise ValueError(f"iteration {t} exceeds T_max {t_max}")
    if t < 0:
        raise ValueError("iteration must be nonnegative")
    return s.expectation + _spread(s, spread) * (1.0 + lambda_local * (t_max - t) / t_max)


def local_masks(table: ObjectResidualTable, threshold: float) -> set[int]:
    return {int(i) for i, r in zip(table.ids, table.mean_residual) if r > threshold}


def global_threshold(s: ResidualStats, lambda_global: float, lambda_local: Optional[float] = None,
                     spread: str = "variance") -> float:
    if lambda_local is not None and lambda_global <= 1.0 + lambda_local:
        raise ValueError(f"lambda_global ({lambda_global}) must exceed 1 + lambda_local ({1 + lambda_local})")
    return s.expectation + lambda_global * _spread(s, spread)


def prompts_from_mask(mask) -> list[tuple[int, int]]:
    """Five point prompts ``(x, y)``: snapped centroid, then left, right, top, bottom extremes.

    Among the pixels on an extreme row/column the one closest to the centroid
    wins; remaining ties go to row-major order.
    """
    m = np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(m)
    if xs.size == 0:
        raise ValueError("cannot place prompts on an empty mask")
    cy, cx = ys.mean(), xs.mean()
    d2 = (ys - cy) ** 2 + (xs - cx) ** 2
    center = int(np.argmin(d2))  # nonzero() is row-major, argmin keeps the first tie

    def pick(sel):
        idx = np.flatnonzero(sel)
        return int(idx[np.argmin(d2[idx])])

    picks = [center, pick(xs == xs.min()), pick(xs == xs.max()), pick(ys == ys.min()), pick(ys == ys.max())]
    return [(int(xs[i]), int(ys[i])) for i in picks]


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


class TrackStore:
    """Video-segmentation results: ``track_id -> per-frame binary masks``."""

    def __init__(self, tracks: dict[int, Sequence[np.ndarray]]):
        self.tracks = {int(k): [np.asarray(m, dtype=bool) for m in v] for k, v in tracks.items()}
        shapes = {m.shape for v in self.tracks.values() for m in v}
        if len(shapes) > 1:
            raise ValueError(f"track masks disagree on frame size: {sorted(shapes)}")

    def __len__(self):
        return len(self.tracks)

    def frames_covered(self, track_id: int) -> list[int]:
        return [i for i, m in enumerate(self.tracks[track_id]) if m.any()]

    def best_match(self, frame: int, mask) -> tuple[Optional[int], float]:
        best_id, best_iou = None, 0.0
        for tid in sorted(self.tracks):
            masks = self.tracks[tid]
            if frame >= len(masks):
                continue
            iou = mask_iou(masks[frame], mask)
            if iou > best_iou:
                best_id, best_iou = tid, iou
        return best_id, best_iou


@dataclass
class Candidate:
    frame: int
    object_id: int
    mask: np.ndarray


@dataclass
class MaskState:
    n_frames: int
    shape: tuple[int, int]
    config: MaskingConfig = field(default_factory=MaskingConfig)
    local_sets: dict[int, set[int]] = field(default_factory=dict)
    global_masks: list[np.ndarray] = field(default_factory=list)
    ingested: set[int] = field(default_factory=set)

    def __post_init__(self):
        if not self.global_masks:
            self.global_masks = [np.zeros(self.shape, dtype=bool) for _ in range(self.n_frames)]

    def copy(self) -> "MaskState":
        return MaskState(self.n_frames, self.shape, self.config,
                         {k: set(v) for k, v in self.local_sets.items()},
                         [m.copy() for m in self.global_masks], set(self.ingested))


def update_global(state: MaskState, candidate: Candidate, store: TrackStore) -> MaskState:
    """Union the best-matching track into every frame's global mask (in place; returns state)."""
    tid, iou = store.best_match(candidate.frame, candidate.mask)
    if tid is None or iou < state.config.min_track_iou:
        logger.warning("candidate object %d in frame %d has no track with IoU >= %.2f (best %.3f); skipped",
                       candidate.object_id, candidate.frame, state.config.min_track_iou, iou)
        return state
    if tid in state.ingested:
        return state
    for i, m in enumerate(store.tracks[tid][: state.n_frames]):
        state.global_masks[i] |= m
    state.ingested.add(tid)
    return state


def final_mask(state: MaskState, frame: int, seg) -> np.ndarray:
    """Distractor indicator for one frame: local objects or global pixels."""
    ids_map = np.asarray(getattr(seg, "ids", seg))
    local = state.local_sets.get(frame, set())
    hit = np.isin(ids_map, np.fromiter(local, dtype=np.int64, count=len(local))) if local else np.zeros(ids_map.shape, bool)
    return hit | state.global_masks[frame]


def loss_weights(distractor_mask) -> np.ndarray:
    return ~np.asarray(distractor_mask, dtype=bool)


@dataclass
class MaskStep:
    """What the masker decided for one training frame (kept for mask-debug)."""

    iteration: int
    frame: int
    expectation: float
    variance: float
    local_threshold: float
    global_threshold: float
    table: dict[int, float]
    local_set: set[int]
    candidates: list[int]
    coverage: float


class AdaptiveMasker:
    """Mask provider for the trainer: returns per-pixel loss weights for a frame."""

    def __init__(self, frames, config: MaskingConfig, store: Optional[TrackStore] = None, keep_history=False):
        config.validate()
        self.config = config
        self.frames = list(frames)
        h, w = self.frames[0].image.shape[:2]
        self.state = MaskState(len(self.frames), (h, w), config)
        self.store = store
        self.keep_history = keep_history
        self.history: list[MaskStep] = []

    def analyze(self, iteration: int, frame_idx: int, render):
        frame = self.frames[frame_idx]
        cfg = self.config
        resid = combined_residual(render, frame.image, cfg.lambda_dssim)
        table = object_average(resid, frame.seg)
        if cfg.stats_mode == "pixel":
            st = stats(resid)
        else:
            st = stats(table.mean_residual)
        t = min(iteration, cfg.t_max)
        t_local = local_threshold(st, t, cfg.t_max, cfg.lambda_local, cfg.spread)
        t_global = global_threshold(st, cfg.lambda_global, cfg.lambda_local, cfg.spread)
        return resid, table, st, t_local, t_global

    def __call__(self, iteration: int, frame_idx: int, render) -> np.ndarray:
        if iteration < self.config.activation_iter:
            return np.ones(self.state.shape, dtype=bool)
        frame = self.frames[frame_idx]
        _, table, st, t_local, t_global = self.analyze(iteration, frame_idx, render)
        self.state.local_sets[frame_idx] = local_masks(table, t_local)
        cands = []
        if self.config.use_global and self.store is not None:
            for oid, r in zip(table.ids, table.mean_residual):
                if r > t_global and oid != 0:
                    cands.append(int(oid))
                    update_global(self.state, Candidate(frame_idx, int(oid), frame.seg.ids == oid), self.store)
        distractor = final_mask(self.state, frame_idx, frame.seg)
        if self.keep_history:
            self.history.append(MaskStep(iteration, frame_idx, st.expectation, st.variance, t_local, t_global,
                                         table.as_dict(), set(self.state.local_sets[frame_idx]), cands,
                                         float(distractor.mean())))
        return loss_weights(distractor)

    def final_masks(self, iteration: int, renders: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Distractor masks for every frame evaluated against the given renders."""
        out = []
        for i, r in enumerate(renders):
            _, table, _, t_local, _ = self.analyze(iteration, i, r)
            self.state.local_sets[i] = local_masks(table, t_local)
            out.append(final_mask(self.state, i, self.frames[i].seg))
        return out
