"""Progressive alignment over overlapping frame windows.

A pairwise stereo predictor cannot take a whole long sequence at once, so
frames are processed in windows of ``N`` with a stride of ``N / 2``. The
first half of every later window was already aligned by its predecessor;
those poses are handed to the predictor as fixed and the duplicated frames
are dropped when the window results are merged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np


class AlignmentError(RuntimeError):
    pass


@dataclass(frozen=True)
class AlignWindow:
    frame_indices: tuple[int, ...]
    fixed_prefix: int

    @property
    def start(self) -> int:
        return self.frame_indices[0]


@dataclass
class Pose:
    rotation: np.ndarray     # unit quaternion (w, x, y, z)
    translation: np.ndarray

    def same_as(self, other: "Pose") -> bool:
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))


@dataclass
class PredictorResult:
    poses: dict[int, Pose]
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    confidence: np.ndarray = field(default_factory=lambda: np.zeros(0))
    source: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


class PairwisePredictor(Protocol):
    def __call__(self, frames: Sequence[int], fixed: dict[int, Pose]) -> PredictorResult: ...


def plan_windows(total_frames: int, n: int) -> list[AlignWindow]:
    """Sliding windows of ``n`` frames with stride ``n / 2``.

    The last window is anchored to end at ``total_frames``; its fixed prefix
    is however many of its frames the previous window already covered.
    """
    if n < 2 or n % 2:
        raise ValueError(f"window size must be even and at least 2, got {n}")
    if total_frames < 1:
        raise ValueError("need at least one frame")
    if total_frames <= n:
        return [AlignWindow(tuple(range(total_frames)), 0)]
    half = n // 2
    windows = []
    start = 0
    while start + n <= total_frames:
        windows.append(AlignWindow(tuple(range(start, start + n)), 0 if start == 0 else half))
        start += half
    last_end = windows[-1].frame_indices[-1] + 1
    if last_end < total_frames:
        s = total_frames - n
        windows.append(AlignWindow(tuple(range(s, total_frames)), last_end - s))
    return windows


def run_alignment(frames: Sequence[int], n: int, predictor: PairwisePredictor) -> PredictorResult:
    """Run the predictor window by window and merge without duplicates."""
    frames = list(frames)
    windows = plan_windows(len(frames), n)
    poses: dict[int, Pose] = {}
    pts, conf, src = [], [], []
    for wi, win in enumerate(windows):
        ids = [frames[i] for i in win.frame_indices]
        fixed = {f: poses[f] for f in ids[: win.fixed_prefix]}
        res = predictor(ids, fixed)
        for f, p in fixed.items():
            got = res.poses.get(f)
            if got is None or not got.same_as(p):
                raise AlignmentError(f"window {wi} (frames {ids[0]}..{ids[-1]}) altered fixed pose of frame {f}")
        fresh = [f for f in ids if f not in poses]
        for f in fresh:
            if f not in res.poses:
                raise AlignmentError(f"window {wi} returned no pose for frame {f}")
            poses[f] = res.poses[f]
        take = np.isin(res.source, fresh)
        pts.append(np.asarray(res.points)[take])
        conf.append(np.asarray(res.confidence)[take])
        src.append(np.asarray(res.source)[take])
    return PredictorResult(
        {f: poses[f] for f in frames},
        np.concatenate(pts) if pts else np.zeros((0, 3)),
        np.concatenate(conf) if conf else np.zeros(0),
        np.concatenate(src).astype(np.int64) if src else np.zeros(0, dtype=np.int64),
    )


@dataclass
class GroundTruthScene:
    poses: dict[int, Pose]
    points: np.ndarray
    confidence: np.ndarray
    source: np.ndarray


def synthetic_predictor(truth: GroundTruthScene) -> PairwisePredictor:
    """Oracle predictor: ground truth restricted to the window, fixed poses echoed back."""

    def predict(frames: Sequence[int], fixed: dict[int, Pose]) -> PredictorResult:
        poses = {}
        for f in frames:
            p = fixed.get(f, truth.poses[f])
            poses[f] = Pose(p.rotation.copy(), p.translation.copy())
        sel = np.isin(truth.source, list(frames))
        return PredictorResult(poses, truth.points[sel].copy(), truth.confidence[sel].copy(), truth.source[sel].copy())

    return predict


def random_truth(n_frames: int, points_per_frame: int = 5, seed: int = 0) -> GroundTruthScene:
    rng = np.random.default_rng(seed)
    poses = {}
    for f in range(n_frames):
        q = rng.normal(size=4)
        poses[f] = Pose(q / np.linalg.norm(q), rng.normal(size=3))
    m = n_frames * points_per_frame
    return GroundTruthScene(poses, rng.normal(size=(m, 3)), rng.uniform(1, 3, m),
                            np.repeat(np.arange(n_frames), points_per_frame))


def write_trajectory(path, poses: dict[int, Pose]):
    """One line per frame: index, qw qx qy qz, tx ty tz."""
    with open(path, "w") as f:
        for k in sorted(poses):
            p = poses[k]
            vals = [repr(float(v)) for v in (*p.rotation, *p.translation)]
            f.write(f"{k} " + " ".join(vals) + "\n")


def read_trajectory(path) -> dict[int, Pose]:
    out = {}
    with open(path) as f:
        for ln in f:
            if not ln.strip():
                continue
            parts = ln.split()
            if len(parts) != 8:
                raise ValueError(f"trajectory line needs 8 fields: {ln!r}")
            v = np.array([float(x) for x in parts[1:]])
            out[int(parts[0])] = Pose(v[:4], v[4:])
    return out
