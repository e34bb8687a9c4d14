"""Core scene types, covariance construction and the synthetic dynamic-scene generator.

Quaternions are stored ``(w, x, y, z)``. Scales are stored as logs and
opacities as logits so that every parameter is unconstrained during
optimization.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

QUAT_TOL = 1e-9


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def normalize_quaternion(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quaternion_to_matrix(q):
    """Rotation matrix for (batched) unit quaternions ``(..., 4)`` -> ``(..., 3, 3)``."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    ).reshape(q.shape[:-1] + (3, 3))


def matrix_to_quaternion(m):
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0`` for a rotation matrix."""
    m = np.asarray(m, dtype=float)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = normalize_quaternion(q)
    return -q if q[0] < 0 else q


def build_covariance(rotation, log_scale):
    """Sigma = R S S^T R^T. Works on single primitives or stacked arrays.

    The quaternion is normalized first, so raw optimizer parameters are accepted.
    """
    r = quaternion_to_matrix(normalize_quaternion(rotation))
    m = r * np.exp(np.asarray(log_scale, dtype=float))[..., None, :]
    cov = m @ np.swapaxes(m, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


@dataclass
class Gaussian3D:
    center: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color: np.ndarray
    voxel_id: Optional[int] = None
    unconstrained: bool = False
    grad_accum: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.log_scale = np.asarray(self.log_scale, dtype=float).reshape(3)
        self.rotation = normalize_quaternion(np.asarray(self.rotation, dtype=float).reshape(4))
        self.color = np.asarray(self.color, dtype=float).reshape(3)
        self.opacity_logit = float(self.opacity_logit)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def covariance(self) -> np.ndarray:
        return build_covariance(self.rotation, self.log_scale)

    @classmethod
    def isotropic(cls, center, scale, opacity, color, **kw) -> "Gaussian3D":
        return cls(
            center=center,
            log_scale=np.full(3, np.log(scale)) if np.ndim(scale) == 0 else np.log(scale),
            rotation=(1.0, 0.0, 0.0, 0.0),
            opacity_logit=float(logit(opacity)),
            color=color,
            **kw,
        )


class GaussianSet:
    """Struct-of-arrays view of many Gaussians, used by the renderer and trainer.

    ``uids`` are stable identifiers that survive densification and pruning.
    """

    PARAMS = ("centers", "log_scales", "quats", "opacity_logits", "colors")

    def __init__(self, centers, log_scales, quats, opacity_logits, colors,
                 voxel_ids=None, unconstrained=None, grad_accum=None, uids=None):
        self.centers = np.array(centers, dtype=float).reshape(-1, 3)
        n = len(self.centers)
        self.log_scales = np.array(log_scales, dtype=float).reshape(n, 3)
        self.quats = np.array(quats, dtype=float).reshape(n, 4)
        self.opacity_logits = np.array(opacity_logits, dtype=float).reshape(n)
        self.colors = np.array(colors, dtype=float).reshape(n, 3)
        self.voxel_ids = (np.full(n, -1, dtype=np.int64) if voxel_ids is None
                          else np.array(voxel_ids, dtype=np.int64).reshape(n))
        self.unconstrained = (np.zeros(n, dtype=bool) if unconstrained is None
                              else np.array(unconstrained, dtype=bool).reshape(n))
        self.grad_accum = (np.zeros(n) if grad_accum is None
                           else np.array(grad_accum, dtype=float).reshape(n))
        self.uids = (np.arange(n, dtype=np.int64) if uids is None
                     else np.array(uids, dtype=np.int64).reshape(n))

    def __len__(self) -> int:
        return len(self.centers)

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian3D]) -> "GaussianSet":
        if not gaussians:
            return cls.empty()
        return cls(
            [g.center for g in gaussians],
            [g.log_scale for g in gaussians],
            [g.rotation for g in gaussians],
            [g.opacity_logit for g in gaussians],
            [g.color for g in gaussians],
            voxel_ids=[-1 if g.voxel_id is None else g.voxel_id for g in gaussians],
            unconstrained=[g.unconstrained for g in gaussians],
            grad_accum=[g.grad_accum for g in gaussians],
        )

    def to_gaussians(self) -> list[Gaussian3D]:
        return [
            Gaussian3D(
                center=self.centers[i].copy(),
                log_scale=self.log_scales[i].copy(),
                rotation=self.quats[i].copy(),
                opacity_logit=float(self.opacity_logits[i]),
                color=self.colors[i].copy(),
                voxel_id=None if self.voxel_ids[i] < 0 else int(self.voxel_ids[i]),
                unconstrained=bool(self.unconstrained[i]),
                grad_accum=float(self.grad_accum[i]),
            )
            for i in range(len(self))
        ]

    def copy(self) -> "GaussianSet":
        return GaussianSet(self.centers, self.log_scales, self.quats, self.opacity_logits,
                           self.colors, self.voxel_ids, self.unconstrained, self.grad_accum,
                           self.uids)

    def subset(self, index) -> "GaussianSet":
        return GaussianSet(self.centers[index], self.log_scales[index], self.quats[index],
                           self.opacity_logits[index], self.colors[index], self.voxel_ids[index],
                           self.unconstrained[index], self.grad_accum[index], self.uids[index])

    def concat(self, other: "GaussianSet") -> "GaussianSet":
        return GaussianSet(
            np.concatenate([self.centers, other.centers]),
            np.concatenate([self.log_scales, other.log_scales]),
            np.concatenate([self.quats, other.quats]),
            np.concatenate([self.opacity_logits, other.opacity_logits]),
            np.concatenate([self.colors, other.colors]),
            np.concatenate([self.voxel_ids, other.voxel_ids]),
            np.concatenate([self.unconstrained, other.unconstrained]),
            np.concatenate([self.grad_accum, other.grad_accum]),
            np.concatenate([self.uids, other.uids]),
        )

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def covariances(self) -> np.ndarray:
        return build_covariance(self.quats, self.log_scales)


@dataclass
class OrthoCamera:
    """World-to-camera rigid transform followed by an orthographic projection.

    Pixel ``(x, y)`` sits at integer coordinates; camera-space ``(0, 0)`` maps
    to the image center ``((W - 1) / 2, (H - 1) / 2)``. Depth is camera ``z``;
    smaller depth is closer.
    """

    rotation: np.ndarray
    translation: np.ndarray
    pixels_per_unit: float
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("camera rotation is not orthonormal")
        if self.pixels_per_unit <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("camera size and pixels_per_unit must be positive")
        self.width = int(self.width)
        self.height = int(self.height)

    @property
    def principal_point(self) -> np.ndarray:
        return np.array([(self.width - 1) / 2.0, (self.height - 1) / 2.0])

    @classmethod
    def top_down(cls, x: float, y: float, pixels_per_unit: float, width: int, height: int) -> "OrthoCamera":
        """Camera looking along world +z, centered above world ``(x, y)``."""
        return cls(np.eye(3), np.array([-x, -y, 0.0]), pixels_per_unit, width, height)


@dataclass
class SegmentationMap:
    ids: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)

    @property
    def object_ids(self) -> np.ndarray:
        return np.unique(self.ids)

    def mask(self, object_id: int) -> np.ndarray:
        return self.ids == object_id


@dataclass
class Frame:
    index: int
    image: np.ndarray
    camera: OrthoCamera
    seg: Optional[SegmentationMap] = None
    gt_distractor_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.image.shape != (self.camera.height, self.camera.width, 3):
            raise ValueError(
                f"frame {self.index}: image shape {self.image.shape} does not match camera "
                f"{self.camera.height}x{self.camera.width}"
            )


@dataclass
class DistractorScript:
    template: Gaussian3D
    waypoints: np.ndarray  # (n_frames, 3) centers
    name: str = ""
    extra: list[Gaussian3D] = field(default_factory=list)  # further blobs, offsets from template

    def gaussians_at(self, i: int) -> list[Gaussian3D]:
        shift = self.waypoints[i] - self.template.center
        out = [replace(self.template, center=self.waypoints[i].copy())]
        for g in self.extra:
            out.append(replace(g, center=g.center + shift))
        return out


@dataclass
class SyntheticSceneSpec:
    static_gaussians: list[Gaussian3D]
    distractor_scripts: list[DistractorScript]
    n_frames: int
    camera_path: list[OrthoCamera]
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rng_seed: int = 0
    static_object_ids: Optional[list[int]] = None  # one per static Gaussian; default: one object each
    color_noise: float = 0.0

    def validate(self):
        if self.n_frames <= 0:
            raise ValueError("synthetic scene needs at least one frame")
        if len(self.camera_path) != self.n_frames:
            raise ValueError(f"camera_path has {len(self.camera_path)} entries, expected {self.n_frames}")
        for s in self.distractor_scripts:
            if len(s.waypoints) != self.n_frames:
                raise ValueError(
                    f"distractor {s.name!r} has {len(s.waypoints)} waypoints, expected {self.n_frames}"
                )
        if self.static_object_ids is not None and len(self.static_object_ids) != len(self.static_gaussians):
            raise ValueError("static_object_ids must match static_gaussians")


def generate_synthetic_sequence(spec: SyntheticSceneSpec) -> list[Frame]:
    """Render every frame of a scripted scene with its segmentation and distractor mask.

    Static objects get IDs ``1..S`` (or the supplied ``static_object_ids``),
    distractor ``j`` gets ``max_static_id + 1 + j`` and background is 0. A
    pixel is labelled with the object carrying the largest compositing weight,
    or background when the leftover transmittance dominates.
    """
    from .renderer import render_set

    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    static = GaussianSet.from_gaussians(spec.static_gaussians)
    if spec.static_object_ids is None:
        static_ids = np.arange(1, len(static) + 1, dtype=np.int64)
    else:
        static_ids = np.asarray(spec.static_object_ids, dtype=np.int64)
    next_id = int(static_ids.max()) + 1 if len(static_ids) else 1
    background = np.asarray(spec.background, dtype=float)

    frames = []
    for i in range(spec.n_frames):
        cam = spec.camera_path[i]
        parts = [static]
        labels = [static_ids]
        moving = []
        for j, script in enumerate(spec.distractor_scripts):
            gs = GaussianSet.from_gaussians(script.gaussians_at(i))
            parts.append(gs)
            labels.append(np.full(len(gs), next_id + j, dtype=np.int64))
            moving.append(gs)
        scene = _concat(parts)
        obj = np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)
        out = render_set(scene, cam, background, with_weights=True)
        image = out.image
        if spec.color_noise > 0:
            image = np.clip(image + rng.normal(0.0, spec.color_noise, image.shape), 0.0, 1.0)
        seg = _label_pixels(out.weights, obj, out.final_transmittance, out.order)

        if moving:
            dyn = render_set(_concat(moving), cam, np.zeros(3), with_weights=True)
            gt_mask = (1.0 - dyn.final_transmittance) > 0.5
        else:
            gt_mask = np.zeros((cam.height, cam.width), dtype=bool)
        frames.append(Frame(i, image, cam, SegmentationMap(seg), gt_mask))
    return frames


def distractor_ids(spec: SyntheticSceneSpec) -> list[int]:
    if spec.static_object_ids is None:
        base = len(spec.static_gaussians) + 1
    else:
        base = int(max(spec.static_object_ids, default=0)) + 1
    return [base + j for j in range(len(spec.distractor_scripts))]


def _concat(parts: list[GaussianSet]) -> GaussianSet:
    out = GaussianSet.empty()
    for p in parts:
        out = out.concat(p)
    return out


def _label_pixels(weights, labels, final_t, order):
    # weights: (G, H, W) compositing weights in depth order; labels in the same order
    h, w = final_t.shape
    if weights.shape[0] == 0:
        return np.zeros((h, w), dtype=np.int64)
    lab = labels[order]
    uniq, inv = np.unique(lab, return_inverse=True)
    per_obj = np.zeros((len(uniq), h, w))
    np.add.at(per_obj, inv, weights)
    best = per_obj.argmax(axis=0)
    best_w = per_obj.max(axis=0)
    seg = uniq[best]
    seg[final_t >= best_w] = 0
    return seg.astype(np.int64)


def static_only_frames(spec: SyntheticSceneSpec) -> list[np.ndarray]:
    """Clean renders of the static scene from every camera (evaluation targets)."""
    from .renderer import render_set

    static = GaussianSet.from_gaussians(spec.static_gaussians)
    return [render_set(static, cam, spec.background).image for cam in spec.camera_path]


def track_store_from_sequence(frames: Sequence[Frame]):
    """Ideal tracker output: one track per segmentation ID, masks taken from seg."""
    from .masking import TrackStore

    ids = sorted({int(v) for f in frames for v in np.unique(f.seg.ids) if v != 0})
    tracks = {}
    for oid in ids:
        tracks[oid] = [f.seg.ids == oid for f in frames]
    return TrackStore(tracks)
