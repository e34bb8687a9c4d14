"""File formats: PNG frames and ID maps, residual maps, track stores,
Gaussian PLY files and flat ``key = value`` configs."""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .ply import read_ply_vertices, write_ply_vertices
from .scene import Frame, GaussianSet, OrthoCamera, SegmentationMap

RMAP_MAGIC = b"RMAP"


class DataError(ValueError):
    """Malformed or missing input data (the CLI maps it to exit code 2)."""


def _require(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)


# ---- PNG ----

def to_uint8(img) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == bool:
        return img.astype(np.uint8) * 255
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png8(path, img):
    """Float image in [0, 1] (H, W, 3) or a boolean mask (H, W)."""
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def read_png8(path) -> np.ndarray:
    _require(path)
    arr = np.asarray(Image.open(path))
    if arr.dtype != np.uint8:
        raise DataError(f"{path}: expected an 8-bit PNG")
    if arr.ndim == 3:
        arr = arr[..., :3]
    return arr.astype(float) / 255.0


def read_mask_png(path) -> np.ndarray:
    return read_png8(path) >= 0.5


def write_png16(path, ids):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() > 65535):
        raise ValueError("object IDs must fit in 16 bits")
    Image.fromarray(ids.astype(np.uint16)).save(path, format="PNG")


def read_png16(path) -> np.ndarray:
    _require(path)
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a single-channel ID map")
    return arr.astype(np.int64)


# ---- residual maps ----

def write_rmap(path, values):
    v = np.ascontiguousarray(np.asarray(values, dtype="<f4"))
    if v.ndim != 2:
        raise ValueError("residual map must be 2D")
    h, w = v.shape
    with open(path, "wb") as f:
        f.write(RMAP_MAGIC + struct.pack("<II", w, h) + v.tobytes())


def read_rmap(path) -> np.ndarray:
    _require(path)
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != RMAP_MAGIC:
        raise DataError(f"{path}: bad residual map magic")
    if len(data) < 12:
        raise DataError(f"{path}: truncated residual map header")
    w, h = struct.unpack("<II", data[4:12])
    need = 12 + 4 * w * h
    if len(data) != need:
        raise DataError(f"{path}: expected {need} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w).astype(np.float32)


# ---- frames ----

def _cam_line(i, cam: OrthoCamera) -> str:
    vals = [*cam.rotation.ravel(), *cam.translation, cam.pixels_per_unit]
    return f"{i} " + " ".join(repr(float(v)) for v in vals) + f" {cam.width} {cam.height}"


def write_frames(directory, frames: Sequence[Frame]):
    """``frame_XXXX.png`` (8-bit), ``seg_XXXX.png`` (16-bit IDs), ``gt_XXXX.png`` and cameras.txt."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for f in frames:
        write_png8(d / f"frame_{f.index:04d}.png", f.image)
        write_png16(d / f"seg_{f.index:04d}.png", f.seg.ids)
        if f.gt_distractor_mask is not None:
            write_png8(d / f"gt_{f.index:04d}.png", f.gt_distractor_mask)
        lines.append(_cam_line(f.index, f.camera))
    (d / "cameras.txt").write_text("\n".join(lines) + "\n")


def read_frames(directory) -> list[Frame]:
    d = Path(directory)
    cams = d / "cameras.txt"
    _require(cams)
    frames = []
    for ln in cams.read_text().splitlines():
        if not ln.strip():
            continue
        parts = ln.split()
        if len(parts) != 16:
            raise DataError(f"{cams}: camera line needs 16 fields, got {len(parts)}")
        i = int(parts[0])
        v = [float(x) for x in parts[1:14]]
        cam = OrthoCamera(np.array(v[:9]).reshape(3, 3), np.array(v[9:12]), v[12], int(parts[14]), int(parts[15]))
        img = read_png8(d / f"frame_{i:04d}.png")
        seg = SegmentationMap(read_png16(d / f"seg_{i:04d}.png"))
        gt_path = d / f"gt_{i:04d}.png"
        gt = read_mask_png(gt_path) if gt_path.exists() else None
        frames.append(Frame(i, img, cam, seg, gt))
    return frames


# ---- track stores ----

def write_track_store(directory, tracks: dict, n_frames: int):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"n_frames {n_frames}"]
    for tid in sorted(tracks):
        td = d / f"track_{tid:05d}"
        td.mkdir(exist_ok=True)
        covered = []
        for i, m in enumerate(tracks[tid]):
            write_png8(td / f"{i:04d}.png", np.asarray(m, dtype=bool))
            if np.any(m):
                covered.append(i)
        lines.append(f"{tid} " + ",".join(str(i) for i in covered))
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_track_store(directory):
    from .masking import TrackStore

    d = Path(directory)
    man = d / "manifest.txt"
    _require(man)
    lines = [ln for ln in man.read_text().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("n_frames "):
        raise DataError(f"{man}: missing n_frames header")
    n = int(lines[0].split()[1])
    tracks = {}
    for ln in lines[1:]:
        tid = int(ln.split()[0])
        td = d / f"track_{tid:05d}"
        tracks[tid] = [read_mask_png(td / f"{i:04d}.png") for i in range(n)]
    return TrackStore(tracks)


# ---- Gaussian PLY ----

def write_gaussians(path, gs: GaussianSet):
    """Extended-property PLY: position, log-scales, quaternion, opacity logit, color, voxel, uid."""
    cols = {
        "x": gs.centers[:, 0], "y": gs.centers[:, 1], "z": gs.centers[:, 2],
        "log_scale_0": gs.log_scales[:, 0], "log_scale_1": gs.log_scales[:, 1], "log_scale_2": gs.log_scales[:, 2],
        "rot_w": gs.quats[:, 0], "rot_x": gs.quats[:, 1], "rot_y": gs.quats[:, 2], "rot_z": gs.quats[:, 3],
        "opacity_logit": gs.opacity_logits,
        "color_r": gs.colors[:, 0], "color_g": gs.colors[:, 1], "color_b": gs.colors[:, 2],
        "voxel_id": gs.voxel_ids.astype(np.int32),
        "uid": gs.uids.astype(np.int32),
    }
    cols = {k: np.ascontiguousarray(v, dtype=np.int32 if k in ("voxel_id", "uid") else np.float64)
            for k, v in cols.items()}
    write_ply_vertices(path, cols)


def read_gaussians(path) -> GaussianSet:
    v = read_ply_vertices(path)
    need = ["x", "y", "z", "log_scale_0", "log_scale_1", "log_scale_2", "rot_w", "rot_x", "rot_y", "rot_z",
            "opacity_logit", "color_r", "color_g", "color_b"]
    missing = [k for k in need if k not in v]
    if missing:
        raise DataError(f"{path}: missing Gaussian properties {missing}")
    gs = GaussianSet(
        np.c_[v["x"], v["y"], v["z"]].astype(float),
        np.c_[v["log_scale_0"], v["log_scale_1"], v["log_scale_2"]].astype(float),
        np.c_[v["rot_w"], v["rot_x"], v["rot_y"], v["rot_z"]].astype(float),
        v["opacity_logit"].astype(float),
        np.c_[v["color_r"], v["color_g"], v["color_b"]].astype(float),
    )
    if "voxel_id" in v:
        gs.voxel_ids = v["voxel_id"].astype(np.int64)
    if "uid" in v:
        gs.uids = v["uid"].astype(np.int64)
    return gs


# ---- config files ----

def parse_config(text: str, source: str = "<config>") -> dict[str, dict[str, str]]:
    """``key = value`` lines with ``#`` comments; ``[name]`` starts a section.

    Keys before any section header land in section ``""``.
    """
    out: dict[str, dict[str, str]] = {"": {}}
    section = ""
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section:
                raise DataError(f"{source}:{n}: empty section name")
            if section in out:
                raise DataError(f"{source}:{n}: duplicate section [{section}]")
            out[section] = {}
            continue
        if "=" not in line:
            raise DataError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise DataError(f"{source}:{n}: missing key")
        if key in out[section]:
            raise DataError(f"{source}:{n}: duplicate key {key!r}")
        out[section][key] = value
    return out


def read_config(path) -> dict[str, dict[str, str]]:
    _require(path)
    return parse_config(Path(path).read_text(), str(path))


def floats(value: str) -> tuple[float, ...]:
    return tuple(float(x) for x in value.replace(",", " ").split())
