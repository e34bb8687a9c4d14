"""Orthographic Gaussian-splat rasterizer with an analytic L1 backward pass.

Compositing follows the usual splatting conventions: per-splat alpha is
clamped at 0.99, contributions under 1/255 are skipped and a pixel stops
accumulating once its transmittance falls below 1e-4. Sorting is global per
frame. Pixels are processed in square tiles; a splat is skipped for a tile
only when its alpha is below the 1/255 cut on every pixel of the tile, so
tiling never changes the composited result.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .scene import Frame, Gaussian3D, GaussianSet, OrthoCamera, build_covariance, quaternion_to_matrix, sigmoid

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
COV_FLOOR = 1e-8
TILE = 16


class OrderingError(ValueError):
    pass


@dataclass
class Splat2D:
    center2: np.ndarray
    cov2: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray


@dataclass
class TileRecord:
    """Forward values for one pixel tile; rows are the splats touching it (depth order)."""

    splats: np.ndarray       # (g,) positions in depth order
    pixels: np.ndarray       # (p,) flat pixel indices
    dx: np.ndarray           # (g, p) pixel x minus splat center x
    dy: np.ndarray
    falloff: np.ndarray      # (g, p) exp(-q/2)
    alphas: np.ndarray       # (g, p) effective alpha (0 where skipped or stopped)
    smooth: np.ndarray       # (g, p) True where alpha is differentiable in the raw alpha
    trans: np.ndarray        # (g, p) transmittance before each splat


@dataclass
class Contributions:
    """Per-pixel forward record needed by the backward pass (depth order)."""

    order: np.ndarray        # (G,) indices into the input set, front first
    centers2: np.ndarray     # (G, 2)
    conics: np.ndarray       # (G, 2, 2) inverse 2D covariances
    opacities: np.ndarray    # (G,)
    colors: np.ndarray       # (G, 3)
    tiles: list[TileRecord]
    final_trans: np.ndarray  # (P,)
    background: np.ndarray


@dataclass
class RenderOutput:
    image: np.ndarray
    per_pixel_contrib: Optional[Contributions] = None
    weights: Optional[np.ndarray] = None           # (G, H, W) in depth order
    final_transmittance: Optional[np.ndarray] = None
    order: Optional[np.ndarray] = None


@dataclass
class LossBreakdown:
    l1: float
    dssim: float
    total: float
    lambda_dssim: float


def project(g: Gaussian3D, cam: OrthoCamera) -> Splat2D:
    gs = GaussianSet.from_gaussians([g])
    c2, cov2, depth = project_set(gs, cam)
    return Splat2D(c2[0], cov2[0], float(depth[0]), g.opacity, g.color.copy())


def project_set(gs: GaussianSet, cam: OrthoCamera):
    """Vectorized projection: returns pixel centers, floored 2D covariances, depths."""
    cam_pts = gs.centers @ cam.rotation.T + cam.translation
    k = cam.pixels_per_unit
    centers2 = k * cam_pts[:, :2] + cam.principal_point
    cov3 = gs.covariances()
    rc = cam.rotation[:2, :]
    cov2 = k * k * np.einsum("ij,njk,lk->nil", rc, cov3, rc)
    return centers2, floor_cov2(cov2), cam_pts[:, 2].copy()


def floor_cov2(cov2):
    a, b, c = cov2[:, 0, 0], 0.5 * (cov2[:, 0, 1] + cov2[:, 1, 0]), cov2[:, 1, 1]
    mid = 0.5 * (a + c)
    rad = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    low = mid - rad
    out = cov2.copy()
    out[:, 0, 1] = out[:, 1, 0] = b
    bad = low < COV_FLOOR
    if np.any(bad):
        for n in np.flatnonzero(bad):
            w, v = np.linalg.eigh(out[n])
            out[n] = (v * np.maximum(w, COV_FLOOR)) @ v.T
    return out


def _tiles(width, height, tile=None):
    tile = tile or TILE
    for y0 in range(0, height, tile):
        for x0 in range(0, width, tile):
            y1, x1 = min(y0 + tile, height), min(x0 + tile, width)
            ys, xs = np.mgrid[y0:y1, x0:x1]
            yield (x0, x1 - 1, y0, y1 - 1), (ys * width + xs).ravel(), xs.ravel().astype(float), ys.ravel().astype(float)


def _reach(cov, op):
    """Distance beyond which a splat's raw alpha is certainly under the 1/255 cut."""
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    lam = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    with np.errstate(divide="ignore"):
        level = np.log(np.maximum(op, 0.0) * 255.0)
    r = np.sqrt(2.0 * np.maximum(level, 0.0) * lam)
    r = r * (1.0 + 1e-9) + 1e-9
    return np.where(level >= 0.0, r, -1.0)


def rasterize(centers2, cov2, depths, opacities, colors, width, height, background,
              *, presorted=False, record=False, with_weights=False) -> RenderOutput:
    background = np.asarray(background, dtype=float)
    n = len(centers2)
    if presorted:
        if n > 1 and np.any(np.diff(depths) < 0):
            bad = int(np.flatnonzero(np.diff(depths) < 0)[0])
            raise OrderingError(f"splats not sorted by depth: index {bad} ({depths[bad]}) > {bad + 1} ({depths[bad + 1]})")
        order = np.arange(n)
    else:
        order = np.argsort(depths, kind="stable")
    npix = width * height

    c2 = np.asarray(centers2, dtype=float)[order].reshape(n, 2)
    cov = np.asarray(cov2, dtype=float)[order].reshape(n, 2, 2)
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    conic = np.empty_like(cov)
    conic[:, 0, 0] = cov[:, 1, 1] / det
    conic[:, 1, 1] = cov[:, 0, 0] / det
    conic[:, 0, 1] = conic[:, 1, 0] = -cov[:, 0, 1] / det
    op = np.asarray(opacities, dtype=float)[order].reshape(n)
    col = np.asarray(colors, dtype=float)[order].reshape(n, 3)
    reach = _reach(cov, op)

    flat_img = np.empty((npix, 3))
    final_t = np.ones(npix)
    weights_all = np.zeros((n, npix)) if with_weights else None
    tiles = []
    for (x0, x1, y0, y1), pix, xs, ys in _tiles(width, height):
        hit = ((reach >= 0) & (c2[:, 0] + reach >= x0) & (c2[:, 0] - reach <= x1)
               & (c2[:, 1] + reach >= y0) & (c2[:, 1] - reach <= y1))
        sel = np.flatnonzero(hit)
        if sel.size == 0:
            flat_img[pix] = background
            continue
        cn = conic[sel]
        dx = xs[None, :] - c2[sel, 0:1]
        dy = ys[None, :] - c2[sel, 1:2]
        q = cn[:, 0, 0, None] * dx * dx + 2.0 * cn[:, 0, 1, None] * dx * dy + cn[:, 1, 1, None] * dy * dy
        falloff = np.exp(-0.5 * q)
        raw = op[sel, None] * falloff
        active = raw >= ALPHA_MIN
        alpha = np.where(active, np.minimum(raw, ALPHA_MAX), 0.0)
        trans = _exclusive_cumprod(1.0 - alpha)
        alive = trans >= T_MIN
        alpha = np.where(alive, alpha, 0.0)
        trans = _exclusive_cumprod(1.0 - alpha)
        ft = trans[-1] * (1.0 - alpha[-1])
        weights = alpha * trans
        flat_img[pix] = weights.T @ col[sel] + ft[:, None] * background[None, :]
        final_t[pix] = ft
        if with_weights:
            weights_all[np.ix_(sel, pix)] = weights
        if record:
            smooth = active & alive & (raw < ALPHA_MAX)
            tiles.append(TileRecord(sel, pix, dx, dy, falloff, alpha, smooth, trans))
    image = np.clip(flat_img, 0.0, 1.0).reshape(height, width, 3)

    rec = None
    if record:
        rec = Contributions(order, c2, conic, op, col, tiles, final_t, background)
    return RenderOutput(
        image,
        rec,
        weights_all.reshape(n, height, width) if with_weights else None,
        final_t.reshape(height, width),
        order,
    )


def _exclusive_cumprod(x):
    out = np.empty_like(x)
    out[0] = 1.0
    if len(x) > 1:
        np.cumprod(x[:-1], axis=0, out=out[1:])
    return out


def render(splats: Sequence[Splat2D], width: int, height: int, background) -> RenderOutput:
    """Composite pre-sorted splats (front first). Raises OrderingError on a depth inversion."""
    if splats:
        c2 = np.array([s.center2 for s in splats], dtype=float)
        cov = np.array([s.cov2 for s in splats], dtype=float)
        depth = np.array([s.depth for s in splats], dtype=float)
        op = np.array([s.opacity for s in splats], dtype=float)
        col = np.array([s.color for s in splats], dtype=float)
    else:
        c2, cov, depth, op, col = np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0), np.zeros(0), np.zeros((0, 3))
    return rasterize(c2, floor_cov2(cov) if len(cov) else cov, depth, op, col, width, height,
                     background, presorted=True, record=True)


def render_set(gs: GaussianSet, cam: OrthoCamera, background, *, record=False, with_weights=False) -> RenderOutput:
    c2, cov2, depth = project_set(gs, cam)
    return rasterize(c2, cov2, depth, gs.opacities, gs.colors, cam.width, cam.height, background,
                     record=record, with_weights=with_weights)


def _check_shapes(a, b, mask=None):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if mask is not None and mask.shape != a.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {a.shape[:2]}")


def masked_l1(render_img, gt, mask) -> float:
    keep = np.asarray(mask, dtype=bool)
    _check_shapes(render_img, gt, keep)
    n = keep.sum()
    if n == 0:
        return 0.0
    per_px = np.abs(render_img - gt).mean(axis=2)
    return float(per_px[keep].sum() / n)


def masked_loss(render_img, gt, mask, lambda_dssim: float = 0.2) -> LossBreakdown:
    from .masking import dssim_map

    keep = np.asarray(mask, dtype=bool)
    _check_shapes(render_img, gt, keep)
    if not 0.0 <= lambda_dssim <= 1.0:
        raise ValueError("lambda_dssim must lie in [0, 1]")
    n = keep.sum()
    if n == 0:
        return LossBreakdown(0.0, 0.0, 0.0, lambda_dssim)
    l1 = masked_l1(render_img, gt, keep)
    if min(gt.shape[:2]) >= 11:
        dssim = float(dssim_map(render_img, gt)[keep].sum() / n)
    elif lambda_dssim == 0.0:
        dssim = 0.0
    else:
        raise ValueError("D-SSIM needs images of at least 11x11 pixels")
    total = (1.0 - lambda_dssim) * l1 + lambda_dssim * dssim
    return LossBreakdown(l1, dssim, total, lambda_dssim)


# partial derivatives of R(q) w.r.t. (w, x, y, z), each (n, 3, 3)
def _rotation_jacobians(q):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    o = np.zeros_like(w)

    def mat(*rows):
        return 2.0 * np.stack(rows, axis=-1).reshape(-1, 3, 3)

    dw = mat(o, -z, y, z, o, -x, -y, x, o)
    dx = mat(o, y, z, y, -2 * x, -w, z, w, -2 * x)
    dy = mat(-2 * y, x, w, x, o, z, -w, z, -2 * y)
    dz = mat(-2 * z, -w, x, w, -2 * z, y, x, y, o)
    return dw, dx, dy, dz


def backward_from_pixels(gs: GaussianSet, cam: OrthoCamera, rec: Contributions, dl_dimage) -> dict:
    """Chain dL/d(image) through compositing, projection and covariance construction."""
    if rec is None:
        raise ValueError("forward pass did not record per-pixel contributions")
    n = len(gs)
    grads = {
        "centers": np.zeros((n, 3)),
        "log_scales": np.zeros((n, 3)),
        "quats": np.zeros((n, 4)),
        "opacity_logits": np.zeros(n),
        "colors": np.zeros((n, 3)),
    }
    if n == 0:
        return grads
    g_img = dl_dimage.reshape(-1, 3)
    order = rec.order
    conic = rec.conics
    g_col = np.zeros((n, 3))
    g_op = np.zeros(n)
    g_c2 = np.zeros((n, 2))
    g_conic = np.zeros((n, 2, 2))
    for t in rec.tiles:
        gi = g_img[t.pixels]
        weights = t.alphas * t.trans
        g_col[t.splats] += weights @ gi
        cd = rec.colors[t.splats] @ gi.T                            # color . dL/dC
        wcd = weights * cd
        total = wcd.sum(axis=0) + rec.final_trans[t.pixels] * (gi @ rec.background)
        suffix = total[None, :] - np.cumsum(wcd, axis=0)           # tail after each splat
        g_alpha = t.trans * cd - suffix / (1.0 - t.alphas)
        g_raw = np.where(t.smooth, g_alpha, 0.0)

        g_op[t.splats] += (g_raw * t.falloff).sum(axis=1)
        g_q = -0.5 * g_raw * rec.opacities[t.splats, None] * t.falloff
        sx = (g_q * t.dx).sum(axis=1)
        sy = (g_q * t.dy).sum(axis=1)
        cn = conic[t.splats]
        g_c2[t.splats] += np.stack([
            -2.0 * (cn[:, 0, 0] * sx + cn[:, 0, 1] * sy),
            -2.0 * (cn[:, 1, 0] * sx + cn[:, 1, 1] * sy),
        ], axis=1)
        g_conic[t.splats, 0, 0] += (g_q * t.dx * t.dx).sum(axis=1)
        g_conic[t.splats, 1, 1] += (g_q * t.dy * t.dy).sum(axis=1)
        g_conic[t.splats, 0, 1] += (g_q * t.dx * t.dy).sum(axis=1)
    g_conic[:, 1, 0] = g_conic[:, 0, 1]
    g_cov2 = -conic @ g_conic @ conic

    # undo the depth permutation
    inv = np.empty(n, dtype=np.int64)
    inv[order] = np.arange(n)
    g_col, g_op, g_c2, g_cov2 = g_col[inv], g_op[inv], g_c2[inv], g_cov2[inv]

    k = cam.pixels_per_unit
    rc = cam.rotation[:2, :]
    grads["centers"] = k * g_c2 @ rc
    grads["colors"] = g_col
    op = sigmoid(gs.opacity_logits)
    grads["opacity_logits"] = g_op * op * (1.0 - op)

    g_sigma = k * k * np.einsum("ji,njk,kl->nil", rc, g_cov2, rc)
    qn = np.linalg.norm(gs.quats, axis=1, keepdims=True)
    qhat = gs.quats / qn
    rot = quaternion_to_matrix(qhat)
    s = np.exp(gs.log_scales)
    m = rot * s[:, None, :]
    g_m = 2.0 * g_sigma @ m
    g_s = (g_m * rot).sum(axis=1)
    grads["log_scales"] = g_s * s
    g_rot = g_m * s[:, None, :]
    g_qhat = np.stack([(g_rot * d).sum(axis=(1, 2)) for d in _rotation_jacobians(qhat)], axis=1)
    grads["quats"] = (g_qhat - qhat * (g_qhat * qhat).sum(axis=1, keepdims=True)) / qn
    return grads


def l1_image_grad(render_img, gt, mask):
    """dL/d(image) for the masked mean-absolute error; zero residual gives zero subgradient."""
    keep = np.asarray(mask, dtype=float)
    n = keep.sum()
    if n == 0:
        return np.zeros_like(render_img)
    return np.sign(render_img - gt) * keep[:, :, None] / (3.0 * n)


def backward_l1(scene, frame: Frame, mask, background=None, *, forward: Optional[RenderOutput] = None) -> dict:
    """Gradients of the masked L1 loss w.r.t. every Gaussian parameter."""
    gs = scene if isinstance(scene, GaussianSet) else GaussianSet.from_gaussians(list(scene))
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=float)
    if forward is None:
        forward = render_set(gs, frame.camera, bg, record=True)
    if forward.per_pixel_contrib is None:
        raise ValueError("forward pass did not record per-pixel contributions")
    g_img = l1_image_grad(forward.image, frame.image, mask)
    return backward_from_pixels(gs, frame.camera, forward.per_pixel_contrib, g_img)
