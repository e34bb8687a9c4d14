import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import check_scene, random_scene
from oracles import composite_image
from splatwild import renderer as R
from splatwild.renderer import (
    OrderingError, Splat2D, backward_l1, masked_l1, masked_loss, project, project_set, rasterize, render,
    render_set,
)
from splatwild.scene import Frame, Gaussian3D, GaussianSet, OrthoCamera, logit


def _splat(x, y, depth, opacity, color, var=4.0):
    return Splat2D(np.array([x, y], float), np.eye(2) * var, depth, opacity, np.asarray(color, float))


def test_project_identity_camera():
    g = Gaussian3D.isotropic((0, 0, 0), 1.0, 0.5, (1, 1, 1))
    s = project(g, OrthoCamera(np.eye(3), np.zeros(3), 1.0, 9, 7))
    np.testing.assert_allclose(s.center2, [4, 3])
    np.testing.assert_allclose(s.cov2, np.eye(2), atol=1e-15)


def test_project_scales_covariance_by_ppu_squared():
    g = Gaussian3D.isotropic((0, 0, 0), 1.0, 0.5, (1, 1, 1))
    s = project(g, OrthoCamera(np.eye(3), np.zeros(3), 2.0, 9, 7))
    np.testing.assert_allclose(s.cov2, 4 * np.eye(2), atol=1e-14)


def test_project_depth_only_changes_depth():
    cam = OrthoCamera(np.eye(3), np.zeros(3), 3.0, 9, 7)
    a = project(Gaussian3D.isotropic((0.3, -0.2, 1.0), 0.4, 0.5, (1, 1, 1)), cam)
    b = project(Gaussian3D.isotropic((0.3, -0.2, 7.0), 0.4, 0.5, (1, 1, 1)), cam)
    np.testing.assert_array_equal(a.center2, b.center2)
    np.testing.assert_array_equal(a.cov2, b.cov2)
    assert b.depth - a.depth == pytest.approx(6.0)


def test_cov2_floor():
    # a needle seen end-on collapses to a point; the floor keeps it invertible
    g = Gaussian3D(center=(0, 0, 0), log_scale=np.log([1e-6, 1e-6, 1.0]), rotation=(1, 0, 0, 0),
                   opacity_logit=0.0, color=(1, 1, 1))
    s = project(g, OrthoCamera(np.eye(3), np.zeros(3), 1.0, 5, 5))
    assert np.linalg.eigvalsh(s.cov2).min() >= 1e-8 * (1 - 1e-9)


def test_zero_splats_is_background():
    out = render([], 5, 4, (0.1, 0.2, 0.3))
    np.testing.assert_array_equal(out.image, np.broadcast_to([0.1, 0.2, 0.3], (4, 5, 3)))


def test_opaque_splat_center_pixel():
    out = render([_splat(2, 2, 1.0, 1.0, (1, 0, 0))], 5, 5, (0, 0, 1))
    np.testing.assert_allclose(out.image[2, 2], [0.99, 0, 0.01], atol=1e-15)


def test_two_half_splats():
    s = [_splat(2, 2, 1.0, 0.5, (1, 0, 0)), _splat(2, 2, 2.0, 0.5, (0, 1, 0))]
    out = render(s, 5, 5, (0, 0, 1))
    np.testing.assert_allclose(out.image[2, 2], [0.5, 0.25, 0.25], atol=1e-15)


def test_unsorted_input_rejected():
    s = [_splat(2, 2, 2.0, 0.5, (1, 0, 0)), _splat(2, 2, 1.0, 0.5, (0, 1, 0))]
    with pytest.raises(OrderingError):
        render(s, 5, 5, (0, 0, 0))


def _random_splats(rng, n, size):
    splats = []
    for d in np.sort(rng.uniform(0, 5, n)):
        a = rng.normal(size=(2, 2))
        cov = a @ a.T * rng.uniform(1, 6) + 0.3 * np.eye(2)
        splats.append(Splat2D(rng.uniform(-2, size + 2, 2), cov, float(d), float(rng.uniform(0.05, 1.0)),
                              rng.uniform(0, 1, 3)))
    return splats


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**20))
def test_matches_literal_compositor(seed):
    rng = np.random.default_rng(seed)
    size = 13
    splats = _random_splats(rng, int(rng.integers(1, 9)), size)
    bg = rng.uniform(0, 1, 3)
    ours = render(splats, size, size - 2, bg).image
    ref = composite_image([{"center": s.center2, "cov": s.cov2, "opacity": s.opacity, "color": s.color}
                           for s in splats], size, size - 2, bg)
    np.testing.assert_allclose(ours, ref, atol=1e-12)


def test_tiling_does_not_change_pixels(monkeypatch):
    rng = np.random.default_rng(5)
    splats = _random_splats(rng, 12, 40)
    a = render(splats, 40, 37, (0.2, 0.1, 0.0)).image
    monkeypatch.setattr(R, "TILE", 1000)
    b = render(splats, 40, 37, (0.2, 0.1, 0.0)).image
    np.testing.assert_array_equal(a, b)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**20))
def test_transmittance_non_increasing_and_image_in_range(seed):
    rng = np.random.default_rng(seed)
    splats = _random_splats(rng, 6, 10)
    c2 = np.array([s.center2 for s in splats])
    cov = np.array([s.cov2 for s in splats])
    out = rasterize(c2, cov, np.array([s.depth for s in splats]), np.array([s.opacity for s in splats]),
                    np.array([s.color for s in splats]), 10, 10, rng.uniform(0, 1, 3), presorted=True, record=True)
    assert out.image.min() >= 0 and out.image.max() <= 1
    for t in out.per_pixel_contrib.tiles:
        assert np.all(np.diff(t.trans, axis=0) <= 0)


def test_masked_loss_examples():
    a = np.zeros((1, 2, 3))
    a[0, 1] = 1.0
    b = np.full((1, 2, 3), 0.5)
    b[0, 1] = 1.0
    assert masked_l1(a, b, np.ones((1, 2), bool)) == pytest.approx(0.25)
    lb = masked_loss(a, b, np.ones((1, 2), bool), lambda_dssim=0.0)
    assert lb.l1 == pytest.approx(0.25) and lb.total == pytest.approx(0.25)
    assert masked_loss(a, b, np.zeros((1, 2), bool), 0.2).total == 0.0


def test_masked_loss_identity_and_total():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(16, 16, 3))
    lb = masked_loss(img, img, np.ones((16, 16), bool))
    assert lb.l1 == 0 and lb.dssim == pytest.approx(0, abs=1e-12)
    other = rng.uniform(size=(16, 16, 3))
    lb = masked_loss(img, other, rng.uniform(size=(16, 16)) > 0.5, lambda_dssim=0.3)
    assert abs(lb.total - (0.7 * lb.l1 + 0.3 * lb.dssim)) <= 1e-12
    full = masked_loss(img, other, np.ones((16, 16), bool), lambda_dssim=0.0)
    assert full.total == pytest.approx(np.abs(img - other).mean(), abs=1e-12)


def test_masked_loss_shape_mismatch():
    with pytest.raises(ValueError):
        masked_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), np.ones((4, 4), bool))


def test_gradients_zero_at_exact_fit():
    gs, frame, mask, bg = random_scene(0)
    img = render_set(gs, frame.camera, bg).image
    grads = backward_l1(gs, Frame(0, img, frame.camera), mask, bg)
    for g in grads.values():
        assert np.all(g == 0)


def test_gradients_match_finite_differences():
    rows = [r for seed in range(3) for r in check_scene(seed, n_params=40)]
    bad = [r for r in rows if not r[4]]
    assert not bad, bad[:5]


def test_invisible_gaussian_has_zero_gradient():
    gs, frame, mask, bg = random_scene(1)
    far = GaussianSet([[500.0, 500.0, 0.0]], [[0, 0, 0]], [[1, 0, 0, 0]], [0.0], [[1, 0, 0]])
    both = gs.concat(far)
    grads = backward_l1(both, frame, mask, bg)
    for g in grads.values():
        assert np.all(g[-1] == 0)


def test_masked_pixels_do_not_contribute():
    cam = OrthoCamera(np.eye(3), np.zeros(3), 1.0, 20, 10)
    # a small Gaussian on the left, visible only in the masked-out half
    left = GaussianSet([[-6.0, 0, 0]], np.log([[0.8, 0.8, 0.8]]), [[1, 0, 0, 0]], [logit(0.6)], [[0.9, 0.1, 0.1]])
    right = GaussianSet([[5.0, 0, 1]], np.log([[1.5, 1.5, 1.5]]), [[1, 0, 0, 0]], [logit(0.5)], [[0.1, 0.8, 0.3]])
    rng = np.random.default_rng(2)
    frame = Frame(0, rng.uniform(size=(10, 20, 3)), cam)
    mask = np.zeros((10, 20), bool)
    mask[:, 10:] = True
    base = backward_l1(left.concat(right), frame, mask)
    moved = left.copy()
    moved.centers[0, 1] += 0.3
    moved.colors[0] = [0.0, 0.0, 1.0]
    after = backward_l1(moved.concat(right), frame, mask)
    for name in base:
        np.testing.assert_array_equal(base[name][1], after[name][1])
        assert np.all(base[name][0] == 0)


def test_backward_requires_record():
    gs, frame, mask, bg = random_scene(0)
    out = render_set(gs, frame.camera, bg)
    with pytest.raises(ValueError):
        backward_l1(gs, frame, mask, bg, forward=out)
