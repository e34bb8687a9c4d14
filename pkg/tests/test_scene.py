import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatwild.scene import (
    DistractorScript, Frame, Gaussian3D, GaussianSet, OrthoCamera, SyntheticSceneSpec, build_covariance,
    generate_synthetic_sequence, logit, matrix_to_quaternion, quaternion_to_matrix, sigmoid,
)

finite = st.floats(-3, 3, allow_nan=False)


def test_identity_covariance():
    np.testing.assert_allclose(build_covariance([1, 0, 0, 0], [0, 0, 0]), np.eye(3), atol=1e-15)


def test_scaled_covariance():
    np.testing.assert_allclose(build_covariance([1, 0, 0, 0], [np.log(2), 0, 0]), np.diag([4, 1, 1]), atol=1e-12)


def test_rotated_covariance_by_hand():
    # 90 degrees about z: x axis -> y axis
    q = [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]
    np.testing.assert_allclose(build_covariance(q, [np.log(2), 0, 0]), np.diag([1, 4, 1]), atol=1e-12)


def test_unnormalized_quaternion_is_normalized():
    q = np.array([0.3, -1.2, 0.5, 2.0])
    np.testing.assert_allclose(build_covariance(q, [0.1, 0.2, -0.3]), build_covariance(q / np.linalg.norm(q), [0.1, 0.2, -0.3]),
                               atol=1e-14)


def test_covariance_psd_on_many_samples():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(10_000, 4))
    ls = rng.uniform(-4, 2, (10_000, 3))
    cov = build_covariance(q, ls)
    assert np.abs(cov - np.swapaxes(cov, 1, 2)).max() <= 1e-12
    assert np.linalg.eigvalsh(cov).min() >= -1e-12


@given(st.lists(finite, min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 1e-3),
       st.lists(finite, min_size=3, max_size=3))
def test_covariance_eigenvalues_are_squared_scales(q, ls):
    ev = np.sort(np.linalg.eigvalsh(build_covariance(q, ls)))
    np.testing.assert_allclose(ev, np.sort(np.exp(2 * np.asarray(ls))), rtol=1e-9, atol=1e-12)


@given(st.lists(finite, min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 1e-2))
def test_quaternion_matrix_roundtrip(q):
    q = np.asarray(q) / np.linalg.norm(q)
    r = quaternion_to_matrix(q)
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
    back = matrix_to_quaternion(r)
    assert np.allclose(back, q, atol=1e-9) or np.allclose(back, -q, atol=1e-9)


def test_activations():
    g = Gaussian3D.isotropic((0, 0, 0), 0.5, 0.3, (1, 0, 0))
    assert g.opacity == pytest.approx(0.3)
    np.testing.assert_allclose(g.scale, [0.5] * 3)
    assert sigmoid(logit(0.7)) == pytest.approx(0.7)


def test_gaussian_set_roundtrip_and_uids():
    gs = GaussianSet.from_gaussians([Gaussian3D.isotropic((i, 0, 0), 0.1, 0.5, (0.2, 0.3, 0.4)) for i in range(4)])
    assert len(gs) == 4
    assert len(set(gs.uids.tolist())) == 4
    sub = gs.subset([1, 3])
    np.testing.assert_array_equal(sub.uids, gs.uids[[1, 3]])
    back = gs.to_gaussians()
    np.testing.assert_allclose(back[2].center, [2, 0, 0])


def test_camera_rejects_non_orthonormal():
    with pytest.raises(ValueError):
        OrthoCamera(np.diag([1, 1, 2.0]), np.zeros(3), 1.0, 4, 4)


def test_frame_shape_checked():
    cam = OrthoCamera.top_down(0, 0, 1.0, 5, 4)
    with pytest.raises(ValueError):
        Frame(0, np.zeros((5, 4, 3)), cam)


def _blob(x, y, z, color, scale=0.5, opacity=0.95):
    return Gaussian3D.isotropic((x, y, z), scale, opacity, color)


def _spec(n=3, distractor=True, seed=0):
    static = [_blob(-1.5, 0, 1.0, (0.2, 0.7, 0.2), scale=1.0)]
    scripts = []
    if distractor:
        way = np.array([[x, 0.5, 0.5] for x in np.linspace(-1, 1, n)])
        scripts.append(DistractorScript(_blob(0, 0, 0.5, (0.9, 0.1, 0.1)), way, name="car"))
    cams = [OrthoCamera.top_down(0, 0, 4.0, 24, 20) for _ in range(n)]
    return SyntheticSceneSpec(static, scripts, n, cams, np.zeros(3), seed)


def test_no_distractors_gives_empty_gt():
    for f in generate_synthetic_sequence(_spec(distractor=False)):
        assert not f.gt_distractor_mask.any()


def test_distractor_masks_follow_isolated_render():
    from splatwild.renderer import render_set

    spec = _spec()
    frames = generate_synthetic_sequence(spec)
    assert len(frames) == 3
    for i, f in enumerate(frames):
        alone = GaussianSet.from_gaussians(spec.distractor_scripts[0].gaussians_at(i))
        acc = 1.0 - render_set(alone, f.camera, np.zeros(3), with_weights=True).final_transmittance
        np.testing.assert_array_equal(f.gt_distractor_mask, acc > 0.5)
        assert f.gt_distractor_mask.any()
        # the mask follows the car's projected center
        ys, xs = np.nonzero(f.gt_distractor_mask)
        cx = spec.distractor_scripts[0].waypoints[i][0] * 4.0 + (24 - 1) / 2
        assert abs(xs.mean() - cx) < 1.0


def test_segmentation_tiles_the_frame():
    frames = generate_synthetic_sequence(_spec())
    for f in frames:
        ids = f.seg.ids
        total = sum(f.seg.mask(k).sum() for k in f.seg.object_ids)
        assert total == ids.size
        assert set(np.unique(ids).tolist()) <= {0, 1, 2}


def test_generation_is_deterministic():
    a = generate_synthetic_sequence(_spec(seed=3))
    b = generate_synthetic_sequence(_spec(seed=3))
    for fa, fb in zip(a, b):
        assert fa.image.tobytes() == fb.image.tobytes()
        assert fa.seg.ids.tobytes() == fb.seg.ids.tobytes()


def test_spec_validation():
    spec = _spec()
    spec.n_frames = 0
    spec.camera_path = []
    with pytest.raises(ValueError):
        generate_synthetic_sequence(spec)
    spec = _spec()
    spec.distractor_scripts[0].waypoints = spec.distractor_scripts[0].waypoints[:2]
    with pytest.raises(ValueError):
        generate_synthetic_sequence(spec)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**16))
def test_rendered_frames_in_unit_range(seed):
    rng = np.random.default_rng(seed)
    static = [_blob(*rng.uniform(-2, 2, 2), 1.0, rng.uniform(0, 1, 3), scale=rng.uniform(0.2, 1.0))
              for _ in range(4)]
    spec = SyntheticSceneSpec(static, [], 1, [OrthoCamera.top_down(0, 0, 3.0, 16, 16)], rng.uniform(0, 1, 3), seed)
    img = generate_synthetic_sequence(spec)[0].image
    assert img.min() >= 0.0 and img.max() <= 1.0
