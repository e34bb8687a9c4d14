import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import object_means, ssim_direct, two_pass_stats
from splatwild.masking import (
    AdaptiveMasker, Candidate, MaskingConfig, MaskState, ResidualKind, ResidualMap, ResidualStats, TrackStore,
    combine, combined_residual, dssim_map, final_mask, global_threshold, local_masks, local_threshold, mask_iou,
    normalize, object_average, prompts_from_mask, ssim_map, stats, update_global,
)
from splatwild.scene import Frame, OrthoCamera, SegmentationMap

# ---- thresholds ----

WORKED = ResidualStats(0.3, 0.12)


def test_local_threshold_at_t_max():
    assert local_threshold(WORKED, 7000, 7000, 0.4) == pytest.approx(0.42, abs=1e-12)


def test_local_threshold_at_start():
    assert local_threshold(WORKED, 0, 7000, 0.4) == pytest.approx(0.468, abs=1e-12)


def test_global_threshold_example():
    assert global_threshold(WORKED, 2.8, 0.4) == pytest.approx(0.636, abs=1e-12)


def test_std_spread():
    s = ResidualStats(0.3, 0.04)
    assert local_threshold(s, 10, 10, 0.4, spread="std") == pytest.approx(0.5)
    assert global_threshold(s, 2.8, spread="std") == pytest.approx(0.86)


def test_threshold_argument_checks():
    with pytest.raises(ValueError):
        local_threshold(WORKED, 7001, 7000, 0.4)
    with pytest.raises(ValueError):
        global_threshold(WORKED, 1.3, 0.4)
    with pytest.raises(ValueError):
        MaskingConfig(lambda_global=1.4, lambda_local=0.4).validate()
    with pytest.raises(ValueError):
        MaskingConfig(spread="mad").validate()


@given(st.floats(0, 1), st.floats(0, 0.25), st.integers(1, 10_000), st.floats(0, 2))
def test_local_threshold_decreases_and_stays_below_global(e, var, t_max, lam):
    s = ResidualStats(e, var)
    ts = [local_threshold(s, t, t_max, lam) for t in np.linspace(0, t_max, 7)]
    assert all(b <= a + 1e-15 for a, b in zip(ts, ts[1:]))
    assert ts[-1] == pytest.approx(e + var)
    assert global_threshold(s, 1.0 + lam + 0.1, lam) >= ts[0] - 1e-15


def test_masks_shrink_as_threshold_rises():
    rng = np.random.default_rng(0)
    table = object_average(ResidualMap(rng.uniform(size=(20, 20)), ResidualKind.COMBINED),
                           rng.integers(0, 12, (20, 20)))
    sets = [local_masks(table, th) for th in np.linspace(0, 1, 15)]
    assert all(b <= a for a, b in zip(sets, sets[1:]))


# ---- residuals ----

def test_dssim_of_identical_images_is_zero():
    img = np.random.default_rng(0).uniform(size=(16, 16, 3))
    np.testing.assert_allclose(dssim_map(img, img), 0, atol=1e-12)


def test_dssim_black_vs_white():
    d = dssim_map(np.zeros((12, 12, 3)), np.ones((12, 12, 3)))
    np.testing.assert_allclose(d, (1 - 1e-4 / 1.0001) / 2, rtol=1e-12)
    assert d[0, 0] == pytest.approx(0.49995, abs=1e-6)


def test_ssim_matches_direct_window_sums():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(size=(14, 13, 3)), rng.uniform(size=(14, 13, 3))
    np.testing.assert_allclose(ssim_map(a, b), ssim_direct(a, b), atol=1e-10)


def test_ssim_symmetric_and_size_checked():
    rng = np.random.default_rng(4)
    a, b = rng.uniform(size=(12, 12, 3)), rng.uniform(size=(12, 12, 3))
    np.testing.assert_allclose(ssim_map(a, b), ssim_map(b, a), atol=1e-14)
    with pytest.raises(ValueError):
        ssim_map(np.zeros((8, 12, 3)), np.zeros((8, 12, 3)))


def test_normalize_example():
    out = normalize(ResidualMap(np.array([[0.2, 0.4], [0.6, 0.2]]), ResidualKind.L1))
    np.testing.assert_allclose(out.values, [[0, 0.5], [1, 0]])
    assert out.kind is ResidualKind.NORMALIZED_L1


def test_normalize_constant_map():
    out = normalize(ResidualMap(np.full((3, 3), 0.7), ResidualKind.DSSIM))
    assert np.all(out.values == 0)


@given(st.floats(0.01, 10), st.floats(-5, 5))
def test_normalize_affine_invariant(scale, shift):
    v = np.random.default_rng(1).uniform(size=(6, 6))
    a = normalize(ResidualMap(v, ResidualKind.L1)).values
    b = normalize(ResidualMap(scale * v + shift, ResidualKind.L1)).values
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_combine_example():
    l1 = ResidualMap(np.array([[1.0, 0.0]]), ResidualKind.NORMALIZED_L1)
    ds = ResidualMap(np.array([[0.0, 1.0]]), ResidualKind.NORMALIZED_DSSIM)
    np.testing.assert_allclose(combine(l1, ds, 0.2).values, [[0.8, 0.2]])
    np.testing.assert_array_equal(combine(l1, ds, 0.0).values, l1.values)
    np.testing.assert_array_equal(combine(l1, ds, 1.0).values, ds.values)


def test_combine_rejects_raw_maps_and_bad_lambda():
    raw = ResidualMap(np.zeros((2, 2)), ResidualKind.L1)
    nd = ResidualMap(np.zeros((2, 2)), ResidualKind.NORMALIZED_DSSIM)
    with pytest.raises(ValueError):
        combine(raw, nd, 0.2)
    with pytest.raises(ValueError):
        combine(ResidualMap(np.zeros((2, 2)), ResidualKind.NORMALIZED_L1), nd, 1.5)
    with pytest.raises(ValueError):
        ResidualMap(np.array([1.5]), ResidualKind.COMBINED)


def test_combined_residual_in_unit_range():
    rng = np.random.default_rng(5)
    r = combined_residual(rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3)), 0.2)
    assert r.values.min() >= 0 and r.values.max() <= 1


def test_object_average_matches_oracle():
    rng = np.random.default_rng(6)
    vals = rng.uniform(size=(64, 64))
    ids = rng.integers(0, 40, (64, 64))
    table = object_average(ResidualMap(vals, ResidualKind.COMBINED), SegmentationMap(ids))
    ref = object_means(vals, ids)
    got = table.as_dict()
    assert set(got) == set(ref)
    for k in ref:
        assert got[k] == pytest.approx(ref[k], abs=1e-12)
    assert table.area.sum() == 64 * 64


def test_stats_matches_two_pass():
    vals = np.random.default_rng(7).uniform(size=(64, 64))
    s = stats(vals)
    e, v = two_pass_stats(vals)
    assert s.expectation == pytest.approx(e, abs=1e-12)
    assert s.variance == pytest.approx(v, abs=1e-12)
    with pytest.raises(ValueError):
        stats(np.zeros(0))


def test_constant_residual_flags_nothing():
    table = object_average(ResidualMap(np.full((8, 8), 0.5), ResidualKind.COMBINED), np.arange(64).reshape(8, 8) % 5)
    s = stats(np.full((8, 8), 0.5))
    assert local_masks(table, local_threshold(s, 0, 100, 0.4)) == set()


# ---- prompts ----

def test_prompts_on_rectangle():
    m = np.zeros((10, 10), bool)
    m[2:5, 3:8] = True
    p = prompts_from_mask(m)
    assert p[0] == (5, 3)
    assert p[1] == (3, 3) and p[2] == (7, 3)
    assert p[3] == (5, 2) and p[4] == (5, 4)


def test_prompts_inside_mask_and_empty_rejected():
    m = np.zeros((9, 9), bool)
    m[1, 1] = m[7, 6] = m[4, 2] = True
    for x, y in prompts_from_mask(m):
        assert m[y, x]
    with pytest.raises(ValueError):
        prompts_from_mask(np.zeros((3, 3), bool))


# ---- global masks ----

def _store(n=3):
    a = [np.zeros((6, 6), bool) for _ in range(n)]
    b = [np.zeros((6, 6), bool) for _ in range(n)]
    for i in range(n):
        a[i][i:i + 2, 0:2] = True
        b[i][4:6, 4:6] = True
    return TrackStore({7: a, 9: b})


def test_mask_iou_examples():
    a = np.zeros((2, 2), bool)
    b = a.copy()
    assert mask_iou(a, b) == 1.0
    a[0, 0] = True
    b[0, :] = True
    assert mask_iou(a, b) == 0.5


def test_update_global_ingests_whole_track():
    store = _store()
    state = MaskState(3, (6, 6))
    update_global(state, Candidate(1, 4, store.tracks[7][1].copy()), store)
    assert state.ingested == {7}
    for i in range(3):
        np.testing.assert_array_equal(state.global_masks[i], store.tracks[7][i])
    snapshot = [m.copy() for m in state.global_masks]
    update_global(state, Candidate(2, 4, store.tracks[7][2].copy()), store)
    for a, b in zip(snapshot, state.global_masks):
        np.testing.assert_array_equal(a, b)


def test_update_global_rejects_poor_match(caplog):
    store = _store()
    state = MaskState(3, (6, 6))
    weak = np.zeros((6, 6), bool)
    weak[0:2, 0:1] = True
    weak[3:5, 3] = True   # IoU with track 7 in frame 0 is 2/6
    with caplog.at_level(logging.WARNING):
        update_global(state, Candidate(0, 1, weak), store)
    assert state.ingested == set()
    assert not any(m.any() for m in state.global_masks)
    assert "no track" in caplog.text


def test_update_global_threshold_is_inclusive():
    store = _store()
    state = MaskState(3, (6, 6))
    half = np.zeros((6, 6), bool)
    half[0, 0:2] = True   # IoU exactly 0.5 with track 7 in frame 0
    update_global(state, Candidate(0, 1, half), store)
    assert state.ingested == {7}


def test_final_mask_is_union():
    store = _store()
    state = MaskState(3, (6, 6))
    update_global(state, Candidate(0, 1, store.tracks[9][0].copy()), store)
    ids = np.zeros((6, 6), int)
    ids[0, :] = 3
    state.local_sets[0] = {3}
    m = final_mask(state, 0, ids)
    np.testing.assert_array_equal(m, (ids == 3) | store.tracks[9][0])
    np.testing.assert_array_equal(final_mask(state, 1, ids), store.tracks[9][1])


def test_track_store_shape_check():
    with pytest.raises(ValueError):
        TrackStore({1: [np.zeros((2, 2))], 2: [np.zeros((3, 3))]})


# ---- masker ----

def _frames(n=2):
    cam = OrthoCamera.top_down(0, 0, 1.0, 16, 16)
    rng = np.random.default_rng(0)
    out = []
    for i in range(n):
        ids = np.zeros((16, 16), int)
        ids[4:8, 4:8] = 1
        out.append(Frame(i, rng.uniform(0.4, 0.6, (16, 16, 3)), cam, SegmentationMap(ids)))
    return out


def test_masker_inactive_before_activation():
    frames = _frames()
    masker = AdaptiveMasker(frames, MaskingConfig(activation_iter=10))
    assert masker(5, 0, np.zeros((16, 16, 3))).all()


def test_masker_flags_object_with_large_residual():
    frames = _frames()
    render = frames[0].image.copy()
    render[4:8, 4:8] = 1.0 - render[4:8, 4:8] + 0.5
    render = np.clip(render, 0, 1)
    masker = AdaptiveMasker(frames, MaskingConfig(activation_iter=0, t_max=100), keep_history=True)
    weights = masker(50, 0, render)
    assert not weights[4:8, 4:8].any()
    assert weights[frames[0].seg.ids == 0].all()
    step = masker.history[-1]
    assert step.local_set == {1}
    assert step.local_threshold > step.expectation


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**16))
def test_final_masks_are_boolean_frames(seed):
    frames = _frames(3)
    rng = np.random.default_rng(seed)
    masker = AdaptiveMasker(frames, MaskingConfig(activation_iter=0, t_max=10), TrackStore({}))
    masks = masker.final_masks(10, [rng.uniform(size=(16, 16, 3)) for _ in frames])
    assert len(masks) == 3
    for m in masks:
        assert m.dtype == bool and m.shape == (16, 16)


# ---- the four-pixel hand example ----

HAND = np.array([[0.1, 0.1], [0.1, 0.9]])
HAND_IDS = np.array([[1, 1], [1, 2]])


def test_hand_example_chain():
    r = ResidualMap(HAND, ResidualKind.COMBINED)
    s = stats(r)
    assert s.expectation == pytest.approx(0.3, abs=1e-12)
    assert s.variance == pytest.approx(0.12, abs=1e-12)
    table = object_average(r, HAND_IDS)
    assert table.as_dict() == pytest.approx({1: 0.1, 2: 0.9}, abs=1e-12)
    th = local_threshold(s, 100, 100, 0.4)
    assert th == pytest.approx(0.42, abs=1e-12)
    assert local_masks(table, th) == {2}
    state = MaskState(1, (2, 2))
    state.local_sets[0] = {2}
    weights = ~final_mask(state, 0, HAND_IDS)
    np.testing.assert_array_equal(weights, [[True, True], [True, False]])


def test_more_normalize_and_combine_examples():
    out = normalize(ResidualMap(np.array([2.0, 4.0, 6.0]), ResidualKind.L1))
    np.testing.assert_allclose(out.values, [0, 0.5, 1])
    np.testing.assert_array_equal(normalize(out).values, out.values)
    l1 = ResidualMap(np.array([0.5]), ResidualKind.NORMALIZED_L1)
    ds = ResidualMap(np.array([1.0]), ResidualKind.NORMALIZED_DSSIM)
    assert combine(l1, ds, 0.2).values[0] == pytest.approx(0.6)


def test_threshold_with_zero_variance():
    s = ResidualStats(0.25, 0.0)
    assert all(local_threshold(s, t, 50, 0.4) == 0.25 for t in range(0, 51, 5))
    assert global_threshold(s, 2.8) == 0.25


def test_prompts_degenerate_shapes():
    square = np.zeros((5, 5), bool)
    square[1:4, 1:4] = True
    assert prompts_from_mask(square) == [(2, 2), (1, 2), (3, 2), (2, 1), (2, 3)]
    dot = np.zeros((4, 4), bool)
    dot[2, 1] = True
    assert prompts_from_mask(dot) == [(1, 2)] * 5
    ell = np.zeros((6, 6), bool)
    ell[0:5, 0] = True
    ell[4, 0:5] = True
    cx, cy = prompts_from_mask(ell)[0]
    assert ell[cy, cx]


def test_track_touching_two_frames():
    masks = [np.zeros((4, 4), bool) for _ in range(7)]
    masks[2][0, 0] = masks[5][1, 1] = True
    store = TrackStore({3: masks})
    state = MaskState(7, (4, 4))
    update_global(state, Candidate(2, 1, masks[2].copy()), store)
    assert [i for i, m in enumerate(state.global_masks) if m.any()] == [2, 5]


def test_two_disjoint_tracks_union():
    store = _store()
    state = MaskState(3, (6, 6))
    update_global(state, Candidate(0, 1, store.tracks[7][0].copy()), store)
    update_global(state, Candidate(0, 2, store.tracks[9][0].copy()), store)
    for i in range(3):
        np.testing.assert_array_equal(state.global_masks[i], store.tracks[7][i] | store.tracks[9][i])


def test_empty_sets_keep_every_pixel():
    state = MaskState(1, (3, 3))
    assert (~final_mask(state, 0, np.zeros((3, 3), int))).all()
