"""Image-to-proxy pipeline: worked examples, independent oracles, extractor state."""
import cv2
import numpy as np
import pytest
from scipy import ndimage

from trex.frames import ReferenceFrame, Side
from trex.pipeline import (
    DEFAULT_ALPHA,
    DEFAULT_GAMMA,
    DEFAULT_N_MIN,
    FLOW_CROP_PAD,
    REFERENCE_REFRESH_FRAMES,
    ContactMask,
    ProxyExtractor,
    SideMeasurement,
    _flow_crop_bounds,
    assemble_proxy_sample,
    compute_contact_mask,
    compute_cop,
    compute_diff,
    compute_fn,
    compute_sy,
    compute_weights,
    ema_update,
    estimate_flow,
    mean_vertical_cop,
)


def speckle(h, w, seed):
    """Blurred noise with contrast everywhere, for flow tests."""
    rng = np.random.default_rng(seed)
    noise = rng.integers(0, 256, size=(h, w)).astype(np.uint8)
    blurred = cv2.GaussianBlur(noise, (0, 0), 1.5).astype(np.float32)
    lo, hi = blurred.min(), blurred.max()
    return 40.0 + 200.0 * (blurred - lo) / (hi - lo)


def shift_down(img, dy):
    m = np.float32([[1, 0, 0], [0, 1, dy]])
    return cv2.warpAffine(img, m, (img.shape[1], img.shape[0]),
                          flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_WRAP)


# --- difference ---------------------------------------------------------


def test_diff_value_and_dtype():
    a = np.full((6, 8), 120, np.uint8)
    b = np.full((6, 8), 100, np.uint8)
    diff = compute_diff(a, b)
    assert diff.dtype == np.float32
    np.testing.assert_array_equal(diff, np.full((6, 8), 20.0, np.float32))
    np.testing.assert_array_equal(compute_diff(b, a), diff)  # symmetric


def test_diff_accepts_reference_frame_wrapper():
    live = np.full((4, 4), 90, np.uint8)
    ref = ReferenceFrame(np.full((4, 4), 70, np.uint8), captured_at=123)
    np.testing.assert_array_equal(compute_diff(live, ref), np.full((4, 4), 20.0))


def test_diff_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a = rng.integers(0, 256, (9, 11), dtype=np.uint8)
        b = rng.integers(0, 256, (9, 11), dtype=np.uint8)
        got = compute_diff(a, b)
        want = np.abs(a.astype(np.int32) - b.astype(np.int32)).astype(np.float32)
        np.testing.assert_array_equal(got, want)


# --- contact mask -------------------------------------------------------


def test_mask_removes_isolated_pixel():
    diff = np.zeros((30, 30), np.float32)
    diff[15, 15] = 50.0
    mask = compute_contact_mask(diff, tau=5.0)
    assert int(np.count_nonzero(mask.pixels)) == 0
    assert not mask.valid


def test_mask_keeps_solid_block():
    diff = np.zeros((30, 30), np.float32)
    diff[5:15, 8:18] = 50.0
    mask = compute_contact_mask(diff, tau=5.0, n_min=20)
    assert int(np.count_nonzero(mask.pixels)) == 100
    assert mask.valid
    assert bool(mask.pixels[5, 8]) and bool(mask.pixels[14, 17])


def test_mask_validity_threshold_is_n_min():
    diff = np.zeros((20, 20), np.float32)
    diff[2:9, 2:9] = 30.0  # 49 surviving pixels
    assert not compute_contact_mask(diff, tau=10.0, n_min=50).valid
    assert compute_contact_mask(diff, tau=10.0, n_min=49).valid
    assert DEFAULT_N_MIN == 50


def test_mask_threshold_is_strict():
    diff = np.full((10, 10), 5.0, np.float32)
    assert int(np.count_nonzero(compute_contact_mask(diff, tau=5.0).pixels)) == 0


def test_mask_opening_matches_scipy_oracle():
    rng = np.random.default_rng(11)
    structure = np.ones((3, 3), bool)
    for density in (0.05, 0.3, 0.5, 0.8):
        for _ in range(5):
            diff = (rng.random((40, 50)) < density).astype(np.float32) * 60.0
            got = compute_contact_mask(diff, tau=10.0).pixels
            raw = diff > 10.0
            eroded = ndimage.binary_erosion(raw, structure, border_value=0)
            want = ndimage.binary_dilation(eroded, structure, border_value=0)
            np.testing.assert_array_equal(got, want)


def test_mask_border_blob_shrinks_like_zero_padding():
    diff = np.zeros((12, 12), np.float32)
    diff[0:4, 0:4] = 50.0  # corner blob; zero border erodes its rim
    got = compute_contact_mask(diff, tau=5.0, n_min=1).pixels
    structure = np.ones((3, 3), bool)
    eroded = ndimage.binary_erosion(diff > 5.0, structure, border_value=0)
    want = ndimage.binary_dilation(eroded, structure, border_value=0)
    np.testing.assert_array_equal(got, want)


# --- weights / normal proxy / centroid ----------------------------------


def test_weights_gamma_power_inside_mask():
    diff = np.full((4, 4), 4.0, np.float32)
    mask = np.zeros((4, 4), bool)
    mask[1, 2] = True
    w = compute_weights(diff, mask)
    assert w[1, 2] == 8.0  # 4 ** 1.5
    assert w.sum() == 8.0
    assert w.dtype == np.float64
    assert DEFAULT_GAMMA == 1.5


def test_fn_is_full_frame_mean():
    w = np.full((10, 20), 3.5, np.float64)
    assert compute_fn(w) == pytest.approx(3.5, rel=1e-12)
    half = np.zeros((10, 20), np.float64)
    half[:5] = 3.5
    assert compute_fn(half) == pytest.approx(1.75, rel=1e-12)


def test_fn_bounded_by_max_gamma_weight():
    rng = np.random.default_rng(5)
    for _ in range(20):
        diff = rng.integers(0, 256, (24, 32)).astype(np.float32)
        w = compute_weights(diff, np.ones((24, 32), bool))
        assert compute_fn(w) <= 255.0 ** 1.5


def test_cop_of_symmetric_block_is_its_center():
    w = np.zeros((40, 60), np.float64)
    w[10:20, 20:30] = 2.0
    assert compute_cop(w) == pytest.approx((24.5, 14.5), abs=1e-12)


def test_cop_of_two_equal_pixels_is_midpoint():
    w = np.zeros((240, 320), np.float64)
    w[100, 100] = 5.0
    w[100, 300] = 5.0
    assert compute_cop(w) == pytest.approx((200.0, 100.0), abs=1e-12)


def test_cop_absent_without_weight():
    assert compute_cop(np.zeros((8, 8), np.float64)) is None


def test_cop_matches_scalar_oracle():
    rng = np.random.default_rng(7)
    for _ in range(50):
        w = rng.random((13, 17)) * (rng.random((13, 17)) > 0.6)
        got = compute_cop(w)
        total = w.sum()
        if total == 0.0:
            assert got is None
            continue
        x = sum(w[i, j] * j for i in range(13) for j in range(17)) / total
        y = sum(w[i, j] * i for i in range(13) for j in range(17)) / total
        assert got == pytest.approx((x, y), rel=1e-9)


def test_mean_vertical_cop_averages_y():
    assert mean_vertical_cop((50.0, 100.0), (70.0, 120.0), True, True) == 110.0


def test_mean_vertical_cop_requires_both_sides():
    assert mean_vertical_cop((50.0, 100.0), (70.0, 120.0), True, False) is None
    assert mean_vertical_cop((50.0, 100.0), None, True, True) is None
    assert mean_vertical_cop(None, (70.0, 120.0), False, True) is None


# --- optical flow / shear proxy -----------------------------------------


def test_flow_zero_motion_is_quiet():
    img = speckle(120, 160, seed=1)
    flow = estimate_flow(img, img.copy())
    assert flow.shape == (120, 160, 2)
    assert abs(float(np.median(flow[..., 1]))) < 0.02


def test_flow_recovers_downward_translation():
    img = speckle(120, 160, seed=2)
    flow = estimate_flow(img, shift_down(img, 2.0))
    med = float(np.median(flow[20:-20, 20:-20, 1]))
    assert 1.8 <= med <= 2.2


def test_flow_recovers_upward_translation():
    img = speckle(120, 160, seed=3)
    flow = estimate_flow(img, shift_down(img, -1.0))
    med = float(np.median(flow[20:-20, 20:-20, 1]))
    assert -1.1 <= med <= -0.9


def test_sy_is_median_of_abs_vy_in_mask():
    flow = np.zeros((5, 5, 2), np.float32)
    mask = np.zeros((5, 5), bool)
    for (r, c), vy in zip(((0, 0), (1, 1), (2, 2)), (0.1, -0.2, 0.9)):
        flow[r, c, 1] = vy
        mask[r, c] = True
    assert compute_sy(flow, ContactMask(mask, True)) == pytest.approx(0.2)


def test_sy_uniform_flow():
    flow = np.full((6, 6, 2), 0.5, np.float32)
    mask = np.ones((6, 6), bool)
    assert compute_sy(flow, ContactMask(mask, True)) == pytest.approx(0.5)


def test_sy_zero_without_valid_contact():
    flow = np.full((6, 6, 2), 3.0, np.float32)
    assert compute_sy(flow, ContactMask(np.ones((6, 6), bool), False)) == 0.0


def test_sy_invariant_under_support_duplication():
    rng = np.random.default_rng(9)
    values = rng.normal(0, 0.4, 11)
    flow_a = np.zeros((4, 11, 2), np.float32)
    flow_a[0, :, 1] = values
    mask_a = np.zeros((4, 11), bool)
    mask_a[0, :] = True
    flow_b = np.zeros((4, 11, 2), np.float32)
    flow_b[0, :, 1] = values
    flow_b[1, :, 1] = values  # duplicate every sample
    mask_b = mask_a.copy()
    mask_b[1, :] = True
    sy_a = compute_sy(flow_a, ContactMask(mask_a, True))
    sy_b = compute_sy(flow_b, ContactMask(mask_b, True))
    assert sy_a == pytest.approx(sy_b, abs=1e-7)


# --- EMA and sample assembly --------------------------------------------


def test_ema_basic_and_fixed_point():
    assert ema_update(0.0, 1.0, 0.3) == pytest.approx(0.3)
    assert ema_update(2.5, 2.5, 0.3) == pytest.approx(2.5)
    assert DEFAULT_ALPHA == 0.3


def test_ema_contracts_toward_raw():
    prev, raw = 4.0, 1.0
    out = ema_update(prev, raw, 0.3)
    assert abs(out - raw) == pytest.approx((1 - 0.3) * abs(prev - raw))


def test_assemble_seeds_emas_with_first_raw():
    left = SideMeasurement(fn_raw=2.0, sy_raw=0.4, cop=(10.0, 20.0), contact_valid=True)
    right = SideMeasurement(fn_raw=1.0, sy_raw=0.1, cop=(10.0, 30.0), contact_valid=True)
    s = assemble_proxy_sample(0, left, right, previous=None)
    assert s.left.fn_ema == 2.0 and s.left.sy_ema == 0.4
    assert s.right.fn_ema == 1.0 and s.right.sy_ema == 0.1
    assert s.sy_max_ema == 0.4
    assert s.fn_max_ema == 2.0
    assert s.mean_cop_y == 25.0


def test_assemble_chains_emas_and_keeps_raw():
    first = assemble_proxy_sample(
        0,
        SideMeasurement(1.0, 0.0, (0.0, 10.0), True),
        SideMeasurement(1.0, 0.0, (0.0, 10.0), True),
        previous=None,
    )
    second = assemble_proxy_sample(
        1,
        SideMeasurement(2.0, 0.6, (0.0, 12.0), True),
        SideMeasurement(1.0, 0.0, (0.0, 10.0), True),
        previous=first,
    )
    assert second.left.fn_ema == pytest.approx(0.3 * 2.0 + 0.7 * 1.0)
    assert second.left.sy_ema == pytest.approx(0.3 * 0.6)
    assert second.left.sy_raw == 0.6  # raw channel is unfiltered
    assert second.sy_max_ema == second.left.sy_ema
    assert second.mean_cop_y == pytest.approx(11.0)


def test_assemble_mean_cop_gates_on_validity():
    good = SideMeasurement(1.0, 0.0, (0.0, 10.0), True)
    bad = SideMeasurement(0.0, 0.0, None, False)
    assert assemble_proxy_sample(0, good, bad, None).mean_cop_y is None


# --- flow crop ----------------------------------------------------------


def test_flow_crop_bounds_pad_and_clamp():
    mask = np.zeros((100, 200), bool)
    mask[10:20, 30:40] = True
    y0, y1, x0, x1 = _flow_crop_bounds(mask, pad=48)
    assert (y0, y1, x0, x1) == (0, 68, 0, 88)
    mask2 = np.zeros((100, 200), bool)
    mask2[90:100, 190:200] = True
    assert _flow_crop_bounds(mask2, pad=48) == (42, 100, 142, 200)
    assert FLOW_CROP_PAD == 48


def test_cropped_flow_matches_full_frame_sy():
    img = speckle(240, 320, seed=21)
    shifted = shift_down(img, 1.2)
    mask_px = np.zeros((240, 320), bool)
    yy, xx = np.mgrid[0:240, 0:320]
    mask_px[((yy - 120) ** 2 + (xx - 160) ** 2) < 35**2] = True
    mask = ContactMask(mask_px, True)

    full = compute_sy(estimate_flow(img, shifted), mask)
    y0, y1, x0, x1 = _flow_crop_bounds(mask_px, FLOW_CROP_PAD)
    crop = compute_sy(
        estimate_flow(img[y0:y1, x0:x1], shifted[y0:y1, x0:x1]),
        ContactMask(mask_px[y0:y1, x0:x1], True),
    )
    assert full == pytest.approx(1.2, abs=0.12)
    assert abs(full - crop) < 0.02


# --- extractor ----------------------------------------------------------


def contact_frame(level, block=None):
    img = np.full((60, 80), level, np.uint8)
    if block is not None:
        img[20:40, 30:55] = block
    return img


def test_extractor_first_frame_becomes_reference():
    ex = ProxyExtractor(tau=20.0)
    sample = ex.process(0, contact_frame(30), contact_frame(30))
    assert not sample.left.contact_valid and not sample.right.contact_valid
    assert sample.left.fn_raw == 0.0
    assert ex.references[Side.LEFT].captured_at == 0


def test_extractor_detects_block_against_reference():
    ex = ProxyExtractor(tau=20.0)
    ex.process(0, contact_frame(30), contact_frame(30))
    s = ex.process(83333, contact_frame(30, block=100), contact_frame(30))
    assert s.left.contact_valid and not s.right.contact_valid
    assert s.left.cop is not None and s.right.cop is None
    assert s.mean_cop_y is None
    # block center: rows 20..39 -> 29.5, cols 30..54 -> 42.0
    assert s.left.cop == pytest.approx((42.0, 29.5), abs=1e-6)


def test_extractor_flow_needs_previous_frame_and_contact():
    ex = ProxyExtractor(tau=20.0)
    blank = contact_frame(30)
    ex.references = {
        Side.LEFT: ReferenceFrame(blank.copy(), captured_at=0),
        Side.RIGHT: ReferenceFrame(blank.copy(), captured_at=0),
    }
    s1 = ex.process(1, contact_frame(30, block=100), contact_frame(30))
    assert s1.left.contact_valid
    assert s1.left.sy_raw == 0.0  # valid contact but no previous frame yet
    s2 = ex.process(2, contact_frame(30, block=100), contact_frame(30))
    assert s2.left.sy_raw == pytest.approx(0.0, abs=0.05)
    assert s2.right.sy_raw == 0.0  # invalid side never reports shear


def test_extractor_is_deterministic():
    rng = np.random.default_rng(31)
    frames = [
        (rng.integers(0, 256, (60, 80), dtype=np.uint8),
         rng.integers(0, 256, (60, 80), dtype=np.uint8))
        for _ in range(6)
    ]
    runs = []
    for _ in range(2):
        ex = ProxyExtractor(tau=20.0)
        runs.append([ex.process(i, l.copy(), r.copy()) for i, (l, r) in enumerate(frames)])
    assert runs[0] == runs[1]


def test_extractor_refreshes_reference_when_idle():
    assert REFERENCE_REFRESH_FRAMES == 30
    ex = ProxyExtractor(tau=20.0)
    a, b = contact_frame(30), contact_frame(36)
    ex.process(0, a, a, idle=True)
    for i in range(1, 30):
        ex.process(i, b, b, idle=True)
    np.testing.assert_array_equal(ex.references[Side.LEFT].pixels, b)
    assert ex.references[Side.LEFT].captured_at == 29
    # against the refreshed baseline this frame is quiet; against the
    # original it would have been full-frame contact
    probe = ex.process(30, contact_frame(52), contact_frame(52))
    assert not probe.left.contact_valid and not probe.right.contact_valid


def test_extractor_never_refreshes_outside_idle():
    ex = ProxyExtractor(tau=20.0)
    a, b = contact_frame(30), contact_frame(36)
    ex.process(0, a, a, idle=True)
    for i in range(1, 40):
        ex.process(i, b, b, idle=False)
    np.testing.assert_array_equal(ex.references[Side.LEFT].pixels, a)


def test_extractor_contact_interrupts_idle_streak():
    ex = ProxyExtractor(tau=20.0)
    a = contact_frame(30)
    ex.process(0, a, a, idle=True)
    for i in range(1, 25):
        ex.process(i, contact_frame(36), contact_frame(36), idle=True)
    ex.process(25, contact_frame(30, block=120), contact_frame(30), idle=True)
    for i in range(26, 40):
        ex.process(i, contact_frame(36), contact_frame(36), idle=True)
    # streak restarted at 26, so fewer than 30 quiet frames since
    np.testing.assert_array_equal(ex.references[Side.LEFT].pixels, a)


def test_extractor_diff_hook_sees_every_side():
    seen = []
    ex = ProxyExtractor(tau=20.0, diff_hook=lambda ts, side, diff: seen.append((ts, side, diff.shape)))
    ex.process(7, contact_frame(30), contact_frame(30))
    assert seen == [(7, Side.LEFT, (60, 80)), (7, Side.RIGHT, (60, 80))]
