import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ofnet.metrics import (
    Contour,
    ContourError,
    apd,
    area_curve,
    dice,
    evaluate_sequence,
    extract_contours,
    marching_squares,
    temporal_smoothness,
)

from oracles import apd_brute, apd_dense_sampling


def disk_in_ring_mask(size=64, r_pool=10.0, r_outer=16.0):
    y, x = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    d = np.hypot(x - c, y - c)
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[d <= r_outer] = 1
    mask[d <= r_pool] = 2
    return mask, c


def circle_contour(r, n=256, cx=0.0, cy=0.0):
    theta = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    return Contour(np.stack([cx + r * np.cos(theta), cy + r * np.sin(theta)], axis=1))


# ---------------------------------------------------------------------------
# dice
# ---------------------------------------------------------------------------


def test_dice_identical_nonempty():
    mask = np.zeros((6, 6), int)
    mask[2:4, 2:4] = 1
    assert dice(mask, mask, 1) == 1.0


def test_dice_disjoint_masks():
    a = np.zeros((6, 6), int)
    b = np.zeros((6, 6), int)
    a[0, 0] = 1
    b[5, 5] = 1
    assert dice(a, b, 1) == 0.0


def test_dice_closed_form_half():
    a = np.zeros((4, 4), int)
    b = np.zeros((4, 4), int)
    a[0] = 1  # |A| = 4
    b[0, 2:] = 1
    b[1, :2] = 1  # |B| = 4, overlap 2
    assert dice(a, b, 1) == 0.5


def test_dice_both_empty_is_one():
    assert dice(np.zeros((3, 3), int), np.zeros((3, 3), int), 2) == 1.0


def test_dice_symmetry_random(rng):
    for _ in range(20):
        a = rng.integers(0, 3, size=(8, 8))
        b = rng.integers(0, 3, size=(8, 8))
        for cls in (1, 2):
            assert dice(a, b, cls) == dice(b, a, cls)


@given(st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_dice_matches_set_arithmetic(seed):
    gen = np.random.default_rng(seed)
    a = gen.integers(0, 3, size=(7, 7))
    b = gen.integers(0, 3, size=(7, 7))
    sa = {tuple(p) for p in np.argwhere(a == 1)}
    sb = {tuple(p) for p in np.argwhere(b == 1)}
    expected = 1.0 if not sa and not sb else 2 * len(sa & sb) / (len(sa) + len(sb))
    assert dice(a, b, 1) == expected


# ---------------------------------------------------------------------------
# contours
# ---------------------------------------------------------------------------


def test_disk_in_ring_contour_radii():
    mask, c = disk_in_ring_mask()
    endo, epi = extract_contours(mask)
    r_endo = np.hypot(endo.points[:, 0] - c, endo.points[:, 1] - c)
    r_epi = np.hypot(epi.points[:, 0] - c, epi.points[:, 1] - c)
    assert np.abs(r_endo - 10.0).max() < 0.6
    assert np.abs(r_epi - 16.0).max() < 0.6
    assert endo.region == "endocardium" and epi.region == "epicardium"


def test_single_pixel_pool_contour():
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[3:6, 3:6] = 1
    mask[4, 4] = 2
    endo, _ = extract_contours(mask)
    assert len(endo.points) >= 3


@pytest.mark.parametrize("radius", [4.0, 6.0, 9.0, 12.0, 16.0])
def test_rasterized_disk_radius_recovered(radius):
    size = 48
    y, x = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    binary = (np.hypot(x - c, y - c) <= radius).astype(float)
    loops = marching_squares(binary)
    points = max(loops, key=len)
    r = np.hypot(points[:, 0] - c, points[:, 1] - c)
    assert np.abs(r - radius).max() < 0.6


def test_missing_class_raises_named_error():
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[2:6, 2:6] = 2  # pool with no ring
    with pytest.raises(ContourError, match="epicardial"):
        extract_contours(mask)
    with pytest.raises(ContourError, match="endocardial"):
        extract_contours(np.where(mask == 2, 1, 0))


def test_marching_squares_square_region():
    binary = np.zeros((6, 6))
    binary[2:4, 2:4] = 1.0
    loops = marching_squares(binary)
    assert len(loops) == 1
    # 2x2 block boundary: 8 crossing points, all half a pixel out
    assert len(loops[0]) == 8
    xs, ys = loops[0][:, 0], loops[0][:, 1]
    assert xs.min() == 1.5 and xs.max() == 3.5
    assert ys.min() == 1.5 and ys.max() == 3.5


def test_marching_squares_separates_components():
    binary = np.zeros((8, 8))
    binary[1:3, 1:3] = 1.0
    binary[5:7, 5:7] = 1.0
    assert len(marching_squares(binary)) == 2


def test_marching_squares_diagonal_pixels_stay_separate():
    binary = np.zeros((4, 4))
    binary[1, 1] = 1.0
    binary[2, 2] = 1.0
    assert len(marching_squares(binary)) == 2


def test_contour_validation():
    with pytest.raises(ValueError):
        Contour(np.zeros((2, 2)))


# ---------------------------------------------------------------------------
# apd
# ---------------------------------------------------------------------------


def test_apd_identical_contour_zero():
    square = Contour(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]))
    assert apd(square, square) == 0.0


def test_apd_shifted_unit_square_matches_brute_force():
    square = Contour(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]))
    shifted = Contour(square.points + [1.0, 0.0])
    expected = apd_brute(square.points, shifted.points)
    assert np.isclose(apd(square, shifted), expected)
    # frozen from the brute-force oracle: the squares share an edge, so half
    # the vertices sit on the other contour
    assert np.isclose(expected, 0.5)


def test_apd_concentric_circles():
    inner = circle_contour(10.0)
    outer = circle_contour(12.0)
    assert abs(apd(inner, outer) - 2.0) < 0.1


def test_apd_translation_invariance(rng):
    pts = rng.uniform(0, 10, size=(12, 2))
    a = Contour(pts)
    b = Contour(rng.uniform(0, 10, size=(15, 2)))
    shift = np.array([37.5, -12.25])
    moved = apd(Contour(a.points + shift), Contour(b.points + shift))
    assert np.isclose(moved, apd(a, b), rtol=1e-12)


def test_apd_symmetry(rng):
    a = Contour(rng.uniform(0, 10, size=(9, 2)))
    b = Contour(rng.uniform(0, 10, size=(11, 2)))
    assert apd(a, b) == apd(b, a)


def test_apd_pixel_spacing_scales():
    inner = circle_contour(10.0)
    outer = circle_contour(12.0)
    assert np.isclose(apd(inner, outer, pixel_spacing=2.0), 2.0 * apd(inner, outer))


def test_apd_matches_brute_force_random(rng):
    for _ in range(10):
        a = Contour(rng.uniform(0, 8, size=(rng.integers(3, 10), 2)))
        b = Contour(rng.uniform(0, 8, size=(rng.integers(3, 10), 2)))
        assert np.isclose(apd(a, b), apd_brute(a.points, b.points), rtol=1e-12)


def test_apd_dense_sampling_oracle_on_mask_contours(rng):
    """Nearest-segment distances agree with densely sampled boundaries."""
    for _ in range(5):
        masks = []
        while len(masks) < 2:
            m = rng.integers(0, 2, size=(10, 10)).astype(float)
            if m.sum() >= 3:
                masks.append(m)
        loops_a = marching_squares(masks[0])
        loops_b = marching_squares(masks[1])
        a = Contour(max(loops_a, key=len))
        b = Contour(max(loops_b, key=len))
        dense = apd_dense_sampling(a.points, b.points, samples_per_segment=1024)
        assert abs(apd(a, b) - dense) < 1e-6


# ---------------------------------------------------------------------------
# area and smoothness
# ---------------------------------------------------------------------------


def test_area_all_empty():
    masks = [np.zeros((5, 5), int) for _ in range(4)]
    assert area_curve(masks, 1) == [0.0] * 4


def test_area_block():
    mask = np.zeros((6, 6), int)
    mask[1:4, 1:4] = 1
    assert area_curve([mask], 1) == [9.0]


def test_area_matches_brute_count(rng):
    masks = [rng.integers(0, 3, size=(7, 7)) for _ in range(6)]
    curve = area_curve(masks, 2)
    for value, mask in zip(curve, masks):
        count = sum(1 for y in range(7) for x in range(7) if mask[y, x] == 2)
        assert value == count


def test_area_spacing_squared():
    mask = np.zeros((4, 4), int)
    mask[0, 0] = 1
    assert area_curve([mask], 1, pixel_spacing=2.0) == [4.0]


def test_smoothness_constant_zero():
    assert temporal_smoothness([5.0, 5.0, 5.0, 5.0]) == 0.0


def test_smoothness_linear_ramp_zero():
    assert temporal_smoothness([1.0, 2.0, 3.0, 4.0]) == 0.0


def test_smoothness_alternating_closed_form():
    assert temporal_smoothness([0.0, 1.0, 0.0, 1.0]) == 16.0


def test_smoothness_needs_three_points():
    with pytest.raises(ValueError):
        temporal_smoothness([1.0, 2.0])


@given(st.floats(min_value=0.1, max_value=1000.0), st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_smoothness_scale_invariance(scale, seed):
    curve = np.random.default_rng(seed).uniform(1.0, 10.0, size=8)
    a = temporal_smoothness(curve)
    b = temporal_smoothness(scale * curve)
    assert math.isclose(a, b, rel_tol=1e-9)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def test_evaluate_sequence_perfect_prediction():
    from ofnet.phantom import generate_phantom, preset_config

    seq = generate_phantom(preset_config("middle", seed=4))
    report = evaluate_sequence(seq.labels, seq.labels, preset="middle")
    assert all(v == 1.0 for v in report.dice_myo)
    assert all(v == 1.0 for v in report.dice_bp)
    assert all(v == 0.0 for v in report.apd_endo)
    assert all(v == 0.0 for v in report.apd_epi)
    assert report.area_bp == report.gt_area_bp


def test_report_csv_layout(tmp_path):
    from ofnet.phantom import generate_phantom, preset_config

    seq = generate_phantom(preset_config("middle", seed=4))
    report = evaluate_sequence(seq.labels, seq.labels, preset="middle")
    path = tmp_path / "metrics.csv"
    report.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "frame,dice_myo,dice_bp,apd_endo,apd_epi,area_myo,area_bp"
    assert len(lines) == 1 + seq.n_frames


def test_report_degenerate_prediction_gets_nan_apd():
    from ofnet.phantom import generate_phantom, preset_config

    seq = generate_phantom(preset_config("middle", seed=4))
    empty = [np.zeros_like(m) for m in seq.labels]
    report = evaluate_sequence(empty, seq.labels)
    assert all(math.isnan(v) for v in report.apd_endo)
    assert all(v == 0.0 for v in report.dice_myo)
    summary = report.summary()
    assert summary["apd_endo"]["mean"] is None
    assert summary["dice_myo"]["mean"] == 0.0
