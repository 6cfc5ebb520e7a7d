import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lowbridge.edge import (
    CannyParams,
    extract_edges,
    gaussian_blur,
    gaussian_kernel1d,
    hysteresis,
    non_max_suppression,
    sobel_gradients,
)


def disk(size=64, radius=20.0, center=None):
    c = (size - 1) / 2 if center is None else center
    yy, xx = np.mgrid[:size, :size]
    return ((yy - c) ** 2 + (xx - c) ** 2 <= radius ** 2).astype(np.float64)


def flood_oracle(sup, low, high):
    """BFS from every strong pixel through 8-connected weak ones."""
    h, w = sup.shape
    out = np.zeros((h, w), np.uint8)
    queue = deque((r, c) for r in range(h) for c in range(w) if sup[r, c] >= high)
    for r, c in queue:
        out[r, c] = 1
    while queue:
        r, c = queue.popleft()
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and not out[rr, cc] and sup[rr, cc] >= low:
                    out[rr, cc] = 1
                    queue.append((rr, cc))
    return out


def total_variation(img):
    return np.abs(np.diff(img, axis=0)).sum() + np.abs(np.diff(img, axis=1)).sum()


# ---- params --------------------------------------------------------------------


def test_default_radius_is_three_sigma():
    assert CannyParams(sigma=1.4).kernel_radius == 5
    assert CannyParams(sigma=2.0).kernel_radius == 6


@pytest.mark.parametrize(
    "kwargs",
    [dict(sigma=0), dict(low_ratio=0.3, high_ratio=0.2), dict(low_ratio=0.0), dict(high_ratio=1.5), dict(kernel_radius=0)],
)
def test_params_validation(kwargs):
    with pytest.raises(ValueError):
        CannyParams(**kwargs)


def test_params_dict_round_trip():
    p = CannyParams(sigma=2.0, low_ratio=0.05, high_ratio=0.3)
    assert CannyParams.from_dict(p.to_dict()) == p
    with pytest.raises(ValueError):
        CannyParams.from_dict({"sigma": 1.0, "bogus": 1})


# ---- blur ------------------------------------------------------------------------


def test_blur_constant_unchanged():
    img = np.full((12, 9), 0.37)
    np.testing.assert_allclose(gaussian_blur(img, 1.4, 5), img, rtol=1e-14)


def test_blur_impulse_peak_and_symmetry():
    img = np.zeros((21, 21))
    img[10, 10] = 1.0
    out = gaussian_blur(img, 1.0, 3)
    k = gaussian_kernel1d(1.0, 3)
    assert out[10, 10] == pytest.approx(k[3] ** 2, rel=1e-14)
    np.testing.assert_allclose(out, out.T, atol=1e-16)
    np.testing.assert_allclose(out, out[::-1, ::-1], atol=1e-16)


def test_blur_reduces_total_variation():
    rng = np.random.default_rng(3)
    for _ in range(100):
        img = rng.random((rng.integers(8, 20), rng.integers(8, 20)))
        assert total_variation(gaussian_blur(img, 1.4, 5)) <= total_variation(img) + 1e-12


# ---- sobel -----------------------------------------------------------------------


def test_sobel_constant_is_flat():
    _, _, mag, _ = sobel_gradients(np.full((8, 8), 0.6))
    assert np.all(mag == 0)


def test_sobel_vertical_step():
    img = np.zeros((7, 8))
    img[:, 4:] = 1.0
    gx, gy, mag, bins = sobel_gradients(img)
    interior = slice(1, -1)
    assert np.all(gx[interior, 3] == 4.0) and np.all(gx[interior, 4] == 4.0)
    assert np.all(gy[interior] == 0.0)
    assert np.all(bins[interior, 3:5] == 0)


def test_sobel_rotation_swaps_components():
    img = np.random.default_rng(1).random((10, 10))
    gx, gy, _, _ = sobel_gradients(img)
    rx, ry, _, _ = sobel_gradients(np.rot90(img))
    np.testing.assert_allclose(np.abs(rx), np.abs(np.rot90(gy)), atol=1e-12)
    np.testing.assert_allclose(np.abs(ry), np.abs(np.rot90(gx)), atol=1e-12)


@pytest.mark.parametrize("angle,expected", [(0, 0), (45, 1), (90, 2), (135, 3), (180, 0), (-45, 3)])
def test_direction_bins(angle, expected):
    yy, xx = np.mgrid[:9, :9].astype(np.float64)
    t = math.radians(angle)
    _, _, _, bins = sobel_gradients(xx * math.cos(t) + yy * math.sin(t))
    assert np.all(bins[1:-1, 1:-1] == expected)


# ---- non-maximum suppression --------------------------------------------------------


def test_nms_keeps_impulse():
    mag = np.zeros((5, 5))
    mag[2, 2] = 3.0
    for b in range(4):
        sup = non_max_suppression(mag, np.full((5, 5), b, np.int8))
        assert sup[2, 2] == 3.0 and sup.sum() == 3.0


def test_nms_keeps_plateau():
    mag = np.ones((5, 5))
    sup = non_max_suppression(mag, np.zeros((5, 5), np.int8))
    assert np.all(sup[1:-1, 1:-1] == 1.0)
    assert np.all(sup[0] == 0) and np.all(sup[:, -1] == 0)


def test_nms_ramp_ridge_is_one_pixel_thick():
    xx = np.tile(np.arange(24, dtype=np.float64), (10, 1))
    _, _, mag, bins = sobel_gradients(np.tanh((xx - 11.3) / 2.0))
    sup = non_max_suppression(mag, bins)
    kept = sup[1:-1] > 0
    assert np.all(kept.sum(axis=1) == 1)
    assert np.all(kept[:, 11])


# ---- hysteresis -----------------------------------------------------------------


def test_hysteresis_all_below_low():
    assert not hysteresis(np.full((4, 4), 0.1), 0.2, 0.5).any()


def test_hysteresis_weak_chain_and_island():
    sup = np.zeros((5, 5))
    sup[0, 0] = 1.0
    for i in (1, 2, 3):
        sup[i, i] = 0.5
    sup[4, 1] = 0.5  # touches no chain pixel
    out = hysteresis(sup, 0.3, 0.8)
    expect = np.zeros((5, 5), np.float32)
    for i in range(4):
        expect[i, i] = 1
    np.testing.assert_array_equal(out, expect)


def test_hysteresis_rejects_inverted_thresholds():
    with pytest.raises(ValueError):
        hysteresis(np.zeros((3, 3)), 0.5, 0.5)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.05, 0.5), st.floats(0.05, 0.45))
def test_hysteresis_matches_flood_fill(seed, low, gap):
    sup = np.random.default_rng(seed).random((9, 11))
    sup[sup < 0.3] = 0
    high = low + gap
    np.testing.assert_array_equal(hysteresis(sup, low, high), flood_oracle(sup, low, high))


# ---- full detector ----------------------------------------------------------------


def test_constant_image_has_no_edges():
    em = extract_edges(np.full((32, 32), 0.4))
    assert em.data.dtype == np.float32 and not em.data.any()


def test_disk_boundary_localization():
    r, c = 20.0, 31.5
    em = extract_edges(disk(64, r))
    ys, xs = np.nonzero(em.data)
    dist = np.abs(np.hypot(ys - c, xs - c) - r)
    assert dist.max() <= 1.5
    assert 0.8 <= len(ys) / (2 * math.pi * r) <= 1.3


@pytest.mark.parametrize("col", [10, 20, 33])
def test_step_edge_localization(col):
    img = np.zeros((32, 48))
    img[:, col:] = 1.0
    _, xs = np.nonzero(extract_edges(img).data)
    assert len(xs) > 0
    assert np.all(np.abs(xs - (col - 0.5)) <= 1.0)


@pytest.mark.parametrize("scale", [0.25, 0.5, 2.0, 8.0])
def test_scale_invariance_powers_of_two(scale):
    img = disk(48, 14.0) * 0.7 + 0.1
    np.testing.assert_array_equal(extract_edges(img).data, extract_edges(img * scale).data)


@pytest.mark.parametrize("scale", [0.3, 3.7, 100.0])
def test_scale_invariance_general(scale):
    rng = np.random.default_rng(5)
    img = gaussian_blur(rng.random((40, 40)), 2.0, 6)
    np.testing.assert_array_equal(extract_edges(img).data, extract_edges(img * scale).data)


def test_threshold_monotonicity():
    rng = np.random.default_rng(11)
    img = disk(48, 12.0) + 0.2 * rng.random((48, 48))
    prev = None
    for low, high in [(0.05, 0.1), (0.1, 0.2), (0.15, 0.3), (0.3, 0.5), (0.5, 0.8)]:
        cur = extract_edges(img, CannyParams(low_ratio=low, high_ratio=high)).data.astype(bool)
        if prev is not None:
            assert not (cur & ~prev).any()
        prev = cur


def test_extract_edges_validation():
    with pytest.raises(ValueError):
        extract_edges(np.zeros((2, 10)))
    bad = np.zeros((8, 8))
    bad[1, 1] = np.nan
    with pytest.raises(ValueError):
        extract_edges(bad)


def test_edge_map_carries_source():
    em = extract_edges(disk(32, 8.0), source="img_7")
    assert em.source == "img_7" and em.shape == (32, 32)
    assert set(np.unique(em.data)) <= {0.0, 1.0}
