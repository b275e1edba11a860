import numpy as np
import pytest

from satstereo.groundtruth import SparseDisparity
from satstereo.sgm import (SgmParams, _path, census_cost_volume, census_transform,
                           remove_speckles, sgm_aggregate, sgm_disparity, subpixel_offset,
                           wta_disparity)


def brute_census(img, window):
    h, w = img.shape
    r = window // 2
    out = np.zeros((h, w), dtype=np.uint64)
    for y in range(h):
        for x in range(w):
            bit = 0
            sig = 0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    if dy == 0 and dx == 0:
                        continue
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    if img[yy, xx] < img[y, x]:
                        sig |= 1 << bit
                    bit += 1
            out[y, x] = sig
    return out


def test_census_constant_image():
    assert not census_transform(np.full((6, 7), 3.0), 5).any()


def test_census_ramp_sets_left_neighbours():
    img = np.tile(np.arange(8, dtype=float), (5, 1))
    sig = census_transform(img, 3)
    # Row-major neighbour order: bits 0, 3 and 5 are the left column.
    assert (sig[1:-1, 1:-1] == (1 << 0) | (1 << 3) | (1 << 5)).all()


@pytest.mark.parametrize("window", [3, 5, 7])
def test_census_matches_brute_force(window, rng):
    img = rng.integers(0, 6, (9, 11)).astype(float)
    np.testing.assert_array_equal(census_transform(img, window), brute_census(img, window))


def test_census_window_validation():
    with pytest.raises(ValueError):
        census_transform(np.zeros((3, 3)), 4)
    with pytest.raises(ValueError):
        census_transform(np.zeros((3, 3)), 9)


def test_hamming_costs(rng):
    left = rng.random((6, 10))
    costs = census_cost_volume(left, left, 4, window=3)
    assert costs.shape == (4, 6, 10)
    assert not costs[0].any()
    assert (costs[3, :, :3] == 8).all()  # out of image: full signature length


def test_zero_penalty_is_scaled_raw_costs(rng):
    costs = rng.integers(0, 25, (6, 7, 9)).astype(np.int32)
    for paths in (4, 8):
        agg = sgm_aggregate(costs, SgmParams(p1=0, p2=0, paths=paths))
        np.testing.assert_array_equal(agg, paths * costs.astype(np.int64))


def test_hand_stepped_single_path():
    # Two pixels on one row, D = 2, path running left to right.
    cost = np.array([[[5, 1], [2, 4]]], dtype=np.int64)  # (H, W, D)
    total = np.zeros_like(cost)
    _path(cost, 0, 1, np.int64(3), np.int64(6), total)
    # Pixel 1: min L0 = 1; d=0 -> 2 + min(5, 1+3, 1+6) - 1 = 5; d=1 -> 4 + min(1, 5+3, 7) - 1 = 4.
    np.testing.assert_array_equal(total[0], [[5, 1], [5, 4]])


def test_constant_costs_keep_argmin(rng):
    profile = rng.integers(0, 30, 12)
    costs = np.broadcast_to(profile[:, None, None], (12, 8, 9)).astype(np.int32)
    agg = sgm_aggregate(costs, SgmParams())
    assert (agg.argmin(axis=0) == profile.argmin()).all()


def test_float_costs_use_float_path(rng):
    costs = rng.random((5, 4, 6))
    agg = sgm_aggregate(costs, SgmParams(p1=0.5, p2=2.5))
    assert agg.dtype == np.float64 and agg.shape == costs.shape


def wta_single(profile, **kw):
    c = np.asarray(profile, dtype=np.float64)[:, None, None]
    return wta_disparity(c, **kw).values[0, 0]


def test_wta_symmetric_minimum():
    c = np.full(12, 9.0)
    c[6], c[7], c[8] = 5.0, 2.0, 5.0
    assert wta_single(c) == 7.0


def test_subpixel_parabola():
    assert subpixel_offset(4.0, 1.0, 2.0) == 0.25
    c = np.full(10, 9.0)
    c[3], c[4], c[5] = 4.0, 1.0, 2.0
    assert wta_single(c) == 4.25


def test_wta_range_and_offsets(rng):
    agg = rng.random((9, 10, 12))
    d = wta_disparity(agg).values
    assert d.min() >= 0 and d.max() <= 8
    off = subpixel_offset(rng.random(100), np.zeros(100), rng.random(100))
    assert (np.abs(off) < 0.5).all()


def textured(rng, h, w):
    return rng.random((h, w)) * 255


def test_integer_shift_recovered(rng):
    h, w, s = 40, 80, 7
    tex = textured(rng, h, w + s)
    left, right = tex[:, :w], tex[:, s:w + s]  # left(x) = right(x - s)
    params = SgmParams(max_disparity=16, speckle_size=0)
    disp = sgm_disparity(left, right, params, lr_check=False, subpixel=False)
    unoccluded = np.zeros((h, w), bool)
    unoccluded[:, s:] = True
    assert np.mean(disp.values[unoccluded] == s) >= 0.99


def test_lr_check_flags_half_occlusion(rng):
    h, w = 30, 120
    fg, bg = 10, 2
    x0, x1 = 40, 80  # foreground columns in the left image
    t_bg = textured(rng, h, w + 20)
    t_fg = textured(rng, h, w + 20)
    xs = np.arange(w)
    left = np.where((xs >= x0) & (xs < x1), t_fg[:, xs], t_bg[:, xs])
    rx = xs
    in_fg = (rx + fg >= x0) & (rx + fg < x1)
    right = np.where(in_fg, t_fg[:, np.minimum(rx + fg, w + 19)], t_bg[:, np.minimum(rx + bg, w + 19)])
    params = SgmParams(max_disparity=16, p1=5, p2=40, speckle_size=0)
    disp = sgm_disparity(left, right, params, lr_check=True)
    band = np.zeros((h, w), bool)
    band[:, x0 - (fg - bg):x0] = True  # background seen by the left image only
    border = np.zeros((h, w), bool)
    border[:, :bg] = True
    invalid = ~disp.valid
    assert invalid[band].mean() >= 0.9
    # Nothing outside the band (one pixel of slack) and the left border is rejected.
    slack = band.copy()
    slack[:, x0 - (fg - bg) - 1:x0 + 1] = True
    assert invalid[~slack & ~border].mean() < 0.01


def test_speckles_removed():
    v = np.full((20, 20), 5.0)
    v[8:11, 8:11] = 15.0
    disp = remove_speckles(SparseDisparity(v, np.ones((20, 20), bool)), max_size=9, max_diff=1.0)
    assert not disp.valid[8:11, 8:11].any()
    assert disp.valid.sum() == 400 - 9
    kept = remove_speckles(SparseDisparity(v, np.ones((20, 20), bool)), max_size=8)
    assert kept.valid.all()
    same = remove_speckles(SparseDisparity(v, np.ones((20, 20), bool)), max_size=0)
    assert same.valid.all()


def test_speckle_connectivity_uses_disparity_step():
    v = np.tile(np.arange(10, dtype=float) * 0.9, (3, 1))  # gentle ramp: one component
    assert remove_speckles(SparseDisparity(v, np.ones(v.shape, bool)), max_size=29).valid.all()
    v2 = np.tile(np.arange(10, dtype=float) * 1.1, (3, 1))  # steps > 1 px: ten columns of 3
    assert not remove_speckles(SparseDisparity(v2, np.ones(v2.shape, bool)), max_size=3).valid.any()


def test_params_validation():
    for bad in (dict(paths=6), dict(census_window=4), dict(census_window=9),
                dict(p1=5, p2=2), dict(p1=-1), dict(max_disparity=0), dict(speckle_size=-1)):
        with pytest.raises(ValueError):
            SgmParams(**bad)
