import math

import numpy as np
import pytest

from satstereo.errors import ConfigError, ShapeError
from satstereo.nn import autograd as ag
from satstereo.nn.autograd import Tensor
from satstereo.nn.config import NetworkConfig
from satstereo.nn.network import (ForwardBackend, _context_branches, extract_features, forward,
                                  init_params, layer_shapes, param_shapes)


def table_shapes(cfg, h, w, batch=1):
    """Layer output shapes written out by hand from the reference layer layout.

    The concat row carries the sum of its inputs' channels and the cost
    volume has 2F channels; the hourglass ConvB row uses 2b filters so the
    DeconvE skip addition is well formed.
    """
    b, d = cfg.base_channels, cfg.max_disparity
    h2, w2, h4, w4 = h // 2, w // 2, h // 4, w // 4
    d4 = d // 4

    def half(n):
        return math.ceil(n / 2)

    n_ctx = (len(cfg.spp_pool_sizes) if cfg.pooling_mode == "spp"
             else 2 * len(cfg.crosshair_bands))
    s = {
        "Input": (batch, 1, h, w),
        "FeX_InitialA": (batch, b, h2, w2),
        "FeX_InitialB": (batch, b, h2, w2),
        "FeX_InitialC": (batch, b, h2, w2),
        "FeX_BlockStack0": (batch, b, h2, w2),
        "FeX_BlockStack1": (batch, 2 * b, h4, w4),
        "FeX_BlockStack2": (batch, 4 * b, h4, w4),
        "FeX_BlockStack3": (batch, 4 * b, h4, w4),
        "FeX_Concat": (batch, 2 * b + 4 * b + n_ctx * b, h4, w4),
        "FeX_LastConvA": (batch, 4 * b, h4, w4),
        "FeX_LastConvB": (batch, b, h4, w4),
        "CostVolume": (batch, 2 * b, d4, h4, w4),
        "PreHourglassBlock": (batch, b, d4, h4, w4),
    }
    if cfg.pooling_mode == "spp":
        for i in range(len(cfg.spp_pool_sizes)):
            s[f"FeX_SPP{i}"] = (batch, b, h4, w4)
    else:
        for band in cfg.crosshair_bands:
            s[f"FeX_CrosshairH{band}"] = s[f"FeX_CrosshairV{band}"] = (batch, b, h4, w4)
    e8 = (half(d4), half(h4), half(w4))
    e16 = tuple(half(n) for n in e8)
    for k in range(cfg.hourglass_count):
        g = f"Hourglass{k}"
        s[f"{g}_ConvA"] = (batch, 2 * b) + e8
        s[f"{g}_ConvB"] = (batch, 2 * b) + e8
        s[f"{g}_ConvC"] = (batch, 2 * b) + e16
        s[f"{g}_ConvD"] = (batch, 2 * b) + e16
        s[f"{g}_DeconvE"] = (batch, 2 * b) + e8
        s[f"{g}_DeconvF"] = (batch, b, d4, h4, w4)
        s[g] = (batch, b, d4, h4, w4)
        s[f"DispReg{k}_Volume"] = (batch, d, h, w)
        s[f"DispReg{k}"] = (batch, h, w)
    return s


CONFIGS = [
    (NetworkConfig(), 256, 512),
    (NetworkConfig(spp_pool_sizes=(64, 32, 32, 32)), 256, 512),
    (NetworkConfig.toy(), 32, 64),
    (NetworkConfig.toy(base_channels=16, max_disparity=64), 64, 128),
    (NetworkConfig.toy(pooling_mode="crosshair"), 32, 64),
    (NetworkConfig.toy(upsample_mode="cubic", max_disparity=48, base_channels=4), 48, 96),
    (NetworkConfig(base_channels=8, max_disparity=96, block_repeats=(2, 3, 1, 2),
                   spp_pool_sizes=(16, 8, 4, 2), hourglass_count=2), 64, 128),
]


@pytest.mark.parametrize("cfg,h,w", CONFIGS)
def test_layer_shapes_match_table(cfg, h, w):
    got = layer_shapes(cfg, h, w)
    assert got == table_shapes(cfg, h, w)


def test_full_config_feature_shape():
    assert layer_shapes(NetworkConfig(), 256, 512)["FeX_LastConvB"] == (1, 32, 64, 128)
    assert layer_shapes(NetworkConfig.toy(), 32, 64)["FeX_LastConvB"] == (1, 8, 8, 16)


def test_spp_64_pool_grid():
    # A 64x64 window on the 64x128 feature map pools to a 1x2 grid.
    x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 64, 128)))
    assert ag.avg_pool(x, (64, 64)).shape == (1, 1, 1, 2)


def test_hourglass_encoder_stages():
    cfg = NetworkConfig.toy()
    s = layer_shapes(cfg, 64, 128)
    assert s["CostVolume"] == (1, 16, 8, 16, 32)
    assert s["Hourglass0_ConvA"][2:] == (4, 8, 16)
    assert s["Hourglass0_ConvC"][2:] == (2, 4, 8)
    assert s["Hourglass0_DeconvF"][2:] == (8, 16, 32)
    assert s["Hourglass0"] == s["Hourglass1"] == s["Hourglass2"]


def test_shape_errors():
    with pytest.raises(ShapeError):
        layer_shapes(NetworkConfig.toy(), 40, 64)
    with pytest.raises(ShapeError):
        layer_shapes(NetworkConfig.toy(spp_pool_sizes=(32, 4, 2, 1)), 32, 64)
    with pytest.raises(ShapeError):
        layer_shapes(NetworkConfig.toy(pooling_mode="crosshair", crosshair_bands=(3,)), 32, 64)


def test_config_validation():
    with pytest.raises(ConfigError):
        NetworkConfig(max_disparity=30)
    with pytest.raises(ConfigError):
        NetworkConfig(pooling_mode="pyramid")
    with pytest.raises(ConfigError):
        NetworkConfig(block_repeats=(1, 1, 1))


def test_forward_shapes_agree_with_shape_backend():
    cfg = NetworkConfig.toy()
    params = init_params(cfg, seed=1, dtype=np.float64)
    x = np.random.default_rng(2).normal(size=(2, 1, 32, 64))
    out, trace = forward(params, x, x, cfg)
    assert trace == layer_shapes(cfg, 32, 64, batch=2)
    assert len(out.disparities) == 3
    assert out.disparities[-1].shape == (2, 32, 64)
    assert all(c.shape == (2, 8, 8, 16) for c in out.costs)


def test_param_shapes_cover_init():
    cfg = NetworkConfig.toy()
    params = init_params(cfg, seed=0)
    assert set(params) == set(param_shapes(cfg))
    assert all(params[k].shape == v for k, v in param_shapes(cfg).items())
    again = init_params(cfg, seed=0)
    assert all(np.array_equal(params[k], again[k]) for k in params)


def test_zero_input_zero_features():
    cfg = NetworkConfig.toy()
    params = init_params(cfg, seed=3, dtype=np.float64)
    out = extract_features(ForwardBackend(params), Tensor(np.zeros((1, 1, 32, 64))), cfg)
    assert out.shape == (1, 8, 8, 16)
    assert not out.data.any()


def test_zero_weights_zero_costs():
    cfg = NetworkConfig.toy()
    params = {k: np.zeros_like(v, dtype=np.float64) for k, v in init_params(cfg).items()}
    x = np.random.default_rng(0).normal(size=(1, 1, 32, 64))
    out, _ = forward(params, x, x, cfg)
    for c in out.costs:
        assert not c.data.any()
    # Uniform costs regress to the middle of the range.
    np.testing.assert_allclose(out.disparities[-1].data, (cfg.max_disparity - 1) / 2, atol=1e-9)


@pytest.mark.parametrize("mode", ["spp", "crosshair"])
def test_context_pooling_preserves_constants(mode):
    cfg = NetworkConfig(base_channels=1, max_disparity=16, block_repeats=(1, 1, 1, 1),
                        spp_pool_sizes=(8, 4, 2, 1), crosshair_bands=(2, 4, 8), pooling_mode=mode)
    ident = np.zeros((1, 1, 3, 3))
    ident[0, 0, 1, 1] = 1.0
    names = ([f"FeX_SPP{i}" for i in range(4)] if mode == "spp"
             else [f"FeX_Crosshair{o}{b}" for b in (2, 4, 8) for o in "HV"])
    params = {}
    for n in names:
        params[n + ".w"], params[n + ".b"] = ident, np.zeros(1)
    feat = Tensor(np.full((1, 1, 8, 16), 2.5))
    for branch in _context_branches(ForwardBackend(params), feat, cfg):
        np.testing.assert_allclose(branch.data, 2.5, atol=1e-12)


def test_crosshair_bands_match_brute_force():
    rng = np.random.default_rng(4)
    cfg = NetworkConfig(base_channels=1, max_disparity=16, block_repeats=(1, 1, 1, 1),
                        crosshair_bands=(4,), pooling_mode="crosshair")
    ident = np.zeros((1, 1, 3, 3))
    ident[0, 0, 1, 1] = 1.0
    params = {"FeX_CrosshairH4.w": ident, "FeX_CrosshairH4.b": np.zeros(1),
              "FeX_CrosshairV4.w": ident, "FeX_CrosshairV4.b": np.zeros(1)}
    x = np.abs(rng.normal(size=(1, 1, 8, 16))) + 0.1  # positive so the ReLU is inert
    hb, vb = _context_branches(ForwardBackend(params), Tensor(x), cfg)
    # Pooled grids before upsampling, by direct averaging.
    rows = np.array([x[0, 0, 4 * i:4 * i + 4, :].mean() for i in range(2)])
    cols = np.array([x[0, 0, :, 4 * j:4 * j + 4].mean() for j in range(4)])
    np.testing.assert_allclose(ag.avg_pool(Tensor(x), (4, 16)).data[0, 0, :, 0], rows, atol=1e-6)
    np.testing.assert_allclose(ag.avg_pool(Tensor(x), (8, 4)).data[0, 0, 0, :], cols, atol=1e-6)
    # Horizontal bands vary only down the image, vertical bands only across.
    assert np.ptp(hb.data[0, 0], axis=1).max() < 1e-12
    assert np.ptp(vb.data[0, 0], axis=0).max() < 1e-12


# -- cost volume and regression ------------------------------------------------------

def test_cost_volume_level_zero(rng):
    l, r = rng.normal(size=(1, 8, 16, 32)), rng.normal(size=(1, 8, 16, 32))
    cv = ag.cost_volume(Tensor(l), Tensor(r), 8).data
    assert cv.shape == (1, 16, 8, 16, 32)
    np.testing.assert_array_equal(cv[0, :, 0], np.concatenate([l[0], r[0]]))


def test_cost_volume_aligned_level(rng):
    l = rng.normal(size=(1, 4, 5, 20))
    r = np.zeros_like(l)
    r[..., :-3] = l[..., 3:]  # right(x - 3) == left(x)
    cv = ag.cost_volume(Tensor(l), Tensor(r), 6).data
    np.testing.assert_array_equal(cv[0, :4, 3, :, 3:-3], cv[0, 4:, 3, :, 3:-3])
    assert not cv[0, 4:, 3, :, :3].any()


def test_cost_volume_too_many_levels(rng):
    with pytest.raises(ShapeError):
        ag.cost_volume(Tensor(np.zeros((1, 1, 2, 4))), Tensor(np.zeros((1, 1, 2, 4))), 5)


def soft(costs):
    return ag.soft_argmin(Tensor(np.asarray(costs, dtype=np.float64).reshape(1, -1, 1, 1))).data.item()


def test_soft_argmin_one_cold():
    c = np.zeros(12)
    c[5] = -50.0
    assert soft(c) == pytest.approx(5.0, abs=1e-6)


def test_soft_argmin_uniform():
    assert soft(np.zeros(4)) == 1.5


def test_soft_argmin_two_levels():
    assert soft([math.log(3.0), 0.0]) == pytest.approx(0.75, abs=1e-12)


def test_soft_argmin_range_and_shift_invariance(rng):
    c = rng.normal(size=(2, 9, 4, 5)) * 20
    out = ag.soft_argmin(Tensor(c)).data
    assert out.min() >= 0 and out.max() <= 8
    shifted = ag.soft_argmin(Tensor(c + rng.normal(size=(2, 1, 4, 5)) * 100)).data
    np.testing.assert_allclose(shifted, out, atol=1e-6)
