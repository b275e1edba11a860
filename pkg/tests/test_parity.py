"""The compiled kernels and their numpy twins agree on random inputs."""
import numpy as np
import pytest

from satstereo import _accel
from satstereo.dsm import _fuse, _rasterize
from satstereo.groundtruth import _zbuffer
from satstereo.rectify import _warp
from satstereo.sgm import _census, _hamming, _path, _speckle_labels

SEEDS = [0, 1, 2]


def both(kernel, *args):
    return kernel.jit(*args), kernel.numpy(*args)


def assert_same(a, b):
    if isinstance(a, tuple):
        assert len(a) == len(b)
        for x, y in zip(a, b):
            assert_same(x, y)
        return
    a, b = np.asarray(a), np.asarray(b)
    assert a.shape == b.shape
    if a.dtype.kind == "f":
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12, equal_nan=True)
    else:
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("seed", SEEDS)
def test_warp(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((23, 31))
    hinv = np.array([[0.9, 0.1, -2.0], [-0.05, 1.1, 3.0], [1e-4, -2e-4, 1.0]])
    hinv[:2] += rng.normal(0, 0.02, (2, 3))
    assert_same(*both(_warp, img, hinv, 27, 29))


@pytest.mark.parametrize("seed", SEEDS)
def test_zbuffer(seed):
    rng = np.random.default_rng(seed)
    n = 400
    rows = rng.integers(0, 9, n)
    cols = rng.integers(0, 11, n)
    alt = rng.integers(0, 6, n).astype(float)  # plenty of exact ties
    disp = rng.random(n)
    assert_same(*both(_zbuffer, rows, cols, disp, alt, 9, 11))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("window", [3, 5, 7])
def test_census(seed, window):
    img = np.random.default_rng(seed).integers(0, 4, (14, 17)).astype(float)
    assert_same(*both(_census, img, window))


@pytest.mark.parametrize("seed", SEEDS)
def test_hamming(seed):
    rng = np.random.default_rng(seed)
    cl = rng.integers(0, 2 ** 48, (8, 13), dtype=np.uint64)
    cr = rng.integers(0, 2 ** 48, (8, 13), dtype=np.uint64)
    assert_same(*both(_hamming, cl, cr, 6, 48))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("direction", [(0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (1, -1),
                                       (-1, 1), (-1, -1)])
def test_path(seed, direction):
    rng = np.random.default_rng(seed)
    cost = rng.integers(0, 40, (7, 9, 6)).astype(np.int64)
    out = []
    for impl in (_path.jit, _path.numpy):
        total = np.zeros_like(cost)
        impl(cost, direction[0], direction[1], np.int64(5), np.int64(30), total)
        out.append(total)
    assert_same(out[0], out[1])


@pytest.mark.parametrize("seed", SEEDS)
def test_speckle_labels(seed):
    rng = np.random.default_rng(seed)
    values = rng.integers(0, 4, (15, 18)).astype(float) * 0.8
    valid = rng.random((15, 18)) > 0.2
    assert_same(*both(_speckle_labels, values, valid, 1.0))


@pytest.mark.parametrize("seed", SEEDS)
def test_rasterize(seed):
    rng = np.random.default_rng(seed)
    n = 300
    rows = rng.integers(-2, 12, n)
    cols = rng.integers(-2, 12, n)
    alt = rng.normal(10, 5, n)
    assert_same(*both(_rasterize, rows, cols, alt, 10, 10))


@pytest.mark.parametrize("seed", SEEDS)
def test_fuse(seed):
    rng = np.random.default_rng(seed)
    stack = np.round(rng.normal(10, 1.5, (6, 9, 10)), 1)
    stack[rng.random(stack.shape) < 0.3] = np.nan
    assert_same(*both(_fuse, stack, 0.5))


def test_env_flag(monkeypatch):
    monkeypatch.setenv("SATSTEREO_DISABLE_NUMBA", "1")
    assert not _accel.numba_enabled()
    called = []
    k = _accel.dispatch(lambda: called.append("jit"), lambda: called.append("numpy"))
    k()
    monkeypatch.setenv("SATSTEREO_DISABLE_NUMBA", "0")
    assert _accel.numba_enabled() == _accel.HAS_NUMBA
    k()
    assert called == ["numpy", "jit" if _accel.HAS_NUMBA else "numpy"]
