"""The stereo network graph, written once against interchangeable backends.

:func:`stereo_graph` describes the architecture.  It is executed by

* :class:`ForwardBackend` - real numerics through :mod:`.autograd`;
* :class:`ShapeBackend` - shape propagation only, no weights touched.  It
  also records every parameter shape, which :func:`init_params` uses.

Layer names follow the reference layer table (``FeX_InitialA``,
``Hourglass0_ConvA``, ...); every backend records each named output in
``trace``.
"""
from dataclasses import dataclass
from math import lcm

import numpy as np

from ..errors import ConfigError, ShapeError
from . import autograd as ag
from .autograd import Tensor, conv_output_size, deconv_output_size


class ShapeBackend:
    """Propagates ``(B, C, *spatial)`` tuples and records parameter shapes."""

    def __init__(self):
        self.trace = {}
        self.param_shapes = {}

    def record(self, name, x):
        self.trace[name] = tuple(x)
        return x

    def conv(self, x, name, cout, k=3, stride=1, dilation=1):
        nd = len(x) - 2
        self.param_shapes[name + ".w"] = (cout, x[1]) + (k,) * nd
        self.param_shapes[name + ".b"] = (cout,)
        pad = dilation * (k // 2)
        sp = tuple(conv_output_size(n, k, stride, pad, dilation) for n in x[2:])
        if min(sp) <= 0:
            raise ShapeError(f"{name}: input {x} too small")
        return (x[0], cout) + sp

    def deconv(self, x, name, cout):
        nd = len(x) - 2
        self.param_shapes[name + ".w"] = (x[1], cout) + (3,) * nd
        self.param_shapes[name + ".b"] = (cout,)
        return (x[0], cout) + tuple(deconv_output_size(n, 3, 2, 1, 1) for n in x[2:])

    def relu(self, x):
        return x

    def add(self, a, b):
        if tuple(a) != tuple(b):
            raise ShapeError(f"add: {a} vs {b}")
        return a

    def concat(self, xs):
        base = xs[0]
        for x in xs[1:]:
            if x[0] != base[0] or x[2:] != base[2:]:
                raise ShapeError(f"concat: {base} vs {x}")
        return (base[0], sum(x[1] for x in xs)) + tuple(base[2:])

    def avg_pool(self, x, kernel):
        if any(k > n for k, n in zip(kernel, x[2:])):
            raise ShapeError(f"pool window {kernel} exceeds feature map {x[2:]}")
        return x[:2] + tuple(n // k for n, k in zip(x[2:], kernel))

    def resize(self, x, out_sp, mode):
        return x[:2] + tuple(out_sp)

    def cost_volume(self, left, right, ndisp, channels):
        if ndisp > left[3]:
            raise ShapeError("more disparity levels than feature columns")
        c = 2 * left[1] if channels == "2F" else left[1]
        return (left[0], c, ndisp) + tuple(left[2:])

    def squeeze_channel(self, x):
        return (x[0],) + tuple(x[2:])

    def soft_argmin(self, x):
        return (x[0],) + tuple(x[2:])


class ForwardBackend:
    """Runs the graph through the autograd primitives with ``params``.

    ``params`` maps names to :class:`Tensor` (or arrays, wrapped on the fly).
    """

    def __init__(self, params):
        self.params = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
        self.trace = {}

    def record(self, name, x):
        self.trace[name] = x.shape
        return x

    def _p(self, name):
        try:
            return self.params[name]
        except KeyError:
            raise ConfigError(f"missing parameter {name!r}") from None

    def conv(self, x, name, cout, k=3, stride=1, dilation=1):
        w = self._p(name + ".w")
        if w.shape[0] != cout or w.shape[2] != k:
            raise ShapeError(f"{name}: weight {w.shape} does not match ({cout}, ., {k})")
        return ag.conv(x, w, self._p(name + ".b"), stride=stride,
                       padding=dilation * (k // 2), dilation=dilation)

    def deconv(self, x, name, cout):
        return ag.conv_transpose(x, self._p(name + ".w"), self._p(name + ".b"),
                                 stride=2, padding=1, output_padding=1)

    def relu(self, x):
        return ag.relu(x)

    def add(self, a, b):
        return ag.add(a, b)

    def concat(self, xs):
        return ag.concat(xs, axis=1)

    def avg_pool(self, x, kernel):
        return ag.avg_pool(x, kernel)

    def resize(self, x, out_sp, mode):
        return ag.resize(x, out_sp, mode)

    def cost_volume(self, left, right, ndisp, channels):
        cv = ag.cost_volume(left, right, ndisp)
        if channels == "F":
            cv = _half_difference(cv)
        return cv

    def squeeze_channel(self, x):
        return ag.reshape(x, (x.shape[0],) + x.shape[2:])

    def soft_argmin(self, x):
        return ag.soft_argmin(x, axis=1)


def _half_difference(x):
    """F-channel volume: left half minus shifted right half."""
    f = x.shape[1] // 2
    out = x.data[:, :f] - x.data[:, f:]

    def backward(g):
        x._accumulate(np.concatenate([g, -g], axis=1))
    return ag._make(out, (x,), backward)


# -- architecture ---------------------------------------------------------------

def _basic_block(bk, x, name, cin, cout, stride, dilation):
    h = bk.relu(bk.conv(x, name + ".conv1", cout, 3, stride, dilation))
    h = bk.conv(h, name + ".conv2", cout, 3, 1, dilation)
    if stride != 1 or cin != cout:
        x = bk.conv(x, name + ".proj", cout, 1, stride)
    return bk.add(h, x)


def _block_stack(bk, x, name, cin, cout, repeats, stride=1, dilation=1):
    for i in range(repeats):
        x = _basic_block(bk, x, f"{name}.{i}", cin if i == 0 else cout, cout,
                         stride if i == 0 else 1, dilation)
    return x


def _feature_dims(x):
    return tuple(x.shape[2:]) if isinstance(x, Tensor) else tuple(x[2:])


def _context_branches(bk, feat, cfg):
    b = cfg.base_channels
    h4, w4 = _feature_dims(feat)
    branches = []
    if cfg.pooling_mode == "spp":
        windows = [(f"FeX_SPP{i}", (p, p)) for i, p in enumerate(cfg.spp_pool_sizes)]
    else:
        windows = []
        for band in cfg.crosshair_bands:
            if h4 % band or w4 % band:
                raise ShapeError(f"crosshair band {band} does not divide feature map {(h4, w4)}")
            windows.append((f"FeX_CrosshairH{band}", (band, w4)))
            windows.append((f"FeX_CrosshairV{band}", (h4, band)))
    for name, window in windows:
        if window[0] > h4 or window[1] > w4:
            raise ShapeError(f"{name}: pool window {window} exceeds feature map {(h4, w4)}")
        y = bk.avg_pool(feat, window)
        y = bk.relu(bk.conv(y, name, b, 3))
        y = bk.resize(y, (h4, w4), cfg.interp)
        branches.append(bk.record(name, y))
    return branches


def extract_features(bk, img, cfg):
    """Shared-weight feature extractor: (B,1,H,W) -> (B,b,H/4,W/4)."""
    b = cfg.base_channels
    r0, r1, r2, r3 = cfg.block_repeats
    x = bk.relu(bk.conv(img, "FeX_InitialA", b, 3, stride=2))
    bk.record("FeX_InitialA", x)
    x = bk.record("FeX_InitialB", bk.relu(bk.conv(x, "FeX_InitialB", b, 3)))
    x = bk.record("FeX_InitialC", bk.relu(bk.conv(x, "FeX_InitialC", b, 3)))
    x = bk.record("FeX_BlockStack0", _block_stack(bk, x, "FeX_BlockStack0", b, b, r0))
    s1 = bk.record("FeX_BlockStack1", _block_stack(bk, x, "FeX_BlockStack1", b, 2 * b, r1, stride=2))
    x = bk.record("FeX_BlockStack2", _block_stack(bk, s1, "FeX_BlockStack2", 2 * b, 4 * b, r2))
    s3 = bk.record("FeX_BlockStack3", _block_stack(bk, x, "FeX_BlockStack3", 4 * b, 4 * b, r3, dilation=2))
    branches = _context_branches(bk, s3, cfg)
    x = bk.record("FeX_Concat", bk.concat([s1, s3] + branches))
    x = bk.record("FeX_LastConvA", bk.relu(bk.conv(x, "FeX_LastConvA", 4 * b, 3)))
    return bk.record("FeX_LastConvB", bk.conv(x, "FeX_LastConvB", b, 1))


def _hourglass(bk, x, pre, name, b):
    a = bk.record(f"{name}_ConvA", bk.relu(bk.conv(x, f"{name}_ConvA", 2 * b, 3, stride=2)))
    bq = bk.record(f"{name}_ConvB", bk.relu(bk.conv(a, f"{name}_ConvB", 2 * b, 3)))
    c = bk.record(f"{name}_ConvC", bk.relu(bk.conv(bq, f"{name}_ConvC", 2 * b, 3, stride=2)))
    d = bk.record(f"{name}_ConvD", bk.relu(bk.conv(c, f"{name}_ConvD", 2 * b, 3)))
    e = bk.relu(bk.add(bk.deconv(d, f"{name}_DeconvE", 2 * b), bq))
    bk.record(f"{name}_DeconvE", e)
    f = bk.add(bk.deconv(e, f"{name}_DeconvF", b), pre)
    return bk.record(f"{name}_DeconvF", f)


@dataclass
class GraphOutput:
    disparities: list      # one (B, H, W) map per hourglass, last is the prediction
    costs: list            # per-hourglass (B, D/4, H/4, W/4) cost maps
    volume: object         # the 4D matching volume (B, C, D/4, H/4, W/4)


def stereo_graph(bk, left, right, cfg):
    """Full network: features, cost volume, stacked hourglasses, regression."""
    b = cfg.base_channels
    in_sp = _feature_dims(left)
    h, w = in_sp
    if h % 16 or w % 16:
        raise ShapeError(f"input {h}x{w} must be divisible by 16 (pad upstream)")
    if cfg.max_disparity % 16:
        raise ShapeError("max_disparity must be divisible by 16 for the 3D encoder")
    bk.record("Input", left)
    fl = extract_features(bk, left, cfg)
    fr = extract_features(bk, right, cfg)
    cv = bk.record("CostVolume", bk.cost_volume(fl, fr, cfg.max_disparity // 4,
                                                cfg.cost_volume_channels))
    x = bk.relu(bk.conv(cv, "PreHourglass.0", b, 3))
    x = bk.relu(bk.conv(x, "PreHourglass.1", b, 3))
    y = bk.relu(bk.conv(x, "PreHourglass.2", b, 3))
    pre = bk.record("PreHourglassBlock", bk.add(bk.conv(y, "PreHourglass.3", b, 3), x))

    disparities, costs = [], []
    out = pre
    prev_cost = None
    for k in range(cfg.hourglass_count):
        out = _hourglass(bk, out, pre, f"Hourglass{k}", b)
        bk.record(f"Hourglass{k}", out)
        c = bk.relu(bk.conv(out, f"Classifier{k}.0", b, 3))
        c = bk.conv(c, f"Classifier{k}.1", 1, 3)
        if prev_cost is not None:
            c = bk.add(c, prev_cost)
        prev_cost = c
        cost = bk.squeeze_channel(c)
        costs.append(cost)
        # Regression at full resolution: upsample along (D, H, W) first.
        full = bk.resize(c, (cfg.max_disparity, h, w), cfg.interp)
        full = bk.squeeze_channel(full)
        bk.record(f"DispReg{k}_Volume", full)
        disparities.append(bk.record(f"DispReg{k}", bk.soft_argmin(full)))
    return GraphOutput(disparities, costs, cv)


def layer_shapes(cfg, height, width, batch=1):
    """Shape of every named layer, computed without allocating weights."""
    bk = ShapeBackend()
    img = (batch, 1, height, width)
    stereo_graph(bk, img, img, cfg)
    return bk.trace


def param_shapes(cfg):
    """Name -> shape of every weight and bias of ``cfg``."""
    key = repr(cfg.to_dict())
    if key not in _SHAPE_CACHE:
        # Parameter shapes do not depend on the image size; pick one that
        # every pooling window and the disparity range fit into.
        sizes = cfg.spp_pool_sizes if cfg.pooling_mode == "spp" else cfg.crosshair_bands
        unit = 16 * lcm(*sizes, 4)
        side = unit * max(1, -(-cfg.max_disparity // unit))
        bk = ShapeBackend()
        img = (1, 1, side, side)
        stereo_graph(bk, img, img, cfg)
        _SHAPE_CACHE[key] = bk.param_shapes
    return dict(_SHAPE_CACHE[key])


_SHAPE_CACHE = {}


def init_params(cfg, seed=0, dtype=np.float32):
    """He-normal weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(cfg)
    params = {}
    for name in sorted(shapes):
        shape = shapes[name]
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        if "Deconv" in name:
            fan_in = shape[0] * int(np.prod(shape[2:]))
        else:
            fan_in = int(np.prod(shape[1:]))
        params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return params


def forward(params, left, right, cfg):
    """Run the network; returns ``(GraphOutput, trace)``."""
    bk = ForwardBackend(params)
    left = left if isinstance(left, Tensor) else Tensor(left)
    right = right if isinstance(right, Tensor) else Tensor(right)
    out = stereo_graph(bk, left, right, cfg)
    return out, bk.trace
