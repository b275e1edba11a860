"""A small reverse-mode autodiff over numpy arrays.

Only the primitives the stereo network needs are provided.  Tensors are
channel-first: ``(batch, channels, *spatial)``.
"""
import itertools

import numpy as np

from ..errors import ShapeError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Backpropagate from this tensor through the recorded graph."""
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        if grad is None:
            grad = np.ones_like(self.data)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # Interior gradients are not needed once propagated.
                    node.grad = None if node is not self else node.grad


def _make(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, req, parents if req else (), backward if req else None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise -----------------------------------------------------------

def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)
    return _make(a.data + b.data, (a, b), backward)


def scale(a, c):
    def backward(g):
        a._accumulate(g * c)
    return _make(a.data * a.data.dtype.type(c), (a,), backward)


def relu(a):
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)
    # np.maximum keeps NaN visible, so divergence is not masked as zeros.
    return _make(np.maximum(a.data, a.dtype.type(0)), (a,), backward)


def concat(tensors, axis=1):
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def reshape(a, shape):
    def backward(g):
        a._accumulate(g.reshape(a.shape))
    return _make(a.data.reshape(shape), (a,), backward)


def weighted_sum(scalars, weights):
    """``sum(w * s)`` over 0-d tensors."""
    def backward(g):
        for s, w in zip(scalars, weights):
            if s.requires_grad:
                s._accumulate(g * w)
    total = sum(float(w) * s.data for s, w in zip(scalars, weights))
    dtype = scalars[0].dtype
    return _make(np.asarray(total, dtype=dtype), tuple(scalars), backward)


# -- convolution -------------------------------------------------------------

def conv_output_size(n, k, stride, padding, dilation=1):
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def deconv_output_size(n, k, stride, padding, output_padding=0, dilation=1):
    return (n - 1) * stride - 2 * padding + dilation * (k - 1) + output_padding + 1


def _window(offset, dilation, stride, count):
    start = offset * dilation
    return slice(start, start + stride * (count - 1) + 1, stride)


def _im2col(xpad, k, stride, dilation, out_sp):
    """(B, C, *padded) -> (B, C, K, *out_sp) with K = k**ndim offsets."""
    nd = len(out_sp)
    cols = np.empty(xpad.shape[:2] + (k ** nd,) + tuple(out_sp), dtype=xpad.dtype)
    for i, off in enumerate(itertools.product(range(k), repeat=nd)):
        sl = tuple(_window(o, dilation, stride, n) for o, n in zip(off, out_sp))
        cols[:, :, i] = xpad[(slice(None), slice(None)) + sl]
    return cols


def _col2im(cols, buf_shape, k, stride, dilation, out_sp):
    buf = np.zeros(buf_shape, dtype=cols.dtype)
    nd = len(out_sp)
    for i, off in enumerate(itertools.product(range(k), repeat=nd)):
        sl = tuple(_window(o, dilation, stride, n) for o, n in zip(off, out_sp))
        buf[(slice(None), slice(None)) + sl] += cols[:, :, i]
    return buf


def conv(x, w, b=None, stride=1, padding=0, dilation=1):
    """N-d cross-correlation.  ``w`` is ``(out, in, k, ..., k)``."""
    nd = x.data.ndim - 2
    cout, cin, *ks = w.shape
    k = ks[0]
    if len(ks) != nd or any(kk != k for kk in ks):
        raise ShapeError(f"conv: kernel {w.shape} incompatible with input {x.shape}")
    if x.shape[1] != cin:
        raise ShapeError(f"conv: input has {x.shape[1]} channels, weight expects {cin}")
    bsz = x.shape[0]
    in_sp = x.shape[2:]
    out_sp = tuple(conv_output_size(n, k, stride, padding, dilation) for n in in_sp)
    if min(out_sp) <= 0:
        raise ShapeError(f"conv: input {x.shape} too small for kernel {k}")
    pad = ((0, 0), (0, 0)) + ((padding, padding),) * nd
    xpad = np.pad(x.data, pad)
    cols = _im2col(xpad, k, stride, dilation, out_sp)
    npix = int(np.prod(out_sp))
    cols2 = cols.reshape(bsz, cin * k ** nd, npix)
    wmat = w.data.reshape(cout, -1)
    out = np.matmul(wmat, cols2)
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape((bsz, cout) + out_sp)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(bsz, cout, npix)
        if w.requires_grad:
            w._accumulate(np.einsum("bop,bkp->ok", g2, cols2).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2).reshape(cols.shape)
            dpad = _col2im(dcols, xpad.shape, k, stride, dilation, out_sp)
            crop = (slice(None), slice(None)) + tuple(
                slice(padding, padding + n) for n in in_sp)
            x._accumulate(dpad[crop])
    return _make(out, parents, backward)


def conv_transpose(x, w, b=None, stride=2, padding=1, output_padding=1):
    """N-d transposed convolution.  ``w`` is ``(in, out, k, ..., k)``."""
    nd = x.data.ndim - 2
    cin, cout, *ks = w.shape
    k = ks[0]
    if x.shape[1] != cin:
        raise ShapeError(f"conv_transpose: input has {x.shape[1]} channels, weight expects {cin}")
    bsz = x.shape[0]
    in_sp = x.shape[2:]
    out_sp = tuple(deconv_output_size(n, k, stride, padding, output_padding) for n in in_sp)
    buf_sp = tuple((n - 1) * stride + k + output_padding for n in in_sp)
    npix = int(np.prod(in_sp))
    xmat = x.data.reshape(bsz, cin, npix)
    wmat = w.data.reshape(cin, cout * k ** nd)
    cols = np.matmul(wmat.T, xmat).reshape((bsz, cout, k ** nd) + in_sp)
    buf = _col2im(cols, (bsz, cout) + buf_sp, k, stride, 1, in_sp)
    crop = (slice(None), slice(None)) + tuple(slice(padding, padding + n) for n in out_sp)
    out = buf[crop].copy()
    if b is not None:
        out += b.data.reshape((1, cout) + (1,) * nd)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gbuf = np.zeros((bsz, cout) + buf_sp, dtype=g.dtype)
        gbuf[crop] = g
        gcols = _im2col(gbuf, k, stride, 1, in_sp).reshape(bsz, cout * k ** nd, npix)
        if w.requires_grad:
            w._accumulate(np.einsum("bcp,bkp->ck", xmat, gcols).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0,) + tuple(range(2, 2 + nd))))
        if x.requires_grad:
            x._accumulate(np.matmul(wmat, gcols).reshape(x.shape))
    return _make(out, parents, backward)


# -- pooling and resampling --------------------------------------------------

def avg_pool(x, kernel):
    """Non-overlapping average pooling over the trailing spatial axes.

    ``kernel`` gives one window extent per spatial axis; the stride equals
    the window, trailing remainders are dropped.
    """
    nd = x.data.ndim - 2
    kernel = tuple(int(k) for k in kernel)
    if len(kernel) != nd:
        raise ShapeError("avg_pool: kernel rank must match spatial rank")
    in_sp = x.shape[2:]
    if any(k > n or k < 1 for k, n in zip(kernel, in_sp)):
        raise ShapeError(f"avg_pool: window {kernel} exceeds input {in_sp}")
    out_sp = tuple(n // k for n, k in zip(in_sp, kernel))
    crop = (slice(None), slice(None)) + tuple(slice(0, o * k) for o, k in zip(out_sp, kernel))
    shape = x.shape[:2] + tuple(v for o, k in zip(out_sp, kernel) for v in (o, k))
    axes = tuple(3 + 2 * i for i in range(nd))
    out = x.data[crop].reshape(shape).mean(axis=axes)
    denom = float(np.prod(kernel))

    def backward(g):
        gx = np.zeros_like(x.data)
        expanded = g.reshape(tuple(v for o in g.shape[:2] for v in (o,))
                             + tuple(v for o in out_sp for v in (o, 1)))
        expanded = np.broadcast_to(expanded, shape) / denom
        gx[crop] = expanded.reshape(gx[crop].shape)
        x._accumulate(gx)
    return _make(out.astype(x.dtype), (x,), backward)


def interp_matrix(n_out, n_in, mode="linear"):
    """Resampling matrix (n_out, n_in) with half-pixel centres.

    ``linear`` is the usual bilinear/trilinear kernel, ``cubic`` the Keys
    kernel with a = -0.5; borders clamp.  Rows sum to one.
    """
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    if mode == "linear":
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        f = src - i0
        np.add.at(m, (np.arange(n_out), i0), 1.0 - f)
        np.add.at(m, (np.arange(n_out), i1), f)
    elif mode == "cubic":
        i0 = np.floor(src).astype(int)
        t = src - i0
        a = -0.5
        for off in (-1, 0, 1, 2):
            d = np.abs(t - off)
            wgt = np.where(d <= 1, (a + 2) * d**3 - (a + 3) * d**2 + 1,
                           np.where(d < 2, a * d**3 - 5 * a * d**2 + 8 * a * d - 4 * a, 0.0))
            idx = np.clip(i0 + off, 0, n_in - 1)
            np.add.at(m, (np.arange(n_out), idx), wgt)
    else:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    return m


def resize_axis(x, axis, matrix):
    """Apply a (n_out, n_in) linear resampling matrix along ``axis``."""
    mat = np.asarray(matrix, dtype=x.dtype)
    moved = np.moveaxis(x.data, axis, -1)
    if moved.shape[-1] != mat.shape[1]:
        raise ShapeError(f"resize_axis: axis has {moved.shape[-1]} samples, matrix expects {mat.shape[1]}")
    out = np.moveaxis(moved @ mat.T, -1, axis)

    def backward(g):
        gm = np.moveaxis(g, axis, -1) @ mat
        x._accumulate(np.moveaxis(gm, -1, axis))
    return _make(np.ascontiguousarray(out), (x,), backward)


def resize(x, out_sp, mode="linear"):
    """Separable resampling of all spatial axes to ``out_sp``."""
    for i, (n_out, n_in) in enumerate(zip(out_sp, x.shape[2:])):
        if n_out != n_in:
            x = resize_axis(x, 2 + i, interp_matrix(n_out, n_in, mode))
    return x


# -- stereo specific -----------------------------------------------------------

def cost_volume(left, right, ndisp):
    """(B, F, H, W) pair -> (B, 2F, ndisp, H, W).

    Level d pairs left(x) with right(x - d); right samples left of the
    image border are zero.
    """
    if left.shape != right.shape:
        raise ShapeError("cost_volume: feature maps differ in shape")
    bsz, f, h, w = left.shape
    if ndisp > w:
        raise ShapeError(f"cost_volume: {ndisp} disparity levels exceed width {w}")
    out = np.zeros((bsz, 2 * f, ndisp, h, w), dtype=left.dtype)
    out[:, :f] = left.data[:, :, None]
    for d in range(ndisp):
        out[:, f:, d, :, d:] = right.data[:, :, :, :w - d]

    def backward(g):
        if left.requires_grad:
            left._accumulate(g[:, :f].sum(axis=2))
        if right.requires_grad:
            gr = np.zeros_like(right.data)
            for d in range(ndisp):
                gr[:, :, :, :w - d] += g[:, f:, d, :, d:]
            right._accumulate(gr)
    return _make(out, (left, right), backward)


def softmax(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def soft_argmin(costs, axis=1):
    """Expected disparity under softmax(-costs) along ``axis``."""
    c = costs.data
    p = softmax(-c, axis)
    shape = [1] * c.ndim
    shape[axis] = c.shape[axis]
    levels = np.arange(c.shape[axis], dtype=c.dtype).reshape(shape)
    out = (p * levels).sum(axis=axis)

    def backward(g):
        ge = np.expand_dims(g, axis)
        oe = np.expand_dims(out, axis)
        costs._accumulate(-ge * p * (levels - oe))
    return _make(out, (costs,), backward)


def smooth_l1(pred, target, mask, beta=1.0):
    """Mean smooth-L1 over ``mask``: 0.5 e^2/beta below beta, |e| - 0.5 beta above."""
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("smooth_l1: no valid pixels")
    e = np.where(mask, pred.data - target, 0.0)
    ae = np.abs(e)
    small = ae < beta
    loss = np.where(small, 0.5 * e * e / beta, ae - 0.5 * beta)
    total = np.asarray(loss[mask].sum() / n, dtype=pred.dtype)

    def backward(g):
        grad = np.where(small, e / beta, np.sign(e)) * mask / n
        pred._accumulate((g * grad).astype(pred.dtype))
    return _make(total, (pred,), backward)
