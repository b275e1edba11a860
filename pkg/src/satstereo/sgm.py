"""Census + semi-global matching baseline.

Costs are integer Hamming distances between census signatures, and
aggregation stays in integer arithmetic when the penalties are integers,
so the compiled and numpy paths agree bit for bit.
"""
from dataclasses import dataclass

import numpy as np

from ._accel import dispatch, njit
from .groundtruth import SparseDisparity

PATHS_8 = ((0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (1, -1), (-1, 1), (-1, -1))


@dataclass(frozen=True)
class SgmParams:
    p1: float = 10
    p2: float = 120
    paths: int = 8
    census_window: int = 5
    max_disparity: int = 64
    speckle_size: int = 50
    speckle_diff: float = 1.0

    def __post_init__(self):
        if self.paths not in (4, 8):
            raise ValueError("paths must be 4 or 8")
        if self.census_window % 2 == 0 or self.census_window < 3:
            raise ValueError("census window must be odd and >= 3")
        if self.census_window ** 2 - 1 > 64:
            raise ValueError("census window too large for a 64-bit signature")
        if self.p1 < 0 or self.p2 < self.p1:
            raise ValueError("penalties must satisfy 0 <= p1 <= p2")
        if self.max_disparity < 1:
            raise ValueError("max_disparity must be >= 1")
        if self.speckle_size < 0 or self.speckle_diff < 0:
            raise ValueError("speckle settings must be non-negative")

    @property
    def directions(self):
        return PATHS_8[:self.paths]


# -- census ---------------------------------------------------------------------

@njit
def _census_jit(img, window):
    h, w = img.shape
    r = window // 2
    out = np.zeros((h, w), dtype=np.uint64)
    for y in range(h):
        for x in range(w):
            c = img[y, x]
            sig = np.uint64(0)
            bit = 0
            for dy in range(-r, r + 1):
                yy = min(max(y + dy, 0), h - 1)
                for dx in range(-r, r + 1):
                    if dy == 0 and dx == 0:
                        continue
                    xx = min(max(x + dx, 0), w - 1)
                    if img[yy, xx] < c:
                        sig |= np.uint64(1) << np.uint64(bit)
                    bit += 1
            out[y, x] = sig
    return out


def _census_numpy(img, window):
    h, w = img.shape
    r = window // 2
    padded = np.pad(img, r, mode="edge")
    out = np.zeros((h, w), dtype=np.uint64)
    bit = 0
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            nb = padded[r + dy:r + dy + h, r + dx:r + dx + w]
            out |= (nb < img).astype(np.uint64) << np.uint64(bit)
            bit += 1
    return out


_census = dispatch(_census_jit, _census_numpy)


def census_transform(img, window=5):
    """Census signature per pixel.

    Bit ``i`` is set when the ``i``-th neighbour (row-major, centre
    skipped) is darker than the centre; borders clamp.
    """
    if window % 2 == 0 or window < 1:
        raise ValueError(f"census window must be odd, got {window}")
    if window * window - 1 > 64:
        raise ValueError("census window too large for a 64-bit signature")
    return _census(np.ascontiguousarray(img, dtype=np.float64), int(window))


# -- matching cost --------------------------------------------------------------

@njit
def _popcount64(v):
    v = v - ((v >> np.uint64(1)) & np.uint64(0x5555555555555555))
    v = (v & np.uint64(0x3333333333333333)) + ((v >> np.uint64(2)) & np.uint64(0x3333333333333333))
    v = (v + (v >> np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    return (v * np.uint64(0x0101010101010101)) >> np.uint64(56)


@njit
def _hamming_jit(cl, cr, ndisp, invalid):
    h, w = cl.shape
    out = np.empty((ndisp, h, w), dtype=np.int32)
    for d in range(ndisp):
        for y in range(h):
            for x in range(w):
                if x - d < 0:
                    out[d, y, x] = invalid
                else:
                    out[d, y, x] = np.int32(_popcount64(cl[y, x] ^ cr[y, x - d]))
    return out


def _popcount_numpy(v):
    v = v - ((v >> np.uint64(1)) & np.uint64(0x5555555555555555))
    v = (v & np.uint64(0x3333333333333333)) + ((v >> np.uint64(2)) & np.uint64(0x3333333333333333))
    v = (v + (v >> np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    return (v * np.uint64(0x0101010101010101)) >> np.uint64(56)


def _hamming_numpy(cl, cr, ndisp, invalid):
    h, w = cl.shape
    out = np.full((ndisp, h, w), invalid, dtype=np.int32)
    for d in range(ndisp):
        out[d, :, d:] = _popcount_numpy(cl[:, d:] ^ cr[:, :w - d]).astype(np.int32)
    return out


_hamming = dispatch(_hamming_jit, _hamming_numpy)


def census_cost_volume(left, right, max_disparity, window=5):
    """(D, H, W) int32 Hamming costs; ``right(x - d)`` outside the image
    costs the full signature length."""
    cl = census_transform(left, window)
    cr = census_transform(right, window)
    return _hamming(cl, cr, int(max_disparity), int(window * window - 1))


# -- aggregation ----------------------------------------------------------------

@njit
def _path_jit(cost, dy, dx, p1, p2, total):
    # cost is (H, W, D); total accumulates in place.
    h, w, nd = cost.shape
    lr = np.empty((h, w, nd), dtype=total.dtype)
    y0, y1, ys = (0, h, 1) if dy >= 0 else (h - 1, -1, -1)
    x0, x1, xs = (0, w, 1) if dx >= 0 else (w - 1, -1, -1)
    for y in range(y0, y1, ys):
        for x in range(x0, x1, xs):
            py = y - dy
            px = x - dx
            if py < 0 or py >= h or px < 0 or px >= w:
                for d in range(nd):
                    lr[y, x, d] = cost[y, x, d]
            else:
                m = lr[py, px, 0]
                for d in range(1, nd):
                    if lr[py, px, d] < m:
                        m = lr[py, px, d]
                for d in range(nd):
                    best = lr[py, px, d]
                    if d > 0 and lr[py, px, d - 1] + p1 < best:
                        best = lr[py, px, d - 1] + p1
                    if d < nd - 1 and lr[py, px, d + 1] + p1 < best:
                        best = lr[py, px, d + 1] + p1
                    if m + p2 < best:
                        best = m + p2
                    lr[y, x, d] = cost[y, x, d] + best - m
            for d in range(nd):
                total[y, x, d] += lr[y, x, d]


def _step(c, prev, p1, p2):
    m = prev.min(axis=-1, keepdims=True)
    best = prev.copy()
    np.minimum(best[..., 1:], prev[..., :-1] + p1, out=best[..., 1:])
    np.minimum(best[..., :-1], prev[..., 1:] + p1, out=best[..., :-1])
    np.minimum(best, m + p2, out=best)
    return c + best - m


def _path_numpy(cost, dy, dx, p1, p2, total):
    h, w, nd = cost.shape
    lr = np.empty_like(total)
    if dx != 0:
        # Sweep columns; the predecessor column is shifted by dy rows.
        cols = range(w) if dx > 0 else range(w - 1, -1, -1)
        for i, x in enumerate(cols):
            if i == 0:
                lr[:, x] = cost[:, x]
                continue
            prev = lr[:, x - dx]
            if dy == 0:
                lr[:, x] = _step(cost[:, x], prev, p1, p2)
            elif dy > 0:
                lr[0, x] = cost[0, x]
                lr[1:, x] = _step(cost[1:, x], prev[:-1], p1, p2)
            else:
                lr[-1, x] = cost[-1, x]
                lr[:-1, x] = _step(cost[:-1, x], prev[1:], p1, p2)
    else:
        rows = range(h) if dy > 0 else range(h - 1, -1, -1)
        for i, y in enumerate(rows):
            if i == 0:
                lr[y] = cost[y]
                continue
            lr[y] = _step(cost[y], lr[y - dy], p1, p2)
    total += lr


_path = dispatch(_path_jit, _path_numpy)


def sgm_aggregate(costs, params):
    """Sum of the SGM path recurrences over ``params.paths`` directions.

    ``costs`` is (D, H, W).  Integer costs with integer penalties are
    aggregated exactly in int64; anything else in float64.
    """
    costs = np.asarray(costs)
    integral = (np.issubdtype(costs.dtype, np.integer)
                and float(params.p1).is_integer() and float(params.p2).is_integer())
    dtype = np.int64 if integral else np.float64
    cost = np.ascontiguousarray(np.transpose(costs, (1, 2, 0)), dtype=dtype)
    p1 = dtype(params.p1)
    p2 = dtype(params.p2)
    total = np.zeros_like(cost)
    for dy, dx in params.directions:
        _path(cost, dy, dx, p1, p2, total)
    return np.ascontiguousarray(np.transpose(total, (2, 0, 1)))


# -- disparity selection --------------------------------------------------------

def subpixel_offset(c_minus, c0, c_plus):
    """Parabola vertex offset through three samples around a minimum."""
    c_minus = np.asarray(c_minus, dtype=np.float64)
    c_plus = np.asarray(c_plus, dtype=np.float64)
    denom = 2.0 * (c_minus + c_plus - 2.0 * np.asarray(c0, dtype=np.float64))
    with np.errstate(divide="ignore", invalid="ignore"):
        off = np.where(denom > 0, (c_minus - c_plus) / np.where(denom > 0, denom, 1.0), 0.0)
    lim = np.nextafter(0.5, 0.0)
    return np.clip(off, -lim, lim)


def _right_wta(agg):
    nd, h, w = agg.shape
    big = np.iinfo(np.int64).max if np.issubdtype(agg.dtype, np.integer) else np.inf
    shifted = np.full((nd, h, w), big, dtype=agg.dtype)
    for d in range(nd):
        # Right pixel x matches left pixel x + d.
        shifted[d, :, :w - d] = agg[d, :, d:]
    return shifted.argmin(axis=0)


def wta_disparity(aggregated, lr_check=False, subpixel=True, lr_tolerance=1.0):
    """Winner-take-all disparity with optional parabola refinement and
    left-right consistency check."""
    agg = np.asarray(aggregated)
    nd, h, w = agg.shape
    d = agg.argmin(axis=0)
    disp = d.astype(np.float64)
    if subpixel and nd >= 3:
        interior = (d > 0) & (d < nd - 1)
        yy, xx = np.nonzero(interior)
        di = d[interior]
        off = subpixel_offset(agg[di - 1, yy, xx], agg[di, yy, xx], agg[di + 1, yy, xx])
        disp[interior] += off
    valid = np.ones((h, w), dtype=bool)
    if lr_check:
        dr = _right_wta(agg)
        cols = np.arange(w)[None, :] - d
        inside = cols >= 0
        rows = np.broadcast_to(np.arange(h)[:, None], (h, w))
        dr_at = np.where(inside, dr[rows, np.clip(cols, 0, w - 1)], -10 * nd)
        valid = inside & (np.abs(d - dr_at) <= lr_tolerance)
    return SparseDisparity(np.where(valid, disp, 0.0), valid)


# -- speckle filter -------------------------------------------------------------

@njit
def _speckle_labels_jit(values, valid, max_diff):
    h, w = values.shape
    labels = np.full((h, w), -1, dtype=np.int64)
    sizes = np.zeros(h * w, dtype=np.int64)
    stack = np.empty(h * w, dtype=np.int64)
    n = 0
    for start in range(h * w):
        sy, sx = start // w, start % w
        if not valid[sy, sx] or labels[sy, sx] >= 0:
            continue
        labels[sy, sx] = n
        stack[0] = start
        top = 1
        count = 0
        while top > 0:
            top -= 1
            p = stack[top]
            y, x = p // w, p % w
            count += 1
            for k in range(4):
                yy, xx = y, x
                if k == 0:
                    yy = y - 1
                elif k == 1:
                    yy = y + 1
                elif k == 2:
                    xx = x - 1
                else:
                    xx = x + 1
                if yy < 0 or yy >= h or xx < 0 or xx >= w:
                    continue
                if not valid[yy, xx] or labels[yy, xx] >= 0:
                    continue
                if abs(values[yy, xx] - values[y, x]) > max_diff:
                    continue
                labels[yy, xx] = n
                stack[top] = yy * w + xx
                top += 1
        sizes[n] = count
        n += 1
    return labels, sizes[:n]


def _speckle_labels_numpy(values, valid, max_diff):
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    h, w = values.shape
    idx = np.arange(h * w).reshape(h, w)
    rows, cols = [], []
    for a, b, va, vb in ((idx[:, :-1], idx[:, 1:], values[:, :-1], values[:, 1:]),
                         (idx[:-1], idx[1:], values[:-1], values[1:])):
        ok = valid.flat[a] & valid.flat[b] & (np.abs(va - vb) <= max_diff)
        rows.append(a[ok])
        cols.append(b[ok])
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    graph = coo_matrix((np.ones(r.size, dtype=np.int8), (r, c)), shape=(h * w, h * w))
    _, comp = connected_components(graph, directed=False)
    comp = comp.reshape(h, w)
    # Renumber valid components in scan order so both kernels agree.
    labels = np.full((h, w), -1, dtype=np.int64)
    flat_comp = comp[valid]
    _, first_idx, inverse = np.unique(flat_comp, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first_idx))
    labels[valid] = order[inverse]
    sizes = np.bincount(labels[valid], minlength=len(first_idx)).astype(np.int64)
    return labels, sizes


_speckle_labels = dispatch(_speckle_labels_jit, _speckle_labels_numpy)


def remove_speckles(disp, max_size=50, max_diff=1.0):
    """Invalidate small connected blobs of similar disparity.

    Pixels are 4-connected when both are valid and their disparities differ
    by at most ``max_diff``; components of ``max_size`` pixels or fewer are
    dropped.  These blobs are typically spurious matches that survived the
    left-right check inside occluded bands.
    """
    if max_size <= 0:
        return disp
    values = np.ascontiguousarray(disp.values, dtype=np.float64)
    valid = np.ascontiguousarray(disp.valid, dtype=np.bool_)
    labels, sizes = _speckle_labels(values, valid, float(max_diff))
    keep = valid & (sizes[np.maximum(labels, 0)] > max_size)
    return SparseDisparity(np.where(keep, disp.values, 0.0), keep)


def sgm_disparity(left, right, params=SgmParams(), lr_check=True, subpixel=True):
    """Full SGM matcher on a rectified pair; returns a sparse disparity map."""
    costs = census_cost_volume(left, right, params.max_disparity, params.census_window)
    agg = sgm_aggregate(costs, params)
    disp = wta_disparity(agg, lr_check=lr_check, subpixel=subpixel)
    return remove_speckles(disp, params.speckle_size, params.speckle_diff)
