"""Triangulation of rectified disparity into points, rasterisation into
pairwise DSMs, and robust fusion of several DSMs."""
import warnings
from dataclasses import dataclass

import numpy as np

from ._accel import dispatch, njit
from .errors import EmptyResultError, ShapeError
from .geo.geodesy import GeodeticPoint, LocalFrame, latlon_to_utm
from .rasterio import write_esri_ascii, write_xyz


@dataclass(eq=False)
class PointSet:
    lat: np.ndarray
    lon: np.ndarray
    alt: np.ndarray
    skipped: int = 0

    def __len__(self):
        return len(self.alt)

    def points(self):
        return [GeodeticPoint(float(a), float(b), float(c))
                for a, b, c in zip(self.lat, self.lon, self.alt)]

    @classmethod
    def concat(cls, sets):
        sets = list(sets)
        return cls(np.concatenate([s.lat for s in sets]), np.concatenate([s.lon for s in sets]),
                   np.concatenate([s.alt for s in sets]), sum(s.skipped for s in sets))


def _frame_change(src, dst):
    """4x4 homogeneous map from ``src`` local coordinates to ``dst`` ones."""
    ssx, ssy = src.scale
    dsx, dsy = dst.scale
    t = np.eye(4)
    t[0, 0] = dsx / ssx
    t[1, 1] = dsy / ssy
    t[0, 3] = (src.origin.lon - dst.origin.lon) * dsx
    t[1, 3] = (src.origin.lat - dst.origin.lat) * dsy
    t[2, 3] = src.origin.alt - dst.origin.alt
    return t


def stacked_system(cam_a, cam_b):
    """(4x3 matrix, 4-vector offset) of both cameras in ``cam_a``'s frame."""
    mb = cam_b.matrix @ _frame_change(cam_a.frame, cam_b.frame)
    m = np.vstack([cam_a.matrix, mb])
    return m[:, :3], m[:, 3]


def triangulate_pixels(xl, yl, disparity, pair, rank_tol=1e-9):
    """Least-squares 3D points for left pixels with the given disparities."""
    cam_a, cam_b = pair.cameras
    sa, la = pair.h_left.inverse().apply(xl, yl)
    sb, lb = pair.h_right.inverse().apply(np.asarray(xl) - disparity, yl)
    a, off = stacked_system(cam_a, cam_b)
    sv = np.linalg.svd(a, compute_uv=False)
    n = np.size(xl)
    if sv[-1] <= rank_tol * sv[0]:
        return PointSet(np.empty(0), np.empty(0), np.empty(0), skipped=n)
    rhs = np.vstack([sa, la, sb, lb]) - off[:, None]
    xyz = np.linalg.lstsq(a, rhs, rcond=None)[0]
    lat, lon, alt = cam_a.frame.to_geodetic(xyz[0], xyz[1], xyz[2])
    return PointSet(lat, lon, alt)


def triangulate_pair(disp, pair):
    """Triangulate every valid pixel of a rectified disparity map."""
    if disp.shape != pair.shape:
        raise ShapeError(f"disparity {disp.shape} does not match pair {pair.shape}")
    yl, xl = np.nonzero(disp.valid)
    return triangulate_pixels(xl.astype(np.float64), yl.astype(np.float64),
                              disp.values[yl, xl], pair)


@dataclass(frozen=True)
class GridSpec:
    """North-up UTM grid; ``(east, north)`` is the outer corner of cell (0, 0)."""

    east: float
    north: float
    cell_size: float
    shape: tuple
    zone: int
    hemisphere: str = "north"

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")

    def cell_index(self, easting, northing):
        col = np.floor((np.asarray(easting) - self.east) / self.cell_size).astype(np.int64)
        row = np.floor((self.north - np.asarray(northing)) / self.cell_size).astype(np.int64)
        return row, col

    def cell_centers(self):
        rows, cols = np.indices(self.shape, dtype=np.float64)
        return self.east + (cols + 0.5) * self.cell_size, self.north - (rows + 0.5) * self.cell_size

    def to_dict(self):
        return {"east": self.east, "north": self.north, "cell_size": self.cell_size,
                "shape": list(self.shape), "zone": self.zone, "hemisphere": self.hemisphere}


@dataclass(eq=False)
class PairwiseDsm:
    elevations: np.ndarray  # NaN where no sample fell
    grid: GridSpec
    counts: np.ndarray
    pair_id: str = ""

    @property
    def valid(self):
        return np.isfinite(self.elevations)


@dataclass(eq=False)
class FusedDsm:
    elevations: np.ndarray
    grid: GridSpec
    support: np.ndarray
    bin_width: float

    @property
    def valid(self):
        return np.isfinite(self.elevations)


@njit
def _rasterize_jit(rows, cols, alt, out_h, out_w):
    best = np.full((out_h, out_w), -np.inf)
    counts = np.zeros((out_h, out_w), dtype=np.int64)
    for i in range(rows.shape[0]):
        r = rows[i]
        c = cols[i]
        if 0 <= r < out_h and 0 <= c < out_w:
            counts[r, c] += 1
            if alt[i] > best[r, c]:
                best[r, c] = alt[i]
    return best, counts


def _rasterize_numpy(rows, cols, alt, out_h, out_w):
    inside = (rows >= 0) & (rows < out_h) & (cols >= 0) & (cols < out_w)
    best = np.full((out_h, out_w), -np.inf)
    counts = np.zeros((out_h, out_w), dtype=np.int64)
    np.maximum.at(best, (rows[inside], cols[inside]), alt[inside])
    np.add.at(counts, (rows[inside], cols[inside]), 1)
    return best, counts


_rasterize = dispatch(_rasterize_jit, _rasterize_numpy)


def grid_for_points(points, cell_size, zone=None, hemisphere="north", pad=0):
    """Smallest grid (aligned to ``cell_size`` multiples) covering ``points``."""
    if zone is None:
        zone = int((float(np.mean(points.lon)) + 180.0) // 6.0) + 1
    e, n = latlon_to_utm(points.lat, points.lon, zone, hemisphere)
    east = (np.floor(e.min() / cell_size) - pad) * cell_size
    north = (np.ceil(n.max() / cell_size) + pad) * cell_size
    ncols = int(np.ceil((e.max() - east) / cell_size)) + pad + 1
    nrows = int(np.ceil((north - n.min()) / cell_size)) + pad + 1
    return GridSpec(float(east), float(north), float(cell_size), (nrows, ncols), zone, hemisphere)


def rasterize_dsm(points, grid, pair_id=""):
    """Highest point per cell (surface model); cells without points are NaN."""
    if len(points) == 0:
        raise EmptyResultError("cannot rasterise an empty point set")
    e, n = latlon_to_utm(points.lat, points.lon, grid.zone, grid.hemisphere)
    rows, cols = grid.cell_index(e, n)
    best, counts = _rasterize(rows, cols, np.asarray(points.alt, dtype=np.float64), *grid.shape)
    elev = np.where(counts > 0, best, np.nan)
    return PairwiseDsm(elev, grid, counts, pair_id)


@njit
def _fuse_jit(stack, bin_width):
    k, h, w = stack.shape
    out = np.full((h, w), np.nan)
    support = np.zeros((h, w), dtype=np.int64)
    bins = np.empty(k, dtype=np.int64)
    vals = np.empty(k)
    for y in range(h):
        for x in range(w):
            n = 0
            for i in range(k):
                v = stack[i, y, x]
                if not np.isnan(v):
                    vals[n] = v
                    bins[n] = np.int64(np.floor(v / bin_width))
                    n += 1
            if n == 0:
                continue
            best_bin = 0
            best_count = 0
            for i in range(n):
                c = 0
                for j in range(n):
                    if bins[j] == bins[i]:
                        c += 1
                if c > best_count or (c == best_count and bins[i] < best_bin):
                    best_count = c
                    best_bin = bins[i]
            sel = np.empty(best_count)
            m = 0
            for i in range(n):
                if bins[i] == best_bin:
                    sel[m] = vals[i]
                    m += 1
            out[y, x] = np.median(sel)
            support[y, x] = best_count
    return out, support


def _fuse_numpy(stack, bin_width):
    valid = ~np.isnan(stack)
    bins = np.where(valid, np.floor(np.where(valid, stack, 0.0) / bin_width), np.inf)
    counts = ((bins[:, None] == bins[None, :]) & valid[None, :]).sum(axis=1)
    counts = np.where(valid, counts, 0)
    best_count = counts.max(axis=0)
    is_best = valid & (counts == best_count) & (best_count > 0)
    best_bin = np.where(is_best, bins, np.inf).min(axis=0)
    chosen = valid & (bins == best_bin)
    with warnings.catch_warnings():
        # All-NaN cells are expected (nodata).
        warnings.simplefilter("ignore", RuntimeWarning)
        out = np.nanmedian(np.where(chosen, stack, np.nan), axis=0)
    return out, np.where(best_count > 0, best_count, 0).astype(np.int64)


_fuse = dispatch(_fuse_jit, _fuse_numpy)


def fuse_dsms(dsms, bin_width=0.5):
    """Per cell, the median of the samples in the most populated
    ``bin_width`` elevation bin; ties go to the lower bin."""
    dsms = list(dsms)
    if not dsms:
        raise EmptyResultError("no DSMs to fuse")
    grid = dsms[0].grid
    for d in dsms[1:]:
        if d.grid != grid:
            raise ShapeError("all DSMs must share one grid (resample upstream)")
    stack = np.stack([d.elevations for d in dsms]).astype(np.float64)
    out, support = _fuse(stack, float(bin_width))
    return FusedDsm(out, grid, support, float(bin_width))


def write_dsm(dsm, path, nodata=-9999.0):
    g = dsm.grid
    yll = g.north - g.shape[0] * g.cell_size
    write_esri_ascii(path, dsm.elevations, g.east, yll, g.cell_size, nodata)


def write_points(points, path, zone=None, hemisphere="north"):
    """``x y z`` lines in UTM metres."""
    if zone is None:
        zone = int((float(np.mean(points.lon)) + 180.0) // 6.0) + 1
    e, n = latlon_to_utm(points.lat, points.lon, zone, hemisphere)
    write_xyz(path, np.column_stack([e, n, points.alt]))
