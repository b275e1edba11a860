"""LiDAR elevation grids to sparse and densified ground-truth disparity."""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.interpolate import LinearNDInterpolator
from scipy.spatial import Delaunay, QhullError

from ._accel import dispatch, njit
from .errors import EmptyResultError, HullDegenerateError, ShapeError
from .geo.geodesy import UtmPoint, utm_to_latlon
from .rasterio import read_json, read_pfm, write_json, write_mask_pgm, write_pfm


@dataclass(eq=False)
class LidarGrid:
    """Gridded elevations; cell (r, c) is centred at
    ``(origin.easting + c*cell_size, origin.northing - r*cell_size)``."""

    elevations: np.ndarray
    origin: UtmPoint
    cell_size: float
    nodata: float = -9999.0

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.elevations = np.asarray(self.elevations, dtype=np.float64)

    @property
    def valid(self):
        return np.isfinite(self.elevations) & (self.elevations != self.nodata)

    def cell_centers(self):
        """Easting/northing of every cell, shape of ``elevations``."""
        rows, cols = np.indices(self.elevations.shape, dtype=np.float64)
        e = self.origin.easting + cols * self.cell_size
        n = self.origin.northing - rows * self.cell_size
        return e, n

    def to_geodetic(self):
        """(lat, lon, alt) arrays of the valid cells."""
        e, n = self.cell_centers()
        v = self.valid
        lat, lon = utm_to_latlon(e[v], n[v], self.origin.zone, self.origin.hemisphere)
        return lat, lon, self.elevations[v]


def read_lidar(pfm_path, sidecar_path):
    data, _ = read_pfm(pfm_path)
    meta = read_json(sidecar_path)
    origin = UtmPoint(meta["origin_easting"], meta["origin_northing"],
                      int(meta["zone"]), meta.get("hemisphere", "north"))
    return LidarGrid(data.astype(np.float64), origin, float(meta["cell_size"]),
                     float(meta.get("nodata", -9999.0)))


def write_lidar(grid, pfm_path, sidecar_path):
    write_pfm(pfm_path, grid.elevations)
    write_json(sidecar_path, {
        "origin_easting": grid.origin.easting, "origin_northing": grid.origin.northing,
        "zone": grid.origin.zone, "hemisphere": grid.origin.hemisphere,
        "cell_size": grid.cell_size, "nodata": grid.nodata,
    })


@dataclass(eq=False)
class SparseDisparity:
    """Disparity with a validity mask.  ``altitude`` holds the elevation of
    the LiDAR sample kept at each pixel, when known."""

    values: np.ndarray
    valid: np.ndarray
    altitude: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape:
            raise ShapeError("values and valid mask differ in shape")

    @property
    def density(self):
        return float(self.valid.sum()) / self.valid.size if self.valid.size else 0.0

    @property
    def shape(self):
        return self.values.shape

    def crop(self, r0, c0, h, w):
        alt = None if self.altitude is None else self.altitude[r0:r0 + h, c0:c0 + w].copy()
        return type(self)(self.values[r0:r0 + h, c0:c0 + w].copy(),
                          self.valid[r0:r0 + h, c0:c0 + w].copy(), alt)


@dataclass(eq=False)
class DenseDisparity(SparseDisparity):
    """Interpolated disparity; ``valid`` marks the convex hull of the samples."""


def write_disparity(disp, pfm_path, mask_path):
    write_pfm(pfm_path, np.where(disp.valid, disp.values, 0.0))
    write_mask_pgm(mask_path, disp.valid)


def read_disparity(pfm_path, mask_path, cls=SparseDisparity):
    from .rasterio import read_mask_pgm
    values, _ = read_pfm(pfm_path)
    return cls(values.astype(np.float64), read_mask_pgm(mask_path))


@njit
def _zbuffer_jit(rows, cols, disp, alt, out_h, out_w):
    values = np.zeros((out_h, out_w), dtype=np.float64)
    best = np.full((out_h, out_w), -np.inf)
    valid = np.zeros((out_h, out_w), dtype=np.bool_)
    for i in range(rows.shape[0]):
        r = rows[i]
        c = cols[i]
        if alt[i] > best[r, c]:
            best[r, c] = alt[i]
            values[r, c] = disp[i]
            valid[r, c] = True
    return values, valid, best


def _zbuffer_numpy(rows, cols, disp, alt, out_h, out_w):
    values = np.zeros((out_h, out_w), dtype=np.float64)
    best = np.full((out_h, out_w), -np.inf)
    valid = np.zeros((out_h, out_w), dtype=bool)
    flat = rows * out_w + cols
    # Highest altitude per pixel; the earliest sample wins exact ties.
    order = np.lexsort((np.arange(len(flat)), -alt, flat))
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat[order[1:]] != flat[order[:-1]]
    keep = order[first]
    values.ravel()[flat[keep]] = disp[keep]
    best.ravel()[flat[keep]] = alt[keep]
    valid.ravel()[flat[keep]] = True
    return values, valid, best


_zbuffer = dispatch(_zbuffer_jit, _zbuffer_numpy)


def project_points_rectified(lat, lon, alt, cam_a, cam_b, h_a, h_b):
    """Rectified (x_a, y_a, x_b, y_b) of geodetic points."""
    xa, ya = h_a.apply(*cam_a.project(lat, lon, alt))
    xb, yb = h_b.apply(*cam_b.project(lat, lon, alt))
    return xa, ya, xb, yb


def splat_disparity(xa, ya, disparity, alt, out_dims):
    """Z-buffer scattered disparities onto the rounded left-image pixels."""
    out_h, out_w = out_dims
    rows = np.rint(ya).astype(np.int64)
    cols = np.rint(xa).astype(np.int64)
    inside = (rows >= 0) & (rows < out_h) & (cols >= 0) & (cols < out_w)
    if not inside.any():
        raise EmptyResultError("no LiDAR sample projects inside the rectified image")
    values, valid, best = _zbuffer(
        rows[inside], cols[inside], np.asarray(disparity, dtype=np.float64)[inside],
        np.asarray(alt, dtype=np.float64)[inside], int(out_h), int(out_w))
    altitude = np.where(valid, best, np.nan)
    return SparseDisparity(values, valid, altitude)


def build_sparse_disparity(lidar, cam_a, cam_b, h_a, h_b, out_dims):
    """Project every valid LiDAR cell into the rectified pair.

    Disparity ``x_a - x_b`` is stored at the rounded left-image pixel; on
    collisions the highest sample wins.
    """
    lat, lon, alt = lidar.to_geodetic()
    if lat.size == 0:
        raise EmptyResultError("LiDAR grid has no valid cells")
    xa, ya, xb, _ = project_points_rectified(lat, lon, alt, cam_a, cam_b, h_a, h_b)
    return splat_disparity(xa, ya, xa - xb, alt, out_dims)


def remove_bleedthrough(sp, altitudes=None, tolerance=1.0, radius=2):
    """Drop samples lying more than ``tolerance`` below the local maximum.

    The altitude raster is grey-dilated with a (2*radius+1) square; a valid
    pixel below ``dilated - tolerance`` is an occluded ground return seen
    through a roof and is invalidated.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    if altitudes is None:
        altitudes = sp.altitude
    altitudes = np.asarray(altitudes, dtype=np.float64)
    if altitudes.shape != sp.shape:
        raise ShapeError("altitude raster does not match the disparity map")
    masked = np.where(sp.valid, altitudes, -np.inf)
    dilated = ndimage.grey_dilation(masked, size=(2 * radius + 1, 2 * radius + 1),
                                    mode="constant", cval=-np.inf)
    keep = sp.valid & ~(masked < dilated - tolerance)
    alt = None if sp.altitude is None else np.where(keep, sp.altitude, np.nan)
    return type(sp)(np.where(keep, sp.values, 0.0), keep, alt)


def densify_disparity(sp):
    """Piecewise-linear interpolation over the Delaunay triangulation of the
    valid pixels.  Nothing outside the convex hull is filled."""
    rows, cols = np.nonzero(sp.valid)
    if rows.size < 3:
        raise HullDegenerateError("need at least 3 valid pixels")
    pts = np.column_stack([cols, rows]).astype(np.float64)
    try:
        tri = Delaunay(pts)
    except QhullError as exc:
        raise HullDegenerateError(f"valid pixels are collinear: {exc}") from None
    interp = LinearNDInterpolator(tri, sp.values[rows, cols], fill_value=np.nan)
    yy, xx = np.indices(sp.shape, dtype=np.float64)
    dense = interp(xx, yy)
    dense[rows, cols] = sp.values[rows, cols]
    valid = np.isfinite(dense)
    return DenseDisparity(np.where(valid, dense, 0.0), valid)
