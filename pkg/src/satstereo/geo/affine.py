"""Affine camera approximation of an RPC over a bounded volume."""
from dataclasses import dataclass

import numpy as np

from ..errors import AffineFitError, DegenerateGeometryError
from .geodesy import GeodeticPoint, LocalFrame

AXIS_NAMES = ("x", "y", "z")


@dataclass(frozen=True)
class GeoBox:
    """Axis-aligned geodetic volume (degrees, metres)."""

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    alt_min: float = 0.0
    alt_max: float = 0.0

    def __post_init__(self):
        if self.lat_max <= self.lat_min or self.lon_max <= self.lon_min:
            raise DegenerateGeometryError("geodetic box has zero horizontal extent")
        if self.alt_max < self.alt_min:
            raise DegenerateGeometryError("alt_max < alt_min")

    @property
    def center(self):
        return GeodeticPoint(0.5 * (self.lat_min + self.lat_max),
                             0.5 * (self.lon_min + self.lon_max),
                             0.5 * (self.alt_min + self.alt_max))

    def grid(self, n):
        """Regular n*n*n sample grid as flat (lat, lon, alt) arrays."""
        lat = np.linspace(self.lat_min, self.lat_max, n)
        lon = np.linspace(self.lon_min, self.lon_max, n)
        alt = np.linspace(self.alt_min, self.alt_max, n)
        la, lo, al = np.meshgrid(lat, lon, alt, indexing="ij")
        return la.ravel(), lo.ravel(), al.ravel()


@dataclass(frozen=True, eq=False)
class AffineCamera:
    """2x4 map from homogeneous local ENU metres to (sample, line).

    ``max_residual`` and ``free_axes`` are filled in by
    :func:`fit_affine_camera`; ``free_axes`` names local axes the fit could
    not constrain (their matrix column is left at zero).
    """

    matrix: np.ndarray
    local_origin: GeodeticPoint
    max_residual: float = 0.0
    free_axes: tuple = ()

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (2, 4):
            raise ValueError(f"affine matrix must be 2x4, got {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def frame(self):
        return LocalFrame(self.local_origin)

    def project_local(self, x, y, z):
        m = self.matrix
        s = m[0, 0] * x + m[0, 1] * y + m[0, 2] * z + m[0, 3]
        l = m[1, 0] * x + m[1, 1] * y + m[1, 2] * z + m[1, 3]
        return s, l

    def project(self, lat, lon, alt):
        return self.project_local(*self.frame.to_local(lat, lon, alt))


def affine_project(cam, p):
    s, l = cam.project(p.lat, p.lon, p.alt)
    return float(s), float(l)


def fit_affine_camera(rpc, volume, grid_size=5, tolerance=None,
                      max_iter=20, change_tol=1e-4):
    """Least-squares affine approximation of ``rpc`` over ``volume``.

    The normal equations are solved on column-scaled design matrices and
    then polished by iterative refinement on the residual until the grid
    reprojection moves by less than ``change_tol`` pixels.
    """
    if grid_size < 4:
        raise ValueError("grid_size must be >= 4 (64 samples)")
    origin = volume.center
    frame = LocalFrame(origin)
    lat, lon, alt = volume.grid(grid_size)
    samp, line = rpc.project(lat, lon, alt)
    target = np.column_stack([samp, line])
    x, y, z = frame.to_local(lat, lon, alt)
    design = np.column_stack([x, y, z, np.ones_like(x)])

    scale = np.abs(design).max(axis=0)
    free = tuple(AXIS_NAMES[i] for i in range(3) if scale[i] == 0.0)
    active = scale > 0.0
    ds = design[:, active] / scale[active]
    normal = ds.T @ ds
    if np.linalg.matrix_rank(normal) < normal.shape[0]:
        raise DegenerateGeometryError("affine fit design matrix is rank deficient")

    coef = np.zeros((ds.shape[1], 2))
    prev = np.zeros_like(target)
    for _ in range(max_iter):
        resid = target - ds @ coef
        coef = coef + np.linalg.solve(normal, ds.T @ resid)
        pred = ds @ coef
        change = np.abs(pred - prev).max()
        prev = pred
        if change < change_tol:
            break

    matrix = np.zeros((2, 4))
    matrix[:, active] = (coef / scale[active, None]).T
    max_residual = float(np.abs(target - design @ matrix.T).max())
    if tolerance is not None and max_residual > tolerance:
        raise AffineFitError(max_residual, tolerance)
    return AffineCamera(matrix, origin, max_residual, free)
