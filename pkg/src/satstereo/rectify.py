"""Ground-plane homography rectification for affine satellite pairs."""
from dataclasses import dataclass, field

import numpy as np

from ._accel import dispatch, njit
from .errors import DegenerateGeometryError, EstimationError, ShapeError
from .geo.geodesy import GeodeticPoint, LocalFrame

PROBE_HEIGHT = 100.0


@dataclass(frozen=True, eq=False)
class Homography:
    h: np.ndarray

    def __post_init__(self):
        h = np.array(self.h, dtype=np.float64)
        if h.shape != (3, 3):
            raise ValueError("homography must be 3x3")
        if h[2, 2] == 0:
            raise DegenerateGeometryError("homography has h[2,2] == 0")
        h = h / h[2, 2]
        if abs(np.linalg.det(h)) <= 1e-12:
            raise DegenerateGeometryError("homography is not invertible")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    def inverse(self):
        return Homography(np.linalg.inv(self.h))

    def compose(self, other):
        """``self`` applied after ``other``."""
        return Homography(self.h @ other.h)

    def apply(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        h = self.h
        w = h[2, 0] * x + h[2, 1] * y + h[2, 2]
        return (h[0, 0] * x + h[0, 1] * y + h[0, 2]) / w, (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / w

    @classmethod
    def identity(cls):
        return cls(np.eye(3))


@dataclass(eq=False)
class RectifiedPair:
    left_img: np.ndarray
    right_img: np.ndarray
    h_left: Homography
    h_right: Homography
    left_mask: np.ndarray
    right_mask: np.ndarray
    cameras: tuple
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.left_img.shape != self.right_img.shape:
            raise ShapeError("rectified images must share dimensions")

    @property
    def shape(self):
        return self.left_img.shape


@dataclass(frozen=True, eq=False)
class Rectification:
    """Everything :func:`estimate_rectification` learns about a pair."""

    h_left: Homography
    h_right: Homography
    out_shape: tuple
    seed: int
    ground_alt: float
    ground_residual: float
    epipolar_direction: tuple


def _hartley(points):
    c = points.mean(axis=0)
    d = np.sqrt(((points - c) ** 2).sum(axis=1)).mean()
    if d == 0:
        raise DegenerateGeometryError("all correspondences coincide")
    s = np.sqrt(2.0) / d
    t = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return t


def fit_homography_dlt(src, dst):
    """Normalised DLT homography mapping ``src`` (N,2) to ``dst`` (N,2)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 4:
        raise DegenerateGeometryError("DLT needs at least 4 correspondences")
    for pts in (src, dst):
        centred = pts - pts.mean(axis=0)
        sv = np.linalg.svd(centred, compute_uv=False)
        if sv[1] <= 1e-9 * max(sv[0], 1.0):
            raise DegenerateGeometryError("correspondences are collinear")
    ts, td = _hartley(src), _hartley(dst)
    s = src @ ts[:2, :2].T + ts[:2, 2]
    d = dst @ td[:2, :2].T + td[:2, 2]
    n = len(s)
    a = np.zeros((2 * n, 9))
    a[0::2, 0:2] = s
    a[0::2, 2] = 1
    a[0::2, 6:8] = -d[:, :1] * s
    a[0::2, 8] = -d[:, 0]
    a[1::2, 3:5] = s
    a[1::2, 5] = 1
    a[1::2, 6:8] = -d[:, 1:2] * s
    a[1::2, 8] = -d[:, 1]
    _, _, vt = np.linalg.svd(a)
    hn = vt[-1].reshape(3, 3)
    return Homography(np.linalg.inv(td) @ hn @ ts)


def _ground_affine(cam, frame, x, y, alt):
    """2x3 affine map from ground-plane local (x, y) to pixels of ``cam``."""
    lat, lon, a = frame.to_geodetic(x, y, np.full_like(x, alt - frame.origin.alt))
    s, l = cam.project(lat, lon, a)
    design = np.column_stack([x, y, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(design, np.column_stack([s, l]), rcond=None)
    return coef.T


def estimate_rectification(cam_a, cam_b, ground_plane_alt, scene_bbox, n_points=64,
                           seed=0, margin=0):
    """Fit both rectifying homographies and the shared output frame.

    ``scene_bbox`` is a :class:`~satstereo.geo.GeoBox`; only its horizontal
    extent is sampled.  Elevated scene points end up with positive
    disparity ``x_left - x_right``.
    """
    if n_points < 8:
        raise ValueError("n_points must be >= 8")
    rng = np.random.default_rng(seed)
    centre = GeodeticPoint(0.5 * (scene_bbox.lat_min + scene_bbox.lat_max),
                           0.5 * (scene_bbox.lon_min + scene_bbox.lon_max),
                           ground_plane_alt)
    frame = LocalFrame(centre)
    lat = rng.uniform(scene_bbox.lat_min, scene_bbox.lat_max, n_points)
    lon = rng.uniform(scene_bbox.lon_min, scene_bbox.lon_max, n_points)
    alt = np.full(n_points, float(ground_plane_alt))
    gx, gy, _ = frame.to_local(lat, lon, alt)
    centred = np.column_stack([gx, gy])
    centred = centred - centred.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1.0):
        raise DegenerateGeometryError("ground samples are collinear")

    pa = np.column_stack(cam_a.project(lat, lon, alt))
    pb = np.column_stack(cam_b.project(lat, lon, alt))

    ga = _ground_affine(cam_a, frame, gx, gy, ground_plane_alt)
    gb = _ground_affine(cam_b, frame, gx, gy, ground_plane_alt)
    mean_lin = 0.5 * (ga[:, :2] + gb[:, :2])

    # Elevated probe: where each image places it, pulled back to the ground
    # plane, then pushed through the mean map.  Rotating that displacement
    # onto +x makes epipolar lines horizontal and heights positive.
    plat, plon, palt = centre.lat, centre.lon, ground_plane_alt + PROBE_HEIGHT
    qa = np.array(cam_a.project(plat, plon, palt), dtype=np.float64)
    qb = np.array(cam_b.project(plat, plon, palt), dtype=np.float64)
    ua = np.linalg.solve(ga[:, :2], qa - ga[:, 2])
    ub = np.linalg.solve(gb[:, :2], qb - gb[:, 2])
    v = mean_lin @ (ua - ub)
    norm = np.hypot(*v)
    if norm > 1e-9:
        c, s = v / norm
        rot = np.array([[c, s], [-s, c]])
    else:
        rot = np.eye(2)

    target = 0.5 * (pa + pb) @ rot.T
    h_a = fit_homography_dlt(pa, target)
    h_b = fit_homography_dlt(pb, target)
    ra = np.column_stack(h_a.apply(pa[:, 0], pa[:, 1])) - target
    rb = np.column_stack(h_b.apply(pb[:, 0], pb[:, 1])) - target
    resid = float(max(np.abs(ra).max(), np.abs(rb).max()))
    if resid > 0.5:
        raise EstimationError(f"DLT ground residual {resid:.3f} px exceeds 0.5 px", resid)

    # Translate so the scene footprint over its altitude range starts at `margin`.
    corner_lat = np.tile([scene_bbox.lat_min, scene_bbox.lat_min,
                          scene_bbox.lat_max, scene_bbox.lat_max], 2)
    corner_lon = np.tile([scene_bbox.lon_min, scene_bbox.lon_max,
                          scene_bbox.lon_min, scene_bbox.lon_max], 2)
    corner_alt = np.repeat([min(scene_bbox.alt_min, ground_plane_alt),
                            max(scene_bbox.alt_max, ground_plane_alt)], 4)
    pts = []
    for cam, hom in ((cam_a, h_a), (cam_b, h_b)):
        s, l = cam.project(corner_lat, corner_lon, corner_alt)
        pts.append(np.column_stack(hom.apply(s, l)))
    pts = np.vstack(pts)
    lo = np.floor(pts.min(axis=0)) - margin
    hi = np.ceil(pts.max(axis=0)) + margin
    shift = np.array([[1.0, 0.0, -lo[0]], [0.0, 1.0, -lo[1]], [0.0, 0.0, 1.0]])
    h_a = Homography(shift @ h_a.h)
    h_b = Homography(shift @ h_b.h)
    out_w = int(hi[0] - lo[0]) + 1
    out_h = int(hi[1] - lo[1]) + 1
    return Rectification(h_a, h_b, (out_h, out_w), int(seed), float(ground_plane_alt),
                         resid, (float(v[0]), float(v[1])))


def estimate_rectifying_homographies(cam_a, cam_b, ground_plane_alt, scene_bbox,
                                     n_points=64, seed=0):
    r = estimate_rectification(cam_a, cam_b, ground_plane_alt, scene_bbox, n_points, seed)
    return r.h_left, r.h_right


@njit
def _warp_jit(img, hinv, out_h, out_w):
    src_h, src_w = img.shape
    out = np.zeros((out_h, out_w), dtype=np.float64)
    mask = np.zeros((out_h, out_w), dtype=np.bool_)
    for r in range(out_h):
        for c in range(out_w):
            x = float(c)
            y = float(r)
            w = hinv[2, 0] * x + hinv[2, 1] * y + hinv[2, 2]
            sx = (hinv[0, 0] * x + hinv[0, 1] * y + hinv[0, 2]) / w
            sy = (hinv[1, 0] * x + hinv[1, 1] * y + hinv[1, 2]) / w
            if sx < 0.0 or sy < 0.0 or sx > src_w - 1 or sy > src_h - 1:
                continue
            x0 = min(int(np.floor(sx)), max(src_w - 2, 0))
            y0 = min(int(np.floor(sy)), max(src_h - 2, 0))
            x1 = min(x0 + 1, src_w - 1)
            y1 = min(y0 + 1, src_h - 1)
            fx = sx - x0
            fy = sy - y0
            top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
            out[r, c] = top * (1.0 - fy) + bot * fy
            mask[r, c] = True
    return out, mask


def _warp_numpy(img, hinv, out_h, out_w):
    src_h, src_w = img.shape
    y, x = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    w = hinv[2, 0] * x + hinv[2, 1] * y + hinv[2, 2]
    sx = (hinv[0, 0] * x + hinv[0, 1] * y + hinv[0, 2]) / w
    sy = (hinv[1, 0] * x + hinv[1, 1] * y + hinv[1, 2]) / w
    mask = (sx >= 0.0) & (sy >= 0.0) & (sx <= src_w - 1) & (sy <= src_h - 1)
    sxm = np.where(mask, sx, 0.0)
    sym = np.where(mask, sy, 0.0)
    x0 = np.minimum(np.floor(sxm).astype(np.int64), max(src_w - 2, 0))
    y0 = np.minimum(np.floor(sym).astype(np.int64), max(src_h - 2, 0))
    x1 = np.minimum(x0 + 1, src_w - 1)
    y1 = np.minimum(y0 + 1, src_h - 1)
    fx = sxm - x0
    fy = sym - y0
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    out = np.where(mask, top * (1.0 - fy) + bot * fy, 0.0)
    return out, mask


_warp = dispatch(_warp_jit, _warp_numpy)


def warp_bilinear(img, h, out_dims):
    """Inverse-mapping bilinear warp of ``img`` by homography ``h``.

    Returns ``(float32 raster, bool mask)``; pixels whose pre-image falls
    outside the source get value 0 and mask False.
    """
    out_h, out_w = (int(v) for v in out_dims)
    if out_h <= 0 or out_w <= 0:
        raise ShapeError("out_dims must be positive")
    hmat = h.h if isinstance(h, Homography) else Homography(h).h
    hinv = np.linalg.inv(hmat)
    src = np.ascontiguousarray(img, dtype=np.float64)
    out, mask = _warp(src, hinv, out_h, out_w)
    return out.astype(np.float32), mask


def rectify_pair(img_a, img_b, cam_a, cam_b, ground_plane_alt, scene_bbox,
                 n_points=64, seed=0, margin=0):
    """Estimate the homographies and warp both images into the shared frame."""
    r = estimate_rectification(cam_a, cam_b, ground_plane_alt, scene_bbox,
                               n_points, seed, margin)
    left, lmask = warp_bilinear(img_a, r.h_left, r.out_shape)
    right, rmask = warp_bilinear(img_b, r.h_right, r.out_shape)
    meta = {"seed": r.seed, "ground_plane_alt": r.ground_alt,
            "ground_residual_px": r.ground_residual,
            "epipolar_direction": list(r.epipolar_direction),
            "n_points": int(n_points)}
    return RectifiedPair(left, right, r.h_left, r.h_right, lmask, rmask,
                         (cam_a, cam_b), meta)
