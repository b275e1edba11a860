"""Synthetic data: random-dot stereograms, affine cameras and a small
urban scene with known heights, used by the tests and the demo pipeline."""
import numpy as np

from .dataset import StereoTile, normalize_image
from .groundtruth import DenseDisparity


def _sample_rows(texture, x):
    """Linear interpolation of each row of ``texture`` at columns ``x``."""
    h, w = texture.shape
    x = np.clip(x, 0, w - 1)
    x0 = np.minimum(np.floor(x).astype(int), w - 2)
    f = x - x0
    rows = np.arange(h)[:, None]
    return texture[rows, x0] * (1 - f) + texture[rows, x0 + 1] * f


def random_dot_tiles(n, shape=(32, 64), disparity_range=(2.0, 24.0), seed=0):
    """Random-dot stereo tiles with row-wise planar disparity ``a + b*y``.

    The left image samples a random texture at ``x``, the right one at
    ``x + d``, so ``left(x) = right(x - d)`` holds exactly.
    """
    rng = np.random.default_rng(seed)
    h, w = shape
    lo, hi = disparity_range
    span = int(np.ceil(hi)) + 2
    xs = np.broadcast_to(np.arange(w, dtype=np.float64), (h, w))
    tiles = []
    for _ in range(n):
        texture = rng.random((h, w + span))
        a = rng.uniform(lo, hi)
        slope = rng.uniform(-0.5, 0.5) * min(hi - a, a - lo) / max(h, 1)
        d = a + slope * np.arange(h, dtype=np.float64)[:, None] + 0.0 * xs
        left = _sample_rows(texture, xs)
        right = _sample_rows(texture, xs + d)
        gt = DenseDisparity(d, np.ones((h, w), bool))
        tiles.append(StereoTile(normalize_image(left), normalize_image(right), gt))
    return tiles


# -- cameras --------------------------------------------------------------------

def make_affine_camera(origin, gsd=0.5, off_nadir=15.0, azimuth=90.0, roll=0.0,
                       size=(400, 400)):
    """Affine view of a scene centred on ``origin`` (a GeodeticPoint).

    A point raised by ``z`` metres appears displaced on the ground by
    ``tan(off_nadir) * z`` towards ``azimuth`` (degrees clockwise from
    north); ``roll`` rotates the image plane.  The scene centre lands in the
    middle of an image of ``size`` (rows, cols).
    """
    t = np.tan(np.radians(off_nadir))
    az = np.radians(azimuth)
    lean = t * np.array([np.sin(az), np.cos(az)])
    # Ground (east, north, up) -> image-plane metres before rotation.
    ground = np.array([[1.0, 0.0, lean[0]], [0.0, 1.0, lean[1]]])
    c, s = np.cos(np.radians(roll)), np.sin(np.radians(roll))
    rot = np.array([[c, -s], [s, c]])
    flip = np.diag([1.0, -1.0])  # lines grow southwards
    lin = flip @ rot @ ground / gsd
    rows, cols = size
    trans = np.array([cols / 2.0, rows / 2.0])
    from .geo.affine import AffineCamera
    return AffineCamera(np.column_stack([lin, trans]), origin)


def rpc_from_affine(cam, box, cubic=0.0, seed=0):
    """RPC reproducing ``cam`` over ``box``; ``cubic`` adds small random
    higher-order numerator terms (normalised units)."""
    from .geo.rpc import RpcCamera
    sx, sy = cam.frame.scale
    o = cam.local_origin
    so = {
        "LAT_OFF": 0.5 * (box.lat_min + box.lat_max),
        "LAT_SCALE": 0.5 * (box.lat_max - box.lat_min),
        "LONG_OFF": 0.5 * (box.lon_min + box.lon_max),
        "LONG_SCALE": 0.5 * (box.lon_max - box.lon_min),
        "HEIGHT_OFF": 0.5 * (box.alt_min + box.alt_max),
        "HEIGHT_SCALE": max(0.5 * (box.alt_max - box.alt_min), 1.0),
    }
    m = cam.matrix
    rng = np.random.default_rng(seed)
    num = []
    centre = None
    for row in m:
        # Local coordinates are affine in the normalised ones.
        cx = (so["LONG_OFF"] - o.lon) * sx
        cy = (so["LAT_OFF"] - o.lat) * sy
        cz = so["HEIGHT_OFF"] - o.alt
        const = row[0] * cx + row[1] * cy + row[2] * cz + row[3]
        coeffs = np.zeros(20)
        coeffs[0] = const
        coeffs[1] = row[0] * sx * so["LONG_SCALE"]
        coeffs[2] = row[1] * sy * so["LAT_SCALE"]
        coeffs[3] = row[2] * so["HEIGHT_SCALE"]
        num.append(coeffs)
        centre = const if centre is None else centre
    samp, line = num
    so["SAMP_OFF"], so["LINE_OFF"] = samp[0], line[0]
    so["SAMP_SCALE"] = max(np.abs(samp[1:4]).sum(), 1.0)
    so["LINE_SCALE"] = max(np.abs(line[1:4]).sum(), 1.0)
    samp = samp.copy()
    line = line.copy()
    samp[0] = 0.0
    line[0] = 0.0
    samp /= so["SAMP_SCALE"]
    line /= so["LINE_SCALE"]
    if cubic:
        samp[4:] += rng.uniform(-cubic, cubic, 16)
        line[4:] += rng.uniform(-cubic, cubic, 16)
    den = np.zeros(20)
    den[0] = 1.0
    return RpcCamera(line_num=line, line_den=den, samp_num=samp, samp_den=den, scale_offset=so)


# -- urban scene ----------------------------------------------------------------

def _hash_noise(ix, iy, seed):
    h = (ix.astype(np.int64) * 73856093) ^ (iy.astype(np.int64) * 19349663) ^ (seed * 83492791)
    h = (h ^ (h >> 13)) * 1274126177
    h = h ^ (h >> 16)
    return (h & 0xFFFF).astype(np.float64) / 65535.0


def value_noise(u, v, cell, seed):
    """Bilinear lattice noise in [0, 1]; ``cell`` is the lattice spacing."""
    u = np.asarray(u, dtype=np.float64) / cell
    v = np.asarray(v, dtype=np.float64) / cell
    iu, iv = np.floor(u), np.floor(v)
    fu, fv = u - iu, v - iv
    n00 = _hash_noise(iu, iv, seed)
    n10 = _hash_noise(iu + 1, iv, seed)
    n01 = _hash_noise(iu, iv + 1, seed)
    n11 = _hash_noise(iu + 1, iv + 1, seed)
    return (n00 * (1 - fu) + n10 * fu) * (1 - fv) + (n01 * (1 - fu) + n11 * fu) * fv


class UrbanScene:
    """Flat ground with two box buildings, described in a local ENU frame.

    ``buildings`` holds ``(x0, x1, y0, y1, height)`` tuples in metres
    relative to the ground plane.
    """

    def __init__(self, origin, half_extent=80.0,
                 buildings=((-50.0, -15.0, -40.0, 10.0, 20.0), (15.0, 50.0, -10.0, 40.0, 50.0)),
                 texture_cell=0.6, seed=0):
        from .geo.geodesy import LocalFrame
        self.origin = origin
        self.frame = LocalFrame(origin)
        self.half_extent = float(half_extent)
        self.ground_alt = float(origin.alt)
        self.buildings = tuple(tuple(float(v) for v in b) for b in buildings)
        self.texture_cell = texture_cell
        self.seed = seed

    @property
    def max_height(self):
        return max([b[4] for b in self.buildings] + [0.0])

    def height(self, x, y):
        """Surface height above the ground plane at local (x, y)."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        h = np.zeros(np.broadcast(x, y).shape)
        for x0, x1, y0, y1, top in self.buildings:
            inside = (x >= x0) & (x < x1) & (y >= y0) & (y < y1)
            h = np.where(inside, np.maximum(h, top), h)
        return h

    def bbox(self, margin=0.0):
        from .geo.affine import GeoBox
        r = self.half_extent + margin
        lat, lon, _ = self.frame.to_geodetic(np.array([-r, r]), np.array([-r, r]), np.zeros(2))
        return GeoBox(float(lat[0]), float(lat[1]), float(lon[0]), float(lon[1]),
                      self.ground_alt, self.ground_alt + self.max_height)

    def texture(self, x, y, z):
        fine = value_noise(x + 0.37 * z, y - 0.61 * z, self.texture_cell, self.seed)
        coarse = value_noise(x, y + z, 8.0, self.seed + 1)
        return 0.75 * fine + 0.25 * coarse

    def render(self, cam, size, supersample=2, gain=1.0, bias=0.0, z_step=0.25):
        """Ray-cast ``cam`` (affine, local frame == scene frame) into an image."""
        rows, cols = size
        m = cam.matrix
        a2 = m[:, :2]
        a2inv = np.linalg.inv(a2)
        acc = np.zeros((rows, cols))
        offs = (np.arange(supersample) + 0.5) / supersample - 0.5
        top = self.max_height + 1.0
        zs = np.arange(top, -z_step, -z_step)
        for oy in offs:
            for ox in offs:
                ll, ss = np.mgrid[0:rows, 0:cols].astype(np.float64)
                pix = np.stack([(ss + ox).ravel(), (ll + oy).ravel()])

                def ground_xy(z):
                    rhs = pix - (m[:, 2:3] * z + m[:, 3:4])
                    return a2inv @ rhs

                hit_z = np.full(pix.shape[1], np.nan)
                for z in zs:
                    todo = np.isnan(hit_z)
                    if not todo.any():
                        break
                    xy = ground_xy(z)
                    hh = self.height(xy[0], xy[1])
                    hit = todo & (hh >= z)
                    hit_z[hit] = z
                # Refine: roof/ground hits sit exactly at their height.
                xy_top = np.empty_like(pix)
                zfinal = hit_z.copy()
                xy = ground_xy(hit_z)
                hh = self.height(xy[0], xy[1])
                xy_roof = ground_xy(hh)
                roof = self.height(xy_roof[0], xy_roof[1]) == hh
                zfinal = np.where(roof, hh, hit_z)
                xy_top = np.where(roof, xy_roof, xy)
                val = self.texture(xy_top[0], xy_top[1], zfinal)
                acc += val.reshape(rows, cols)
        img = acc / len(offs) ** 2
        return np.clip(gain * img + bias, 0.0, 1.0)

    def lidar(self, cell_size=0.5, nodata=-9999.0):
        """LiDAR grid in the scene's UTM zone covering the scene footprint."""
        from .geo.geodesy import UtmPoint, latlon_to_utm, utm_to_latlon
        from .groundtruth import LidarGrid
        zone = int((self.origin.lon + 180.0) // 6.0) + 1
        hemi = "north" if self.origin.lat >= 0 else "south"
        e0, n0 = latlon_to_utm(self.origin.lat, self.origin.lon, zone, hemi)
        r = self.half_extent
        n = int(np.floor(2 * r / cell_size))
        east0 = float(np.floor((e0 - r) / cell_size) * cell_size + cell_size / 2)
        north0 = float(np.ceil((n0 + r) / cell_size) * cell_size - cell_size / 2)
        rows, cols = np.indices((n, n), dtype=np.float64)
        lat, lon = utm_to_latlon(east0 + cols * cell_size, north0 - rows * cell_size, zone, hemi)
        x, y, _ = self.frame.to_local(lat, lon, np.zeros_like(lat))
        elev = self.ground_alt + self.height(x, y)
        inside = (np.abs(x) <= r) & (np.abs(y) <= r)
        elev = np.where(inside, elev, nodata)
        return LidarGrid(elev, UtmPoint(east0, north0, zone, hemi), cell_size, nodata)

    def truth_dsm(self, grid, samples=11):
        """Surface elevation range over the footprint of each DSM cell.

        Returns ``(low, high)`` rasters, NaN outside the scene.  A cell cut
        by a building edge legitimately holds either height, so scoring
        uses the distance to this interval (see
        :func:`satstereo.evaluation.interval_error`); cells
        inside one surface have ``low == high``.
        """
        from .geo.geodesy import utm_to_latlon
        e, n = grid.cell_centers()
        offs = (np.arange(samples) / (samples - 1) - 0.5) * grid.cell_size
        low = np.full(e.shape, np.inf)
        high = np.full(e.shape, -np.inf)
        lat, lon = utm_to_latlon(e, n, grid.zone, grid.hemisphere)
        xc, yc, _ = self.frame.to_local(lat, lon, np.zeros_like(lat))
        for du in offs:
            for dv in offs:
                lat, lon = utm_to_latlon(e + du, n + dv, grid.zone, grid.hemisphere)
                x, y, _ = self.frame.to_local(lat, lon, np.zeros_like(lat))
                h = self.ground_alt + self.height(x, y)
                np.minimum(low, h, out=low)
                np.maximum(high, h, out=high)
        inside = (np.abs(xc) <= self.half_extent) & (np.abs(yc) <= self.half_extent)
        return np.where(inside, low, np.nan), np.where(inside, high, np.nan)



# -- demo scene on disk ---------------------------------------------------------

DEMO_ORIGIN = (30.3165, -81.6557, 5.0)
DEMO_VIEWS = (
    # (off-nadir deg, azimuth deg, roll deg, gain, bias)
    (12.0, 80.0, 3.0, 1.0, 0.0),
    (12.0, 280.0, -4.0, 0.8, 0.1),
)


def bundled_config():
    """The pipeline settings shipped for the synthetic scene (a dict)."""
    import json
    from importlib import resources
    return json.loads(resources.files("satstereo").joinpath("configs/synthetic.json").read_text())


def write_demo_scene(out_dir, views=DEMO_VIEWS, size=(400, 400), seed=0, overrides=None):
    """Render the two-building scene and write everything the pipeline reads.

    Writes 16-bit PGM images, RPC files, the LiDAR grid with its sidecar,
    truth rasters on the DSM grid and ``config.json`` (the bundled settings
    plus scene paths, with ``overrides`` merged on top).  Returns the
    config path.
    """
    import os
    from .dsm import PointSet, grid_for_points
    from .geo.geodesy import GeodeticPoint
    from .geo.rpc import write_rpc
    from .groundtruth import write_lidar
    from .pipeline import _merge
    from .rasterio import write_esri_ascii, write_json, write_pgm

    os.makedirs(out_dir, exist_ok=True)
    cfg = bundled_config()
    if overrides:
        cfg = _merge(cfg, overrides)
    origin = GeodeticPoint(*DEMO_ORIGIN)
    scene = UrbanScene(origin, seed=seed)
    box = scene.bbox()
    images, rpcs = [], []
    for k, (off, az, roll, gain, bias) in enumerate(views):
        cam = make_affine_camera(origin, 0.5, off, az, roll, size)
        img = scene.render(cam, size, gain=gain, bias=bias)
        write_pgm(os.path.join(out_dir, f"view_{k}.pgm"), np.rint(img * 65535).astype(np.uint16), 65535)
        write_rpc(rpc_from_affine(cam, box), os.path.join(out_dir, f"view_{k}.rpc"))
        images.append(f"view_{k}.pgm")
        rpcs.append(f"view_{k}.rpc")
    lidar = scene.lidar()
    write_lidar(lidar, os.path.join(out_dir, "lidar.pfm"), os.path.join(out_dir, "lidar.json"))
    grid = grid_for_points(PointSet(*lidar.to_geodetic()), float(cfg["dsm"]["cell_size"]),
                           lidar.origin.zone, lidar.origin.hemisphere)
    low, high = scene.truth_dsm(grid)
    yll = grid.north - grid.shape[0] * grid.cell_size
    write_esri_ascii(os.path.join(out_dir, "truth_low.asc"), low, grid.east, yll, grid.cell_size)
    write_esri_ascii(os.path.join(out_dir, "truth_high.asc"), high, grid.east, yll, grid.cell_size)
    cfg["scene"] = {
        "id": "synthetic", "images": images, "rpcs": rpcs,
        "lidar": "lidar.pfm", "lidar_sidecar": "lidar.json",
        "ground_plane_alt": scene.ground_alt,
        "bbox": {"lat_min": box.lat_min, "lat_max": box.lat_max, "lon_min": box.lon_min,
                 "lon_max": box.lon_max, "alt_min": box.alt_min, "alt_max": box.alt_max},
        "truth_low": "truth_low.asc", "truth_high": "truth_high.asc",
    }
    path = os.path.join(out_dir, "config.json")
    write_json(path, cfg)
    return path
