"""WGS84 <-> UTM conversion and a local Euclidean frame.

The transverse Mercator projection uses Krueger's series to sixth order in
the third flattening (Karney 2011), which is accurate to a few nanometres
within a zone, far below what the stereo pipeline needs.
"""
from dataclasses import dataclass

import numpy as np

from ..errors import CoordinateError

WGS84_A = 6378137.0
WGS84_INV_F = 298.257223563
WGS84_F = 1.0 / WGS84_INV_F
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)
UTM_K0 = 0.9996
UTM_FALSE_EASTING = 500000.0
UTM_FALSE_NORTHING_SOUTH = 10000000.0

_N = WGS84_F / (2.0 - WGS84_F)
_E = np.sqrt(WGS84_E2)
_A_RECT = WGS84_A / (1.0 + _N) * (1.0 + _N**2 / 4.0 + _N**4 / 64.0 + _N**6 / 256.0)

_ALPHA = np.array([
    _N / 2 - 2 * _N**2 / 3 + 5 * _N**3 / 16 + 41 * _N**4 / 180
    - 127 * _N**5 / 288 + 7891 * _N**6 / 37800,
    13 * _N**2 / 48 - 3 * _N**3 / 5 + 557 * _N**4 / 1440
    + 281 * _N**5 / 630 - 1983433 * _N**6 / 1935360,
    61 * _N**3 / 240 - 103 * _N**4 / 140 + 15061 * _N**5 / 26880
    + 167603 * _N**6 / 181440,
    49561 * _N**4 / 161280 - 179 * _N**5 / 168 + 6601661 * _N**6 / 7257600,
    34729 * _N**5 / 80640 - 3418889 * _N**6 / 1995840,
    212378941 * _N**6 / 319334400,
])
_BETA = np.array([
    _N / 2 - 2 * _N**2 / 3 + 37 * _N**3 / 96 - _N**4 / 360
    - 81 * _N**5 / 512 + 96199 * _N**6 / 604800,
    _N**2 / 48 + _N**3 / 15 - 437 * _N**4 / 1440
    + 46 * _N**5 / 105 - 1118711 * _N**6 / 3870720,
    17 * _N**3 / 480 - 37 * _N**4 / 840 - 209 * _N**5 / 4480
    + 5569 * _N**6 / 90720,
    4397 * _N**4 / 161280 - 11 * _N**5 / 504 - 830251 * _N**6 / 7257600,
    4583 * _N**5 / 161280 - 108847 * _N**6 / 3991680,
    20648693 * _N**6 / 638668800,
])
_J2 = 2.0 * np.arange(1, 7)


@dataclass(frozen=True)
class GeodeticPoint:
    """WGS84 latitude/longitude in degrees, altitude in metres above the ellipsoid."""

    lat: float
    lon: float
    alt: float = 0.0

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0):
            raise CoordinateError(f"latitude {self.lat} outside [-90, 90]")
        if not (-180.0 <= self.lon < 180.0):
            raise CoordinateError(f"longitude {self.lon} outside [-180, 180)")


@dataclass(frozen=True)
class UtmPoint:
    easting: float
    northing: float
    zone: int
    hemisphere: str = "north"

    def __post_init__(self):
        _check_zone(self.zone, self.hemisphere)
        if not (0.0 < self.easting < 1e6):
            raise CoordinateError(f"easting {self.easting} outside (0, 1e6)")
        if not (0.0 <= self.northing < 1e7):
            raise CoordinateError(f"northing {self.northing} outside [0, 1e7)")


def _check_zone(zone, hemisphere):
    if int(zone) != zone or not (1 <= zone <= 60):
        raise CoordinateError(f"UTM zone {zone} outside 1..60")
    if hemisphere not in ("north", "south"):
        raise CoordinateError(f"hemisphere must be 'north' or 'south', got {hemisphere!r}")


def central_meridian(zone):
    return -183.0 + 6.0 * zone


def _tau_prime(tau):
    sigma = np.sinh(_E * np.arctanh(_E * tau / np.hypot(1.0, tau)))
    return tau * np.hypot(1.0, sigma) - sigma * np.hypot(1.0, tau)


def _tau_from_tau_prime(taup):
    # Newton on tau' = f(tau); converges in 2-3 iterations for all latitudes.
    tau = taup / (1.0 - WGS84_E2)
    for _ in range(5):
        tp = _tau_prime(tau)
        dtau = ((taup - tp) / np.hypot(1.0, tp)
                * (1.0 + (1.0 - WGS84_E2) * tau**2)
                / ((1.0 - WGS84_E2) * np.hypot(1.0, tau)))
        tau = tau + dtau
    return tau


def latlon_to_utm(lat, lon, zone, hemisphere="north"):
    """Forward transverse Mercator.  Accepts scalars or arrays (degrees)."""
    _check_zone(zone, hemisphere)
    phi = np.radians(np.asarray(lat, dtype=np.float64))
    lam = np.radians(np.asarray(lon, dtype=np.float64) - central_meridian(zone))
    lam = (lam + np.pi) % (2 * np.pi) - np.pi
    taup = _tau_prime(np.tan(phi))
    xip = np.arctan2(taup, np.cos(lam))
    etap = np.arcsinh(np.sin(lam) / np.hypot(taup, np.cos(lam)))
    j = _J2.reshape((-1,) + (1,) * xip.ndim)
    xi = xip + np.sum(_ALPHA.reshape(j.shape) * np.sin(j * xip) * np.cosh(j * etap), axis=0)
    eta = etap + np.sum(_ALPHA.reshape(j.shape) * np.cos(j * xip) * np.sinh(j * etap), axis=0)
    easting = UTM_FALSE_EASTING + UTM_K0 * _A_RECT * eta
    northing = UTM_K0 * _A_RECT * xi
    if hemisphere == "south":
        northing = northing + UTM_FALSE_NORTHING_SOUTH
    return easting, northing


def utm_to_latlon(easting, northing, zone, hemisphere="north"):
    """Inverse transverse Mercator.  Returns ``(lat, lon)`` in degrees."""
    _check_zone(zone, hemisphere)
    e = np.asarray(easting, dtype=np.float64)
    n = np.asarray(northing, dtype=np.float64)
    if hemisphere == "south":
        n = n - UTM_FALSE_NORTHING_SOUTH
    xi = n / (UTM_K0 * _A_RECT)
    eta = (e - UTM_FALSE_EASTING) / (UTM_K0 * _A_RECT)
    j = _J2.reshape((-1,) + (1,) * xi.ndim)
    beta = _BETA.reshape(j.shape)
    xip = xi - np.sum(beta * np.sin(j * xi) * np.cosh(j * eta), axis=0)
    etap = eta - np.sum(beta * np.cos(j * xi) * np.sinh(j * eta), axis=0)
    taup = np.sin(xip) / np.hypot(np.sinh(etap), np.cos(xip))
    lam = np.arctan2(np.sinh(etap), np.cos(xip))
    lat = np.degrees(np.arctan(_tau_from_tau_prime(taup)))
    lon = np.degrees(lam) + central_meridian(zone)
    lon = (lon + 180.0) % 360.0 - 180.0
    return lat, lon


def utm_to_wgs84(p, alt=0.0):
    """Convert a :class:`UtmPoint` to a :class:`GeodeticPoint`."""
    lat, lon = utm_to_latlon(p.easting, p.northing, p.zone, p.hemisphere)
    return GeodeticPoint(float(lat), float(lon), float(alt))


def wgs84_to_utm(p, zone=None, hemisphere=None):
    if zone is None:
        zone = int((p.lon + 180.0) // 6.0) + 1
    if hemisphere is None:
        hemisphere = "north" if p.lat >= 0 else "south"
    e, n = latlon_to_utm(p.lat, p.lon, zone, hemisphere)
    return UtmPoint(float(e), float(n), zone, hemisphere)


def meters_per_degree(lat):
    """Metres per degree of latitude and longitude at ``lat`` on WGS84."""
    s = np.sin(np.radians(lat))
    w = np.sqrt(1.0 - WGS84_E2 * s * s)
    meridional = WGS84_A * (1.0 - WGS84_E2) / w**3
    prime_vertical = WGS84_A / w
    return (np.radians(1.0) * meridional,
            np.radians(1.0) * prime_vertical * np.cos(np.radians(lat)))


@dataclass(frozen=True)
class LocalFrame:
    """Equirectangular east/north/up frame anchored at a geodetic origin.

    Linear in (lat, lon, alt), so affine maps in local coordinates stay
    affine in geodetic coordinates.
    """

    origin: GeodeticPoint

    @property
    def scale(self):
        m_lat, m_lon = meters_per_degree(self.origin.lat)
        return float(m_lon), float(m_lat)

    def to_local(self, lat, lon, alt):
        sx, sy = self.scale
        x = (np.asarray(lon, dtype=np.float64) - self.origin.lon) * sx
        y = (np.asarray(lat, dtype=np.float64) - self.origin.lat) * sy
        z = np.asarray(alt, dtype=np.float64) - self.origin.alt
        return x, y, z

    def to_geodetic(self, x, y, z):
        sx, sy = self.scale
        lon = self.origin.lon + np.asarray(x, dtype=np.float64) / sx
        lat = self.origin.lat + np.asarray(y, dtype=np.float64) / sy
        alt = self.origin.alt + np.asarray(z, dtype=np.float64)
        return lat, lon, alt
