"""Geodesy, RPC projection and affine camera approximation."""
from .affine import AffineCamera, GeoBox, affine_project, fit_affine_camera
from .geodesy import (
    GeodeticPoint, LocalFrame, UtmPoint, latlon_to_utm, meters_per_degree,
    utm_to_latlon, utm_to_wgs84, wgs84_to_utm,
)
from .rpc import RpcCamera, read_rpc, rpc_project, write_rpc

__all__ = [
    "AffineCamera", "GeoBox", "GeodeticPoint", "LocalFrame", "RpcCamera", "UtmPoint",
    "affine_project", "fit_affine_camera", "latlon_to_utm", "meters_per_degree",
    "read_rpc", "rpc_project", "utm_to_latlon", "utm_to_wgs84", "wgs84_to_utm",
    "write_rpc",
]
