"""Rational polynomial camera (RPC00B term order)."""
from dataclasses import dataclass, field

import numpy as np

from ..errors import SingularProjectionError

DEN_EPS = 1e-9

SCALE_OFFSET_KEYS = (
    "LAT_OFF", "LAT_SCALE", "LONG_OFF", "LONG_SCALE", "HEIGHT_OFF",
    "HEIGHT_SCALE", "LINE_OFF", "LINE_SCALE", "SAMP_OFF", "SAMP_SCALE",
)
COEFF_KEYS = ("LINE_NUM_COEFF", "LINE_DEN_COEFF", "SAMP_NUM_COEFF", "SAMP_DEN_COEFF")


def rpc_monomials(L, P, H):
    """The 20 cubic monomials in RPC00B order.

    ``L`` is normalised longitude, ``P`` normalised latitude and ``H``
    normalised height.  Returns a list so callers can accumulate in order.
    """
    return [
        np.ones_like(L), L, P, H, L * P, L * H, P * H, L * L, P * P, H * H,
        P * L * H, L * L * L, L * P * P, L * H * H, L * L * P, P * P * P,
        P * H * H, L * L * H, P * P * H, H * H * H,
    ]


def eval_cubic(coeffs, monomials):
    # Sequential accumulation keeps the evaluation order fixed.
    out = coeffs[0] * monomials[0]
    for c, m in zip(coeffs[1:], monomials[1:]):
        out = out + c * m
    return out


@dataclass(frozen=True, eq=False)
class RpcCamera:
    """Four 20-term cubic polynomials plus normalisation constants.

    ``scale_offset`` is a dict keyed like the RPC text format (``LAT_OFF``,
    ``LAT_SCALE``, ...).
    """

    line_num: np.ndarray
    line_den: np.ndarray
    samp_num: np.ndarray
    samp_den: np.ndarray
    scale_offset: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("line_num", "line_den", "samp_num", "samp_den"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != (20,):
                raise ValueError(f"{name} must have exactly 20 coefficients, got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        missing = [k for k in SCALE_OFFSET_KEYS if k not in self.scale_offset]
        if missing:
            raise ValueError(f"missing scale/offset keys: {missing}")
        object.__setattr__(self, "scale_offset",
                           {k: float(self.scale_offset[k]) for k in SCALE_OFFSET_KEYS})

    def normalize(self, lat, lon, alt):
        so = self.scale_offset
        L = (np.asarray(lon, dtype=np.float64) - so["LONG_OFF"]) / so["LONG_SCALE"]
        P = (np.asarray(lat, dtype=np.float64) - so["LAT_OFF"]) / so["LAT_SCALE"]
        H = (np.asarray(alt, dtype=np.float64) - so["HEIGHT_OFF"]) / so["HEIGHT_SCALE"]
        return L, P, H

    def project(self, lat, lon, alt):
        """Vectorised projection, returns ``(sample, line)`` arrays."""
        L, P, H = self.normalize(lat, lon, alt)
        mono = rpc_monomials(L, P, H)
        samp_den = eval_cubic(self.samp_den, mono)
        line_den = eval_cubic(self.line_den, mono)
        if np.any(np.abs(samp_den) < DEN_EPS) or np.any(np.abs(line_den) < DEN_EPS):
            raise SingularProjectionError("RPC denominator magnitude below 1e-9")
        so = self.scale_offset
        samp = eval_cubic(self.samp_num, mono) / samp_den * so["SAMP_SCALE"] + so["SAMP_OFF"]
        line = eval_cubic(self.line_num, mono) / line_den * so["LINE_SCALE"] + so["LINE_OFF"]
        return samp, line


def rpc_project(cam, p):
    """Project a :class:`GeodeticPoint` to ``(sample, line)``."""
    s, l = cam.project(p.lat, p.lon, p.alt)
    return float(s), float(l)


def read_rpc(path):
    """Parse a ``KEY: value`` RPC text file."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition(":")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected 'KEY: value'")
            values[key.strip().upper()] = float(val.split()[0])
    coeffs = {}
    for key in COEFF_KEYS:
        try:
            coeffs[key] = [values[f"{key}_{i}"] for i in range(1, 21)]
        except KeyError as exc:
            raise ValueError(f"{path}: missing {exc.args[0]}") from None
    return RpcCamera(
        line_num=coeffs["LINE_NUM_COEFF"], line_den=coeffs["LINE_DEN_COEFF"],
        samp_num=coeffs["SAMP_NUM_COEFF"], samp_den=coeffs["SAMP_DEN_COEFF"],
        scale_offset={k: values[k] for k in SCALE_OFFSET_KEYS if k in values},
    )


def write_rpc(cam, path):
    arrays = {"LINE_NUM_COEFF": cam.line_num, "LINE_DEN_COEFF": cam.line_den,
              "SAMP_NUM_COEFF": cam.samp_num, "SAMP_DEN_COEFF": cam.samp_den}
    with open(path, "w") as fh:
        for key in SCALE_OFFSET_KEYS:
            fh.write(f"{key}: {cam.scale_offset[key]!r}\n")
        for key in COEFF_KEYS:
            for i, c in enumerate(arrays[key], 1):
                fh.write(f"{key}_{i}: {float(c)!r}\n")
