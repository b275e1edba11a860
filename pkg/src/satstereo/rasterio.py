"""Readers/writers for the raster and grid formats used between stages.

* PFM (``Pf`` grayscale / ``PF`` colour, float32, rows stored bottom-up)
* binary PGM (``P5``), 8- or 16-bit; 16-bit samples are big-endian
* ESRI ASCII grid for DSMs and ``x y z`` point clouds
"""
import json
import re

import numpy as np


def write_pfm(path, data, scale=1.0):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = "Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
    else:
        raise ValueError(f"PFM needs HxW or HxWx3 data, got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{header}\n{w} {h}\n{-abs(scale)!r}\n".encode("ascii"))
        fh.write(np.flipud(data).astype("<f4").tobytes())


def _read_token(fh):
    token = b""
    while True:
        c = fh.read(1)
        if not c:
            break
        if c == b"#" and not token:
            fh.readline()
            continue
        if c.isspace():
            if token:
                break
            continue
        token += c
    return token.decode("ascii")


def read_pfm(path):
    """Return ``(data, scale)``; data is float32 with row 0 at the top."""
    with open(path, "rb") as fh:
        header = _read_token(fh)
        if header not in ("Pf", "PF"):
            raise ValueError(f"{path}: not a PFM file (header {header!r})")
        w, h = int(_read_token(fh)), int(_read_token(fh))
        scale = float(_read_token(fh))
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if header == "PF" else 1
        raw = np.frombuffer(fh.read(w * h * channels * 4), dtype=dtype)
    shape = (h, w, 3) if channels == 3 else (h, w)
    if raw.size != np.prod(shape):
        raise ValueError(f"{path}: truncated PFM payload")
    return np.flipud(raw.reshape(shape)).astype(np.float32), abs(scale)


def write_pgm(path, data, maxval=None):
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError("PGM needs a 2-D array")
    if maxval is None:
        maxval = 65535 if data.dtype != np.uint8 and data.dtype != np.bool_ else 255
    if not (1 <= maxval <= 65535):
        raise ValueError("maxval must be in 1..65535")
    values = np.clip(np.rint(data.astype(np.float64)), 0, maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(values.astype(dtype).tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        magic = _read_token(fh)
        if magic != "P5":
            raise ValueError(f"{path}: only binary PGM (P5) is supported")
        w, h, maxval = int(_read_token(fh)), int(_read_token(fh)), int(_read_token(fh))
        dtype = ">u2" if maxval > 255 else "u1"
        count = w * h
        raw = np.frombuffer(fh.read(count * np.dtype(dtype).itemsize), dtype=dtype)
    if raw.size != count:
        raise ValueError(f"{path}: truncated PGM payload")
    return raw.reshape(h, w).astype(np.uint16 if maxval > 255 else np.uint8)


def write_mask_pgm(path, mask):
    write_pgm(path, np.asarray(mask, dtype=np.uint8) * 255, maxval=255)


def read_mask_pgm(path):
    return read_pgm(path) > 0


def write_esri_ascii(path, values, xll, yll, cellsize, nodata=-9999.0):
    """Write an ESRI ASCII grid; ``values[0]`` is the northernmost row."""
    values = np.asarray(values, dtype=np.float64)
    out = np.where(np.isfinite(values), values, nodata)
    nrows, ncols = out.shape
    with open(path, "w") as fh:
        fh.write(f"ncols {ncols}\nnrows {nrows}\nxllcorner {xll!r}\n"
                 f"yllcorner {yll!r}\ncellsize {cellsize!r}\nNODATA_value {nodata!r}\n")
        np.savetxt(fh, out, fmt="%.4f")


def read_esri_ascii(path):
    """Return ``(values, header)``; nodata cells come back as NaN."""
    header = {}
    with open(path) as fh:
        for _ in range(6):
            key, val = fh.readline().split()
            header[key.lower()] = float(val)
        values = np.loadtxt(fh, ndmin=2)
    nodata = header.get("nodata_value", -9999.0)
    values = np.where(values == nodata, np.nan, values)
    expected = (int(header["nrows"]), int(header["ncols"]))
    if values.shape != expected:
        raise ValueError(f"{path}: grid is {values.shape}, header says {expected}")
    return values, header


def write_xyz(path, points):
    np.savetxt(path, np.asarray(points, dtype=np.float64).reshape(-1, 3), fmt="%.6f")


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


_SAFE = re.compile(r"[^A-Za-z0-9_.-]+")


def safe_name(text):
    return _SAFE.sub("_", str(text))
