"""Training tiles: windowing, density filtering, disparity sign canonicalisation."""
import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeError
from .groundtruth import DenseDisparity, SparseDisparity, write_disparity
from .rasterio import write_pfm

TILE_SHAPE = (256, 512)


@dataclass(eq=False)
class StereoTile:
    left: np.ndarray
    right: np.ndarray
    gt: SparseDisparity
    offset: tuple = (0, 0)
    shift_applied: int = 0
    flipped: bool = False

    @property
    def shape(self):
        return self.left.shape

    @property
    def density(self):
        return self.gt.density


def tile_offsets(scene_shape, tile_shape=TILE_SHAPE, step=64):
    h, w = scene_shape
    th, tw = tile_shape
    if h < th or w < tw:
        raise ShapeError(f"scene {scene_shape} smaller than tile {tile_shape}")
    return [(r, c) for r in range(0, h - th + 1, step) for c in range(0, w - tw + 1, step)]


def tile_scene(pair, gt, step=64, min_density=0.40, tile_shape=TILE_SHAPE):
    """Slide a window jointly over both rectified images and the ground truth.

    Tiles whose ground-truth density is below ``min_density`` are dropped;
    density counts the whole tile, warp borders included.
    """
    if gt.shape != pair.shape:
        raise ShapeError("ground truth and rectified pair differ in shape")
    th, tw = tile_shape
    tiles = []
    for r, c in tile_offsets(pair.shape, tile_shape, step):
        g = gt.crop(r, c, th, tw)
        if g.density < min_density:
            continue
        tiles.append(StereoTile(pair.left_img[r:r + th, c:c + tw].copy(),
                                pair.right_img[r:r + th, c:c + tw].copy(), g, (r, c)))
    return tiles


def _shift_right(tile, s):
    right = np.zeros_like(tile.right)
    right[:, :right.shape[1] - s] = tile.right[:, s:]
    g = tile.gt
    gt = type(g)(np.where(g.valid, g.values + s, 0.0), g.valid.copy(),
                 None if g.altitude is None else g.altitude.copy())
    return replace(tile, right=right, gt=gt, shift_applied=tile.shift_applied + s)


def _swap(tile):
    """Exchange reference and target; disparity re-indexed onto the new reference."""
    g = tile.gt
    h, w = g.shape
    rows, cols = np.nonzero(g.valid)
    d = g.values[rows, cols]
    new_cols = np.rint(cols - d).astype(np.int64)
    inside = (new_cols >= 0) & (new_cols < w)
    rows, new_cols, nd = rows[inside], new_cols[inside], -d[inside]
    values = np.zeros((h, w))
    valid = np.zeros((h, w), dtype=bool)
    # On collisions the larger disparity (nearer surface) wins.
    flat = rows * w + new_cols
    order = np.lexsort((nd, flat))
    last = np.ones(len(order), dtype=bool)
    last[:-1] = flat[order[:-1]] != flat[order[1:]]
    keep = order[last]
    values.ravel()[flat[keep]] = nd[keep]
    valid.ravel()[flat[keep]] = True
    alt = None
    if g.altitude is not None:
        alt = np.full((h, w), np.nan)
        alt.ravel()[flat[keep]] = g.altitude[g.valid][inside][keep]
    gt = type(g)(values, valid, alt)
    return replace(tile, left=tile.right.copy(), right=tile.left.copy(), gt=gt,
                   flipped=not tile.flipped)


def canonicalize_pair(tile, shift_limit=10):
    """Make every valid disparity non-negative, or return ``None`` (discard).

    Small negative minima (above ``-shift_limit``) are absorbed by shifting
    the target image by the ceiling of the deficit; larger ones trigger a
    swap of reference and target, after which the check is repeated once.
    """
    if not tile.gt.valid.any():
        raise ValueError("tile has no valid ground truth")
    for attempt in range(2):
        m = float(tile.gt.values[tile.gt.valid].min())
        if m >= 0:
            return tile
        if m > -shift_limit:
            return _shift_right(tile, int(math.ceil(-m)))
        if attempt == 0:
            tile = _swap(tile)
            if not tile.gt.valid.any():
                return None
    return None


def normalize_image(img):
    """Zero mean, unit variance (std floored at 1e-6)."""
    img = np.asarray(img, dtype=np.float64)
    return ((img - img.mean()) / max(float(img.std()), 1e-6)).astype(np.float32)


def write_tiles(tiles, out_dir, scene_id, gt_kind=None):
    """Write tile rasters and a JSON-lines manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest, "w") as fh:
        for i, t in enumerate(tiles):
            stem = os.path.join(out_dir, f"{scene_id}_{i:05d}")
            paths = {"left": stem + "_left.pfm", "right": stem + "_right.pfm",
                     "gt": stem + "_gt.pfm", "gt_mask": stem + "_gt_mask.pgm"}
            write_pfm(paths["left"], t.left)
            write_pfm(paths["right"], t.right)
            write_disparity(t.gt, paths["gt"], paths["gt_mask"])
            kind = gt_kind or ("dense" if isinstance(t.gt, DenseDisparity) else "sparse")
            record = {"scene": scene_id, "offset": list(map(int, t.offset)),
                      "shift_applied": int(t.shift_applied), "flipped": bool(t.flipped),
                      "density": round(t.density, 6), "gt_kind": kind,
                      "files": {k: os.path.basename(v) for k, v in paths.items()}}
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return manifest


def read_manifest(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
