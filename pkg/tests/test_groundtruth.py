import numpy as np
import pytest

from satstereo.errors import EmptyResultError, HullDegenerateError, ShapeError
from satstereo.geo import UtmPoint
from satstereo.groundtruth import (DenseDisparity, LidarGrid, SparseDisparity,
                                   build_sparse_disparity, densify_disparity, read_disparity,
                                   read_lidar, remove_bleedthrough, splat_disparity,
                                   write_disparity, write_lidar)


def visible_height(geom, shape, step=0.05):
    """Ray-cast every rectified left pixel centre into the scene; returns the
    height above ground of the first surface hit."""
    m = geom.rectified_affine(geom.cam_a, geom.h_a)
    inv = np.linalg.inv(m[:, :2])
    rows, cols = np.indices(shape, dtype=np.float64)
    pix = np.stack([cols.ravel(), rows.ravel()])
    hit = np.full(pix.shape[1], np.nan)
    for z in np.arange(geom.scene.max_height + 1.0, -step, -step):
        todo = np.isnan(hit)
        if not todo.any():
            break
        xy = inv @ (pix[:, todo] - m[:, 2:3] * z - m[:, 3:4])
        surf = geom.scene.height(xy[0], xy[1])
        idx = np.flatnonzero(todo)[surf >= z - 1e-9]
        hit[idx] = z
    return np.maximum(hit, 0.0).reshape(shape)


def test_flat_lidar_gives_zero_disparity(flat_geometry):
    g = flat_geometry
    sp = build_sparse_disparity(g.scene.lidar(), g.cam_a, g.cam_b, g.h_a, g.h_b, g.rect.out_shape)
    assert sp.density > 0.5
    assert np.max(np.abs(sp.values[sp.valid])) < 1e-9


def test_single_elevated_point_matches_parallax(flat_geometry):
    g = flat_geometry
    lidar = g.scene.lidar()
    r, c = 160, 170
    lidar.elevations[r, c] += 30.0
    sp = build_sparse_disparity(lidar, g.cam_a, g.cam_b, g.h_a, g.h_b, g.rect.out_shape)
    # Closed form: disparity is one row of the stacked rectified camera matrices.
    e, n = lidar.cell_centers()
    from satstereo.geo import utm_to_latlon
    lat, lon = utm_to_latlon(e[r, c], n[r, c], lidar.origin.zone, lidar.origin.hemisphere)
    x, y, z = g.cam_a.frame.to_local(lat, lon, lidar.elevations[r, c])
    expected = g.disparity_row() @ np.array([x, y, z, 1.0])
    xa, ya = g.rectified_affine(g.cam_a, g.h_a) @ np.array([x, y, z, 1.0])
    pr, pc = int(np.rint(ya)), int(np.rint(xa))
    assert sp.valid[pr, pc]
    assert sp.values[pr, pc] == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(30.0 * g.disparity_row()[2], abs=1e-6)
    others = sp.valid.copy()
    others[pr, pc] = False
    assert np.max(np.abs(sp.values[others])) < 1e-9


def test_collision_keeps_highest():
    sp = splat_disparity(np.array([3.2, 2.9, 7.0]), np.array([1.1, 0.8, 1.0]),
                         np.array([-1.0, 4.0, 2.0]), np.array([5.0, 30.0, 1.0]), (3, 10))
    assert sp.values[1, 3] == 4.0
    assert sp.altitude[1, 3] == 30.0
    sp = splat_disparity(np.array([2.9, 3.2]), np.array([0.8, 1.1]),
                         np.array([4.0, -1.0]), np.array([30.0, 5.0]), (3, 10))
    assert sp.values[1, 3] == 4.0
    assert sp.valid.sum() == 1


def test_no_overlap_is_empty():
    with pytest.raises(EmptyResultError):
        splat_disparity(np.array([-50.0]), np.array([-50.0]), np.array([1.0]),
                        np.array([0.0]), (10, 10))


def test_sparse_matches_ray_cast_disparity(geometry):
    g = geometry
    sp = build_sparse_disparity(g.scene.lidar(), g.cam_a, g.cam_b, g.h_a, g.h_b, g.rect.out_shape)
    truth = g.disparity_row()[2] * visible_height(g, sp.shape)
    err = np.abs(sp.values - truth)[sp.valid]
    assert np.mean(err <= 0.5) >= 0.95
    cleaned = remove_bleedthrough(sp, tolerance=1.0, radius=2)
    err = np.abs(cleaned.values - truth)[cleaned.valid]
    assert np.mean(err <= 0.5) >= np.mean(np.abs(sp.values - truth)[sp.valid] <= 0.5)


# -- bleed-through -----------------------------------------------------------------

def as_sparse(alt):
    alt = np.asarray(alt, dtype=np.float64)
    return SparseDisparity(alt * 0.1, np.ones(alt.shape, bool), alt.copy())


def test_bleedthrough_flat_is_noop():
    sp = as_sparse(np.full((6, 7), 12.0))
    out = remove_bleedthrough(sp)
    np.testing.assert_array_equal(out.valid, sp.valid)
    np.testing.assert_array_equal(out.values, sp.values)


def test_bleedthrough_five_by_five():
    alt = np.zeros((5, 5))
    alt[2, 2] = 30.0
    out = remove_bleedthrough(as_sparse(alt), tolerance=1.0, radius=1)
    expected = np.ones((5, 5), bool)
    expected[1:4, 1:4] = False
    expected[2, 2] = True
    np.testing.assert_array_equal(out.valid, expected)
    assert out.density <= 1.0


def test_bleedthrough_keeps_within_tolerance():
    alt = np.zeros((5, 5))
    alt[2, 2] = 30.0
    alt[2, 3] = 29.5
    alt[2, 1] = 28.9
    out = remove_bleedthrough(as_sparse(alt), tolerance=1.0, radius=1)
    assert out.valid[2, 3] and out.valid[2, 2]
    assert not out.valid[2, 1]


def test_bleedthrough_removes_constructed_occlusions(rng):
    alt = np.zeros((40, 40))
    alt[10:20, 10:20] = 30.0
    occluded = np.zeros_like(alt, bool)
    occluded[12, 12] = occluded[15, 17] = occluded[18, 11] = True
    alt[occluded] = 0.0
    out = remove_bleedthrough(as_sparse(alt), tolerance=1.0, radius=2)
    assert not out.valid[occluded].any()
    roof = (alt == 30.0)
    assert out.valid[roof].all()


def test_bleedthrough_idempotent(rng):
    alt = rng.choice([0.0, 0.5, 20.0, 20.7, 50.0], size=(30, 30))
    valid = rng.random((30, 30)) > 0.3
    sp = SparseDisparity(alt * 0.8, valid, np.where(valid, alt, np.nan))
    once = remove_bleedthrough(sp, radius=2)
    twice = remove_bleedthrough(once, radius=2)
    np.testing.assert_array_equal(once.valid, twice.valid)
    np.testing.assert_array_equal(once.values, twice.values)
    assert once.density <= sp.density


def test_bleedthrough_validation():
    sp = as_sparse(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        remove_bleedthrough(sp, radius=0)
    with pytest.raises(ShapeError):
        remove_bleedthrough(sp, altitudes=np.zeros((3, 4)))


# -- densify -----------------------------------------------------------------------

def test_densify_full_input_is_identity(rng):
    v = rng.normal(size=(12, 15))
    out = densify_disparity(SparseDisparity(v, np.ones(v.shape, bool)))
    np.testing.assert_array_equal(out.values, v)
    assert out.valid.all() and isinstance(out, DenseDisparity)


def test_densify_triangle_centroid():
    v = np.zeros((7, 7))
    valid = np.zeros((7, 7), bool)
    for r, c, d in ((0, 0, 0.0), (0, 6, 0.0), (6, 3, 3.0)):
        valid[r, c] = True
        v[r, c] = d
    # Vertices (x, y) = (0,0), (6,0), (3,6); centroid (3, 2).
    out = densify_disparity(SparseDisparity(v, valid))
    assert out.values[2, 3] == pytest.approx(1.0, abs=1e-12)
    assert not out.valid[6, 0] and not out.valid[6, 6]


def test_densify_reproduces_plane(rng):
    h, w = 40, 60
    rows, cols = rng.integers(0, h, 50), rng.integers(0, w, 50)
    a, b, c = 0.37, -0.21, 5.0
    yy, xx = np.indices((h, w), dtype=np.float64)
    plane = a * xx + b * yy + c
    valid = np.zeros((h, w), bool)
    valid[rows, cols] = True
    out = densify_disparity(SparseDisparity(np.where(valid, plane, 0.0), valid))
    assert out.valid.sum() > valid.sum()
    assert np.max(np.abs(out.values - plane)[out.valid]) < 1e-6
    # Never extrapolates: the hull bounds the filled box.
    assert out.valid[:, :cols.min()].sum() == 0 and out.valid[:, cols.max() + 1:].sum() == 0


def test_densify_degenerate():
    v = np.zeros((5, 5))
    valid = np.zeros((5, 5), bool)
    valid[0, 0] = valid[0, 1] = True
    with pytest.raises(HullDegenerateError):
        densify_disparity(SparseDisparity(v, valid))
    valid[0, 2] = True
    with pytest.raises(HullDegenerateError):
        densify_disparity(SparseDisparity(v, valid))


# -- I/O ---------------------------------------------------------------------------

def test_lidar_round_trip(tmp_path, rng):
    grid = LidarGrid(rng.normal(size=(6, 9)), UtmPoint(433000.25, 3354000.75, 17, "north"), 0.5)
    grid.elevations[2, 3] = grid.nodata
    write_lidar(grid, tmp_path / "l.pfm", tmp_path / "l.json")
    back = read_lidar(tmp_path / "l.pfm", tmp_path / "l.json")
    np.testing.assert_allclose(back.elevations, grid.elevations, rtol=1e-6)
    assert back.origin == grid.origin and back.cell_size == 0.5
    assert not back.valid[2, 3] and back.valid.sum() == 53


def test_disparity_round_trip(tmp_path, rng):
    sp = SparseDisparity(rng.normal(size=(5, 8)), rng.random((5, 8)) > 0.5)
    write_disparity(sp, tmp_path / "d.pfm", tmp_path / "d.pgm")
    back = read_disparity(tmp_path / "d.pfm", tmp_path / "d.pgm")
    np.testing.assert_array_equal(back.valid, sp.valid)
    np.testing.assert_allclose(back.values[sp.valid], sp.values[sp.valid], rtol=1e-6)


def test_lidar_rejects_bad_cell_size():
    with pytest.raises(ValueError):
        LidarGrid(np.zeros((2, 2)), UtmPoint(500000.0, 0.0, 17, "north"), 0.0)
