import numpy as np
import pytest

from satstereo.geo import GeodeticPoint, GeoBox
from satstereo.synthetic import make_affine_camera

ORIGIN = GeodeticPoint(30.3165, -81.6557, 5.0)


@pytest.fixture
def origin():
    return ORIGIN


@pytest.fixture
def affine_pair():
    """Two oblique affine views of the same ground patch."""
    return (make_affine_camera(ORIGIN, 0.5, 12.0, 80.0, roll=3.0),
            make_affine_camera(ORIGIN, 0.5, 12.0, 280.0, roll=-4.0))


@pytest.fixture
def scene_box():
    """~200 m square around the origin, 0 to 500 m above it."""
    d = 0.001
    return GeoBox(ORIGIN.lat - d, ORIGIN.lat + d, ORIGIN.lon - d, ORIGIN.lon + d,
                  ORIGIN.alt, ORIGIN.alt + 500.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class Geometry:
    """Urban scene, two affine views and their rectification."""

    def __init__(self, buildings=None):
        from satstereo.rectify import estimate_rectification
        from satstereo.synthetic import UrbanScene
        kw = {} if buildings is None else {"buildings": buildings}
        self.scene = UrbanScene(ORIGIN, **kw)
        self.cam_a = make_affine_camera(ORIGIN, 0.5, 12.0, 80.0, roll=3.0)
        self.cam_b = make_affine_camera(ORIGIN, 0.5, 12.0, 280.0, roll=-4.0)
        box = self.scene.bbox()
        self.rect = estimate_rectification(self.cam_a, self.cam_b, ORIGIN.alt, box, seed=0)
        self.h_a, self.h_b = self.rect.h_left, self.rect.h_right

    def rectified_affine(self, cam, h):
        """2x4 map from local metres straight to rectified pixels."""
        assert np.allclose(h.h[2, :2], 0.0, atol=1e-12)
        return h.h[:2, :2] @ cam.matrix + np.hstack([np.zeros((2, 3)), h.h[:2, 2:3]])

    def disparity_row(self):
        """Row vector r with disparity = r . (x, y, z, 1)."""
        return (self.rectified_affine(self.cam_a, self.h_a)[0]
                - self.rectified_affine(self.cam_b, self.h_b)[0])


@pytest.fixture(scope="session")
def geometry():
    return Geometry()


@pytest.fixture(scope="session")
def flat_geometry():
    return Geometry(buildings=())


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request, capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        request.config.stash.setdefault(_ACCEPTANCE, []).append(line)
        with capsys.disabled():
            print(f"\n[acceptance] {line}")
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
