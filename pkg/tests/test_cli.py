import json
import os

import pytest

from satstereo.cli import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, build_parser, main, overrides_from_args
from satstereo.errors import ConfigError


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli_scene")
    assert main(["synth", "--out", str(d)]) == EXIT_OK
    return str(d / "config.json")


def parse(*argv):
    return build_parser().parse_args(list(argv))


def test_flag_overrides():
    args = parse("run", "--config", "c.json", "--out", "o", "--seed", "5", "--train-steps", "3",
                 "--tile-shape", "32", "64", "--set", "sgm.p2=60", "--set", "scene.id=demo",
                 "--pairs", "[[0, 1]]")
    assert overrides_from_args(args) == {
        "seed": 5, "train": {"steps": 3}, "tiles": {"shape": [32, 64]},
        "sgm": {"p2": 60}, "scene": {"id": "demo"}, "pairs": [[0, 1]]}
    with pytest.raises(ConfigError):
        overrides_from_args(parse("run", "--config", "c", "--out", "o", "--set", "novalue"))


def test_synth_writes_scene(scene):
    d = os.path.dirname(scene)
    for name in ("view_0.pgm", "view_1.rpc", "lidar.pfm", "lidar.json", "truth_low.asc"):
        assert os.path.exists(os.path.join(d, name))


def test_rectify_subcommand(scene, tmp_path, capsys):
    out = tmp_path / "r"
    code = main(["rectify", "--config", scene, "--out", str(out), "--set", "rectify.n_points=32"])
    assert code == EXIT_OK
    assert capsys.readouterr().out.strip() == str(out)
    m = json.loads((out / "manifest.json").read_text())
    assert set(m["stages"]) == {"cameras", "rectify"}
    assert m["config"]["rectify"]["n_points"] == 32


def test_sgm_subcommand_forces_matcher(scene, tmp_path):
    out = tmp_path / "s"
    code = main(["sgm", "--config", scene, "--out", str(out), "--matcher", "net",
                 "--train-steps", "1"])
    assert code == EXIT_OK
    m = json.loads((out / "manifest.json").read_text())
    assert m["config"]["matcher"] == "sgm" and "disparity" in m["stages"]
    assert "dsm" not in m["stages"]


def test_config_errors(scene, tmp_path, capsys):
    bad_json = tmp_path / "bad.json"
    bad_json.write_text("{not json")
    assert main(["run", "--config", str(bad_json), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["run", "--config", str(tmp_path / "none.json"), "--out", "o"]) == EXIT_CONFIG
    assert main(["run", "--config", scene, "--out", str(tmp_path / "o"),
                 "--set", "bogus=1"]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_stage_failure_exit_code(scene, tmp_path, capsys):
    cfg = json.loads(open(scene).read())
    d = os.path.dirname(scene)
    broken = tmp_path / "broken.pgm"
    broken.write_bytes(b"garbage")
    cfg["scene"]["images"] = [str(broken), os.path.join(d, "view_1.pgm")]
    cfg["scene"]["rpcs"] = [os.path.join(d, p) for p in cfg["scene"]["rpcs"]]
    for key in ("lidar", "lidar_sidecar", "truth_low", "truth_high"):
        cfg["scene"][key] = os.path.join(d, cfg["scene"][key])
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert main(["rectify", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_STAGE
    assert "stage 'rectify' failed" in capsys.readouterr().err
