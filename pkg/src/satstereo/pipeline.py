"""Stage orchestration: rectify -> gt -> tile -> train -> match -> dsm -> fuse -> eval.

Every stage writes into one artifact directory and records, in
``manifest.json``, a key hashing its configuration slice and upstream
outputs, the sha256 of every file it wrote and its wall time.  A stage
whose key matches and whose outputs are intact on disk is not rerun, so a
run can be resumed after a failure or after deleting intermediates.
"""
import copy
import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset import StereoTile, canonicalize_pair, normalize_image, read_manifest, tile_scene, write_tiles
from .dsm import GridSpec, PairwiseDsm, PointSet, fuse_dsms, grid_for_points, rasterize_dsm, \
    triangulate_pair, write_dsm, write_points
from .errors import ConfigError, SatStereoError, StageError
from .evaluation import dsm_metrics, eval_report
from .geo.affine import AffineCamera, GeoBox, fit_affine_camera
from .geo.geodesy import GeodeticPoint
from .geo.rpc import read_rpc
from .groundtruth import DenseDisparity, SparseDisparity, build_sparse_disparity, densify_disparity, \
    read_disparity, read_lidar, remove_bleedthrough, write_disparity
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.config import NetworkConfig, TrainConfig
from .nn.network import init_params
from .nn.train import infer_disparity, train
from .rasterio import read_esri_ascii, read_json, read_mask_pgm, read_pfm, read_pgm, write_esri_ascii, \
    write_json, write_mask_pgm, write_pfm
from .rectify import Homography, RectifiedPair, rectify_pair
from .sgm import SgmParams, sgm_disparity

STAGES = ("cameras", "rectify", "gt", "tiles", "train", "disparity", "dsm", "fuse", "eval")
MATCHERS = ("sgm", "net")

DEFAULTS = {
    "seed": 0,
    "jobs": 1,
    "scene": {"id": "scene", "images": [], "rpcs": [], "lidar": None, "lidar_sidecar": None,
              "ground_plane_alt": 0.0, "bbox": None, "truth_low": None, "truth_high": None},
    "pairs": "all",
    "affine": {"grid_size": 5, "tolerance": 0.5},
    "rectify": {"n_points": 64, "margin": 0},
    "gt": {"variant": "sparse", "bleed_radius": 2, "bleed_tolerance": 1.0},
    "tiles": {"shape": [256, 512], "step": 64, "min_density": 0.40, "shift_limit": 10},
    "matcher": "sgm",
    "sgm": {},
    "network": {},
    "train": {"steps": 100, "batch_size": 4, "checkpoint": None, "config": {}},
    "dsm": {"cell_size": 1.0, "bin_width": 0.5, "write_points": False},
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def derive_seed(root, *labels):
    """Stable 32-bit seed for a labelled sub-task of a run."""
    text = json.dumps([int(root)] + [str(l) for l in labels])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _sha256_json(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


@dataclass
class PipelineConfig:
    """Validated pipeline settings; ``raw`` keeps the merged JSON tree."""

    raw: dict
    base_dir: str = "."
    sgm: SgmParams = None
    network: NetworkConfig = None
    train: TrainConfig = None
    pairs: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, data, base_dir=".", check_files=True):
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        raw = _merge(DEFAULTS, data)
        cfg = cls(raw, os.path.abspath(base_dir))
        cfg._validate(check_files)
        return cfg

    @classmethod
    def load(cls, path, overrides=None, check_files=True):
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if overrides:
            data = _merge(data, overrides)
        return cls.from_dict(data, os.path.dirname(os.path.abspath(path)), check_files)

    def path(self, p):
        return p if p is None or os.path.isabs(p) else os.path.join(self.base_dir, p)

    def _validate(self, check_files):
        r = self.raw
        sc = r["scene"]
        if r["matcher"] not in MATCHERS:
            raise ConfigError(f"matcher must be one of {MATCHERS}, got {r['matcher']!r}")
        if len(sc["images"]) < 2 or len(sc["images"]) != len(sc["rpcs"]):
            raise ConfigError("scene needs >= 2 images with one RPC file each")
        if not sc["lidar"] or not sc["lidar_sidecar"]:
            raise ConfigError("scene.lidar and scene.lidar_sidecar are required")
        if not isinstance(sc["bbox"], dict):
            raise ConfigError("scene.bbox must be an object with lat/lon/alt bounds")
        if r["gt"]["variant"] not in ("sparse", "dense"):
            raise ConfigError("gt.variant must be 'sparse' or 'dense'")
        if int(r["jobs"]) < 1:
            raise ConfigError("jobs must be >= 1")
        n = len(sc["images"])
        if r["pairs"] == "all":
            self.pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
        else:
            try:
                self.pairs = [(int(i), int(j)) for i, j in r["pairs"]]
            except (TypeError, ValueError):
                raise ConfigError("pairs must be 'all' or a list of [i, j] index pairs") from None
            if any(i == j or not (0 <= i < n and 0 <= j < n) for i, j in self.pairs):
                raise ConfigError("pair indices must be distinct and refer to scene images")
        try:
            GeoBox(**sc["bbox"])
            self.sgm = SgmParams(**r["sgm"])
            self.network = NetworkConfig.from_dict(r["network"])
            self.train = TrainConfig.from_dict(r["train"]["config"])
        except (TypeError, ValueError, SatStereoError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        if check_files:
            files = list(sc["images"]) + list(sc["rpcs"]) + [sc["lidar"], sc["lidar_sidecar"]]
            files += [p for p in (sc["truth_low"], sc["truth_high"], r["train"]["checkpoint"]) if p]
            missing = [p for p in files if not os.path.exists(self.path(p))]
            if missing:
                raise ConfigError(f"missing input files: {missing}")

    @property
    def seed(self):
        return int(self.raw["seed"])

    @property
    def bbox(self):
        return GeoBox(**self.raw["scene"]["bbox"])

    def to_dict(self):
        return copy.deepcopy(self.raw)


def pair_id(i, j):
    return f"pair_{i}_{j}"


# -- serialisation helpers ------------------------------------------------------

def _camera_to_dict(cam):
    o = cam.local_origin
    return {"matrix": cam.matrix.tolist(), "origin": [o.lat, o.lon, o.alt],
            "max_residual": float(cam.max_residual), "free_axes": list(cam.free_axes)}


def _camera_from_dict(d):
    return AffineCamera(np.array(d["matrix"]), GeodeticPoint(*d["origin"]),
                        d["max_residual"], tuple(d["free_axes"]))


def _load_image(path):
    if path.lower().endswith(".pfm"):
        return read_pfm(path)[0].astype(np.float64)
    return read_pgm(path).astype(np.float64)


class _Run:
    """State shared by the stages of one invocation."""

    def __init__(self, cfg, out_dir, log):
        self.cfg = cfg
        self.out = os.path.abspath(out_dir)
        self.log = log or (lambda msg: None)
        self.manifest_path = os.path.join(self.out, "manifest.json")
        self.manifest = {}
        if os.path.exists(self.manifest_path):
            try:
                self.manifest = read_json(self.manifest_path)
            except (OSError, json.JSONDecodeError):
                self.manifest = {}
        self.manifest.setdefault("stages", {})
        self.manifest["root_seed"] = cfg.seed
        self.manifest["config"] = cfg.to_dict()

    def p(self, *parts):
        return os.path.join(self.out, *parts)

    def rel(self, path):
        return os.path.relpath(path, self.out)

    def map(self, fn, items):
        items = list(items)
        jobs = int(self.cfg.raw["jobs"])
        if jobs <= 1 or len(items) <= 1:
            return [fn(it) for it in items]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))

    def save_manifest(self):
        os.makedirs(self.out, exist_ok=True)
        write_json(self.manifest_path, self.manifest)

    def outputs_of(self, stage):
        return self.manifest["stages"].get(stage, {}).get("outputs", {})


# -- stages ---------------------------------------------------------------------
# Each returns (written file paths, seeds used).

def _stage_cameras(run):
    cfg = run.cfg
    os.makedirs(run.p("cameras"), exist_ok=True)
    tol = cfg.raw["affine"]["tolerance"]
    paths = []
    for k, rpc_path in enumerate(cfg.raw["scene"]["rpcs"]):
        cam = fit_affine_camera(read_rpc(cfg.path(rpc_path)), cfg.bbox,
                                grid_size=cfg.raw["affine"]["grid_size"], tolerance=tol)
        path = run.p("cameras", f"cam_{k}.json")
        write_json(path, _camera_to_dict(cam))
        paths.append(path)
    return paths, {}


def _cameras(run):
    n = len(run.cfg.raw["scene"]["images"])
    return [_camera_from_dict(read_json(run.p("cameras", f"cam_{k}.json"))) for k in range(n)]


def _stage_rectify(run):
    cfg = run.cfg
    cams = _cameras(run)
    sc = cfg.raw["scene"]
    images = {}
    for k in sorted({k for pr in cfg.pairs for k in pr}):
        images[k] = _load_image(cfg.path(sc["images"][k]))
    seeds = {pair_id(i, j): derive_seed(cfg.seed, "rectify", i, j) for i, j in cfg.pairs}

    def work(pr):
        i, j = pr
        return rectify_pair(images[i], images[j], cams[i], cams[j], float(sc["ground_plane_alt"]),
                            cfg.bbox, int(cfg.raw["rectify"]["n_points"]), seeds[pair_id(i, j)],
                            int(cfg.raw["rectify"]["margin"]))

    paths = []
    for (i, j), rp in zip(cfg.pairs, run.map(work, cfg.pairs)):
        d = run.p("rectify", pair_id(i, j))
        os.makedirs(d, exist_ok=True)
        files = {"left": os.path.join(d, "left.pfm"), "right": os.path.join(d, "right.pfm"),
                 "left_mask": os.path.join(d, "left_mask.pgm"),
                 "right_mask": os.path.join(d, "right_mask.pgm"), "pair": os.path.join(d, "pair.json")}
        write_pfm(files["left"], rp.left_img)
        write_pfm(files["right"], rp.right_img)
        write_mask_pgm(files["left_mask"], rp.left_mask)
        write_mask_pgm(files["right_mask"], rp.right_mask)
        write_json(files["pair"], {"cameras": [i, j], "h_left": rp.h_left.h.tolist(),
                                   "h_right": rp.h_right.h.tolist(), "metadata": rp.metadata})
        paths += list(files.values())
    return paths, seeds


def load_pair(run, i, j):
    d = run.p("rectify", pair_id(i, j))
    meta = read_json(os.path.join(d, "pair.json"))
    cams = _cameras(run)
    return RectifiedPair(read_pfm(os.path.join(d, "left.pfm"))[0].astype(np.float64),
                         read_pfm(os.path.join(d, "right.pfm"))[0].astype(np.float64),
                         Homography(np.array(meta["h_left"])), Homography(np.array(meta["h_right"])),
                         read_mask_pgm(os.path.join(d, "left_mask.pgm")),
                         read_mask_pgm(os.path.join(d, "right_mask.pgm")),
                         (cams[i], cams[j]), meta["metadata"])


def _stage_gt(run):
    cfg = run.cfg
    sc = cfg.raw["scene"]
    lidar = read_lidar(cfg.path(sc["lidar"]), cfg.path(sc["lidar_sidecar"]))
    g = cfg.raw["gt"]

    def work(pr):
        pair = load_pair(run, *pr)
        sp = build_sparse_disparity(lidar, pair.cameras[0], pair.cameras[1],
                                    pair.h_left, pair.h_right, pair.shape)
        before = int(sp.valid.sum())
        sp = remove_bleedthrough(sp, tolerance=float(g["bleed_tolerance"]), radius=int(g["bleed_radius"]))
        dense = densify_disparity(sp)
        return sp, dense, before

    paths = []
    for (i, j), (sp, dense, before) in zip(cfg.pairs, run.map(work, cfg.pairs)):
        d = run.p("gt", pair_id(i, j))
        os.makedirs(d, exist_ok=True)
        files = [os.path.join(d, n) for n in ("sparse.pfm", "sparse_mask.pgm", "dense.pfm",
                                              "dense_mask.pgm", "gt.json")]
        write_disparity(sp, files[0], files[1])
        write_disparity(dense, files[2], files[3])
        write_json(files[4], {"sparse_density": sp.density, "dense_density": dense.density,
                              "bleedthrough_removed": before - int(sp.valid.sum())})
        paths += files
    return paths, {}


def load_gt(run, i, j, variant="sparse"):
    d = run.p("gt", pair_id(i, j))
    cls = DenseDisparity if variant == "dense" else SparseDisparity
    return read_disparity(os.path.join(d, f"{variant}.pfm"), os.path.join(d, f"{variant}_mask.pgm"), cls)


def _stage_tiles(run):
    cfg = run.cfg
    t = cfg.raw["tiles"]
    variant = cfg.raw["gt"]["variant"]
    paths = []
    for i, j in cfg.pairs:
        pair = load_pair(run, i, j)
        gt = load_gt(run, i, j, variant)
        tiles = tile_scene(pair, gt, int(t["step"]), float(t["min_density"]), tuple(t["shape"]))
        kept = [c for c in (canonicalize_pair(x, int(t["shift_limit"])) for x in tiles) if c is not None]
        d = run.p("tiles", pair_id(i, j))
        os.makedirs(d, exist_ok=True)
        manifest = write_tiles(kept, d, pair_id(i, j), gt_kind=variant)
        paths.append(manifest)
        for rec in read_manifest(manifest):
            paths += [os.path.join(d, f) for f in rec["files"].values()]
    return paths, {}


def load_tiles(run):
    tiles = []
    for i, j in run.cfg.pairs:
        d = run.p("tiles", pair_id(i, j))
        for rec in read_manifest(os.path.join(d, "manifest.jsonl")):
            f = rec["files"]
            gt = read_disparity(os.path.join(d, f["gt"]), os.path.join(d, f["gt_mask"]))
            tiles.append(StereoTile(normalize_image(read_pfm(os.path.join(d, f["left"]))[0]),
                                    normalize_image(read_pfm(os.path.join(d, f["right"]))[0]),
                                    gt, tuple(rec["offset"]), rec["shift_applied"], rec["flipped"]))
    return tiles


def _stage_train(run):
    cfg = run.cfg
    tr = cfg.raw["train"]
    os.makedirs(run.p("model"), exist_ok=True)
    params_path = run.p("model", "params.ostn")
    log_path = run.p("model", "train_log.jsonl")
    seeds = {"init": derive_seed(cfg.seed, "init"), "batches": derive_seed(cfg.seed, "batches")}
    history = []
    if tr["checkpoint"]:
        params = load_checkpoint(cfg.path(tr["checkpoint"]))
    else:
        tiles = load_tiles(run)
        params = init_params(cfg.network, seeds["init"])
        if tiles and int(tr["steps"]) > 0:
            tcfg = TrainConfig.from_dict(dict(cfg.train.to_dict(), seed=seeds["batches"]))
            params, history = train(tiles, params, tcfg, cfg.network, int(tr["steps"]),
                                    batch_size=tr["batch_size"],
                                    log=lambda r: run.log(f"train step {r['step']}: {r['total']:.4f}"))
    save_checkpoint(params_path, params)
    with open(log_path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    write_json(run.p("model", "network.json"), cfg.network.to_dict())
    return [params_path, log_path, run.p("model", "network.json")], seeds


def _stage_disparity(run):
    cfg = run.cfg
    params = load_checkpoint(run.p("model", "params.ostn")) if cfg.raw["matcher"] == "net" else None

    def work(pr):
        pair = load_pair(run, *pr)
        if params is not None:
            disp, _ = infer_disparity(pair, cfg.network, params)
        else:
            disp = sgm_disparity(pair.left_img, pair.right_img, cfg.sgm)
        valid = disp.valid & pair.left_mask
        return SparseDisparity(np.where(valid, disp.values, 0.0), valid)

    paths = []
    for (i, j), disp in zip(cfg.pairs, run.map(work, cfg.pairs)):
        d = run.p("disparity", pair_id(i, j))
        os.makedirs(d, exist_ok=True)
        files = [os.path.join(d, "disp.pfm"), os.path.join(d, "disp_mask.pgm")]
        write_disparity(disp, *files)
        paths += files
    return paths, {}


def dsm_grid(run):
    cfg = run.cfg
    sc = cfg.raw["scene"]
    lidar = read_lidar(cfg.path(sc["lidar"]), cfg.path(sc["lidar_sidecar"]))
    pts = PointSet(*lidar.to_geodetic())
    return grid_for_points(pts, float(cfg.raw["dsm"]["cell_size"]), lidar.origin.zone,
                           lidar.origin.hemisphere)


def _read_grid(path):
    d = read_json(path)
    return GridSpec(d["east"], d["north"], d["cell_size"], tuple(d["shape"]), d["zone"], d["hemisphere"])


def _stage_dsm(run):
    cfg = run.cfg
    grid = dsm_grid(run)
    os.makedirs(run.p("dsm"), exist_ok=True)
    grid_path = run.p("dsm", "grid.json")
    write_json(grid_path, grid.to_dict())

    def work(pr):
        pair = load_pair(run, *pr)
        d = run.p("disparity", pair_id(*pr))
        disp = read_disparity(os.path.join(d, "disp.pfm"), os.path.join(d, "disp_mask.pgm"))
        pts = triangulate_pair(disp, pair)
        return pts, rasterize_dsm(pts, grid, pair_id(*pr))

    paths = [grid_path]
    for (i, j), (pts, dsm) in zip(cfg.pairs, run.map(work, cfg.pairs)):
        path = run.p("dsm", f"{pair_id(i, j)}.asc")
        write_dsm(dsm, path)
        paths.append(path)
        if cfg.raw["dsm"]["write_points"]:
            ppath = run.p("dsm", f"{pair_id(i, j)}.xyz")
            write_points(pts, ppath, grid.zone, grid.hemisphere)
            paths.append(ppath)
    return paths, {}


def _stage_fuse(run):
    cfg = run.cfg
    grid = _read_grid(run.p("dsm", "grid.json"))
    dsms = []
    for i, j in cfg.pairs:
        elev, _ = read_esri_ascii(run.p("dsm", f"{pair_id(i, j)}.asc"))
        dsms.append(PairwiseDsm(elev, grid, np.isfinite(elev).astype(np.int64), pair_id(i, j)))
    fused = fuse_dsms(dsms, float(cfg.raw["dsm"]["bin_width"]))
    os.makedirs(run.p("fused"), exist_ok=True)
    paths = [run.p("fused", "dsm.asc"), run.p("fused", "support.asc")]
    write_dsm(fused, paths[0])
    g = grid
    write_esri_ascii(paths[1], np.where(fused.support > 0, fused.support, np.nan), g.east,
                     g.north - g.shape[0] * g.cell_size, g.cell_size)
    return paths, {}


def _stage_eval(run):
    cfg = run.cfg
    preds, gts = [], []
    for i, j in cfg.pairs:
        d = run.p("disparity", pair_id(i, j))
        preds.append(read_disparity(os.path.join(d, "disp.pfm"), os.path.join(d, "disp_mask.pgm")))
        gt = load_gt(run, i, j, "sparse")
        # Only pixels the matcher produced can be scored.
        gts.append(SparseDisparity(gt.values, gt.valid & preds[-1].valid))
    report = eval_report(preds, gts)
    sc = cfg.raw["scene"]
    if sc["truth_low"]:
        fused, _ = read_esri_ascii(run.p("fused", "dsm.asc"))
        low, _ = read_esri_ascii(cfg.path(sc["truth_low"]))
        high = read_esri_ascii(cfg.path(sc["truth_high"]))[0] if sc["truth_high"] else low
        if low.shape != fused.shape or high.shape != fused.shape:
            raise ConfigError(f"truth rasters {low.shape} do not match the DSM grid {fused.shape}")
        report.dsm = {"fused": dsm_metrics(fused, low, high)}
        for i, j in cfg.pairs:
            elev, _ = read_esri_ascii(run.p("dsm", f"{pair_id(i, j)}.asc"))
            report.dsm[pair_id(i, j)] = dsm_metrics(elev, low, high)
    os.makedirs(run.p("eval"), exist_ok=True)
    paths = [run.p("eval", "report.json"), run.p("eval", "report.txt")]
    out = report.to_dict()
    out["matcher"] = cfg.raw["matcher"]
    write_json(paths[0], out)
    with open(paths[1], "w") as fh:
        fh.write(report.to_table())
    return paths, {}


_STAGE_FUNCS = {"cameras": _stage_cameras, "rectify": _stage_rectify, "gt": _stage_gt,
                "tiles": _stage_tiles, "train": _stage_train, "disparity": _stage_disparity,
                "dsm": _stage_dsm, "fuse": _stage_fuse, "eval": _stage_eval}


def _stage_config(cfg, name):
    """The configuration slice a stage's output depends on."""
    r = cfg.raw
    sc = r["scene"]
    pairs = [list(p) for p in cfg.pairs]
    table = {
        "cameras": {"bbox": sc["bbox"], "affine": r["affine"]},
        "rectify": {"pairs": pairs, "rectify": r["rectify"], "alt": sc["ground_plane_alt"],
                    "bbox": sc["bbox"], "seed": r["seed"]},
        "gt": {"pairs": pairs, "gt": r["gt"]},
        "tiles": {"pairs": pairs, "tiles": r["tiles"], "variant": r["gt"]["variant"]},
        "train": {"network": cfg.network.to_dict(), "train": cfg.train.to_dict(),
                  "steps": r["train"]["steps"], "batch_size": r["train"]["batch_size"],
                  "seed": r["seed"]},
        "disparity": {"pairs": pairs, "matcher": r["matcher"],
                      "sgm": vars(cfg.sgm) if r["matcher"] == "sgm" else None,
                      "network": cfg.network.to_dict() if r["matcher"] == "net" else None},
        "dsm": {"pairs": pairs, "cell_size": r["dsm"]["cell_size"],
                "write_points": r["dsm"]["write_points"]},
        "fuse": {"pairs": pairs, "bin_width": r["dsm"]["bin_width"]},
        "eval": {"pairs": pairs, "matcher": r["matcher"]},
    }
    return table[name]


def _external_inputs(cfg, name):
    sc = cfg.raw["scene"]
    files = {"cameras": sc["rpcs"], "rectify": sc["images"], "gt": [sc["lidar"], sc["lidar_sidecar"]],
             "train": [cfg.raw["train"]["checkpoint"]] if cfg.raw["train"]["checkpoint"] else [],
             "dsm": [sc["lidar"], sc["lidar_sidecar"]],
             "eval": [p for p in (sc["truth_low"], sc["truth_high"]) if p]}.get(name, [])
    return {p: sha256_file(cfg.path(p)) for p in files}


_UPSTREAM = {"cameras": (), "rectify": ("cameras",), "gt": ("rectify",), "tiles": ("gt",),
             "train": ("tiles",), "disparity": ("rectify", "train"), "dsm": ("disparity",),
             "fuse": ("dsm",), "eval": ("gt", "disparity", "fuse")}


def _intact(run, record):
    for rel, digest in record.get("outputs", {}).items():
        path = run.p(rel)
        if not os.path.exists(path) or sha256_file(path) != digest:
            return False
    return True


def run_pipeline(cfg, out_dir, until="eval", force=(), log=None):
    """Run the stages up to and including ``until``; returns the artifact dir.

    Stages whose recorded key matches and whose outputs are intact are
    reused.  A failing stage raises :class:`StageError` naming it; outputs
    of earlier stages stay on disk and in the manifest.
    """
    if until not in STAGES:
        raise ConfigError(f"unknown stage {until!r}")
    run = _Run(cfg, out_dir, log)
    os.makedirs(run.out, exist_ok=True)
    for name in STAGES[:STAGES.index(until) + 1]:
        upstream = {s: run.manifest["stages"][s]["outputs"] for s in _UPSTREAM[name]}
        inputs = _external_inputs(cfg, name)
        key = _sha256_json({"config": _stage_config(cfg, name), "inputs": inputs,
                            "upstream": upstream})
        record = run.manifest["stages"].get(name)
        if record and record.get("key") == key and name not in force and _intact(run, record):
            record["status"] = "cached"
            run.log(f"{name}: cached")
            continue
        run.log(f"{name}: running")
        t0 = time.perf_counter()
        try:
            paths, seeds = _STAGE_FUNCS[name](run)
        except Exception as exc:
            run.manifest["stages"][name] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
            run.save_manifest()
            if isinstance(exc, ConfigError):
                raise
            raise StageError(name, exc) from exc
        run.manifest["stages"][name] = {
            "status": "ran", "key": key, "inputs": inputs,
            "outputs": {run.rel(p): sha256_file(p) for p in sorted(set(paths))},
            "seeds": seeds, "wall_time": round(time.perf_counter() - t0, 3)}
        # Downstream records are stale once an upstream stage reran.
        for later in STAGES[STAGES.index(name) + 1:]:
            rec = run.manifest["stages"].get(later)
            if rec:
                rec["status"] = "stale"
        run.save_manifest()
    run.save_manifest()
    return run.out
