"""Command-line entry point.

Each subcommand runs the pipeline up to its stage, reusing cached
upstream stages.  Exit codes: 0 success, 2 configuration error, 3 stage
failure.
"""
import argparse
import json
import logging
import sys

from .errors import ConfigError, StageError

log = logging.getLogger("satstereo")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

# subcommand -> (last stage, forced matcher)
COMMANDS = {
    "rectify": ("rectify", None),
    "gen-gt": ("gt", None),
    "tile": ("tiles", None),
    "train": ("train", None),
    "infer": ("disparity", "net"),
    "sgm": ("disparity", "sgm"),
    "dsm": ("dsm", None),
    "fuse": ("fuse", None),
    "eval": ("eval", None),
    "run": ("eval", None),
}

# flag -> dotted config key
FLAG_KEYS = {
    "seed": "seed", "jobs": "jobs", "matcher": "matcher", "pairs": "pairs",
    "ground_plane_alt": "scene.ground_plane_alt", "n_points": "rectify.n_points",
    "variant": "gt.variant", "step": "tiles.step", "min_density": "tiles.min_density",
    "tile_shape": "tiles.shape", "train_steps": "train.steps", "batch_size": "train.batch_size",
    "checkpoint": "train.checkpoint", "cell_size": "dsm.cell_size", "bin_width": "dsm.bin_width",
}


def _set_dotted(tree, key, value):
    node = tree
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def overrides_from_args(args):
    """Nested override dict from the explicit flags and ``--set`` pairs."""
    out = {}
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            _set_dotted(out, key, value)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        _set_dotted(out, key, _parse_value(value))
    return out


def _add_common(p):
    p.add_argument("--config", required=True, help="pipeline JSON config")
    p.add_argument("--out", required=True, help="artifact directory")
    p.add_argument("--seed", type=int, help="root seed for all randomness")
    p.add_argument("--jobs", type=int, help="worker threads inside a stage")
    p.add_argument("--matcher", choices=("sgm", "net"))
    p.add_argument("--pairs", type=json.loads, help="'\"all\"' or JSON list of [i, j]")
    p.add_argument("--ground-plane-alt", type=float)
    p.add_argument("--n-points", type=int)
    p.add_argument("--variant", choices=("sparse", "dense"), help="ground truth used for tiles")
    p.add_argument("--step", type=int)
    p.add_argument("--min-density", type=float)
    p.add_argument("--tile-shape", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--train-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--checkpoint", help="load network weights instead of training")
    p.add_argument("--cell-size", type=float)
    p.add_argument("--bin-width", type=float)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, e.g. sgm.p2=60 (value parsed as JSON)")
    p.add_argument("--force", action="append", default=[], metavar="STAGE",
                   help="rerun STAGE even if cached")


def build_parser():
    parser = argparse.ArgumentParser(prog="satstereo", description="Satellite stereo to DSM pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        _add_common(sub.add_parser(name, help=f"run the pipeline through '{COMMANDS[name][0]}'"))
    synth = sub.add_parser("synth", help="write the synthetic two-building demo scene")
    synth.add_argument("--out", required=True)
    synth.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None):
    from .pipeline import PipelineConfig, run_pipeline
    from .synthetic import write_demo_scene

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "synth":
            print(write_demo_scene(args.out, seed=args.seed))
            return EXIT_OK
        until, matcher = COMMANDS[args.command]
        overrides = overrides_from_args(args)
        if matcher:
            overrides["matcher"] = matcher
        cfg = PipelineConfig.load(args.config, overrides)
        out = run_pipeline(cfg, args.out, until=until, force=tuple(args.force), log=log.info)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"{exc}", file=sys.stderr)
        return EXIT_STAGE
    print(out)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
