"""Command-line front door.

    scenegrid <command> --config <path> [--seed N] [--out DIR] [...]

Exit codes: 0 success, 1 validation error (bad config/arguments/inputs),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .config import ConfigError, load_experiment_config
from .scene_io import ManifestError, SceneParseError
from . import harness


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="experiment config YAML")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--no-figures", action="store_true",
                        help="skip PNG rendering next to the CSV reports")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenegrid",
        description="3D indoor scene recognition toolkit: synthetic data, sparse "
                    "voxel networks, baselines and ablation sweeps.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    _add_common(p)

    p = sub.add_parser("train", help="train a model (single-task or multi-task)")
    _add_common(p)
    p.add_argument("--variant", choices=("resnet14", "resnet14_multitask", "pointnet"))
    p.add_argument("--no-colour", action="store_true",
                   help="train the XYZ-only configuration")
    p.add_argument("--manifest", help="dataset manifest path")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the val split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")

    p = sub.add_parser("sweep-density", help="train and test per input point count")
    _add_common(p)
    p.add_argument("--counts", type=int, nargs="+")
    p.add_argument("--manifest")

    p = sub.add_parser("sweep-crop", help="evaluate under test-time corner crops")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ratios", type=float, nargs="+")
    p.add_argument("--manifest")

    p = sub.add_parser("ablate-class", help="recall deltas after removing object classes")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")

    p = sub.add_parser("baseline", help="run a geometry-free baseline")
    _add_common(p)
    p.add_argument("--which", required=True,
                   choices=("colour-nn", "rf-oracle", "rf-predicted"))
    p.add_argument("--checkpoint", help="multitask checkpoint for rf-predicted")
    p.add_argument("--manifest")

    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_experiment_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.no_figures:
        cfg = replace(cfg, figures=False)

    if args.command == "gen-data":
        harness.cmd_gen_data(cfg, out=args.out)
    elif args.command == "train":
        harness.cmd_train(cfg, variant=args.variant, no_colour=args.no_colour,
                          manifest=args.manifest, out=args.out)
    elif args.command == "eval":
        harness.cmd_eval(cfg, args.checkpoint, manifest=args.manifest, out=args.out)
    elif args.command == "sweep-density":
        harness.cmd_sweep_density(cfg, counts=args.counts, manifest=args.manifest,
                                  out=args.out)
    elif args.command == "sweep-crop":
        harness.cmd_sweep_crop(cfg, args.checkpoint, ratios=args.ratios,
                               manifest=args.manifest, out=args.out)
    elif args.command == "ablate-class":
        harness.cmd_ablate_class(cfg, args.checkpoint, manifest=args.manifest,
                                 out=args.out)
    elif args.command == "baseline":
        harness.cmd_baseline(cfg, args.which, checkpoint=args.checkpoint,
                             manifest=args.manifest, out=args.out)
    return 0


def main() -> None:
    try:
        sys.exit(run())
    except (ConfigError, ManifestError, SceneParseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(1)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        sys.exit(2)


if __name__ == "__main__":
    main()
