"""Command-line surface.

Commands: synth, train, odom, eval, attn. Exit codes: 0 success, 2 usage
error, 1 runtime error.
"""

import argparse
import sys
from .config import METHODS, load_config
from .errors import UsageError
from . import runs


def _add_common(parser, out_required=False):
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", required=out_required, help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="eliot",
        description="LiDAR odometry toolkit: transformer pose regression, "
                    "ICP baselines, KITTI-style evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--force", action="store_true",
                   help="allow writing into a non-empty directory")

    p = sub.add_parser("train", help="train a pose network")
    _add_common(p)
    p.add_argument("--data", help="dataset root (from `eliot synth` or KITTI layout)")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--checkpoint", help="resume training from this checkpoint")
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("odom", help="run odometry over a scan sequence")
    _add_common(p)
    p.add_argument("--data", help="dataset root")
    p.add_argument("--sequence", help="sequence id, e.g. 00")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--checkpoint", help="checkpoint for learned methods")
    p.add_argument("--calib", help="calibration file with a Tr line")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("eval", help="compare a predicted pose file to ground truth")
    p.add_argument("gt", help="ground-truth pose file")
    p.add_argument("pred", help="predicted pose file")
    p.add_argument("--calib", help="calibration file; conjugates predictions by Tr")
    _add_common(p)

    p = sub.add_parser("attn", help="dump decoder cross-attention for one pair")
    _add_common(p)
    p.add_argument("--data", help="dataset root")
    p.add_argument("--sequence", help="sequence id")
    p.add_argument("--checkpoint", help="trained checkpoint", required=False)
    p.add_argument("--pair", type=int, default=0, help="pair index to inspect")

    return parser


def _config_from_args(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["out"] = args.out
    if getattr(args, "method", None):
        overrides["method"] = args.method
    if getattr(args, "data", None):
        overrides["data.root"] = args.data
    if getattr(args, "sequence", None):
        overrides["data.sequence"] = args.sequence
    return load_config(getattr(args, "config", None), overrides)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        cfg = _config_from_args(args)
        if args.command == "synth":
            runs.synth_run(cfg, force=args.force)
        elif args.command == "train":
            runs.train_run(cfg, resume_from=args.checkpoint,
                           dtype_name=args.dtype)
        elif args.command == "odom":
            runs.odom_run(cfg, checkpoint=args.checkpoint,
                          calib_path=args.calib)
        elif args.command == "eval":
            runs.eval_run(cfg, args.gt, args.pred, calib_path=args.calib)
        elif args.command == "attn":
            runs.attn_run(cfg, checkpoint=args.checkpoint, pair_index=args.pair)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
