"""Command line entry point: ``rkhs-slam {run,eval,build-vocab,export-plot}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import cv2

from .config import ConfigError, MODES, RunConfig, load_config
from .evaluation import read_tum
from .loop_closure import orb_descriptors
from .pipeline import run, trajectory_metrics
from .vocabulary import Vocabulary

logger = logging.getLogger("rkhs_slam")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm"}


def _build_parser():
    parser = argparse.ArgumentParser(prog="rkhs-slam", description="Keyframe RGB-D SLAM with kernel inner-product registration.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="track a TUM-layout RGB-D sequence and write trajectory, graph and logs")
    p.add_argument("--config", type=Path, help="TOML run configuration (defaults apply otherwise)")
    p.add_argument("--dataset", help="sequence directory; overrides [dataset] path")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--output", help="output directory")
    p.add_argument("--seed", type=int, help="RANSAC seed")
    p.add_argument("--max-frames", type=int, help="process at most N frames (0 = all)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="ATE / RPE of an estimated trajectory against ground truth")
    p.add_argument("estimate", type=Path)
    p.add_argument("groundtruth", type=Path)
    p.add_argument("--tolerance", type=float, default=0.02, help="timestamp association tolerance (s)")
    p.add_argument("--output", type=Path, help="also write the metrics to this JSON file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("build-vocab", help="train a binary bag-of-words vocabulary from an image directory")
    p.add_argument("images", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--stride", type=int, default=1, help="use every N-th image")
    p.add_argument("--n-features", type=int, default=1000)
    p.add_argument("--branching", type=int, default=10)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("export-plot", help="cumulative ATE table (CSV) over several run directories")
    p.add_argument("runs", type=Path, nargs="+", help="directories holding metrics.json")
    p.add_argument("--output", type=Path, help="CSV path (stdout when omitted)")
    p.set_defaults(func=cmd_export_plot)
    return parser


def _config_for(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {"dataset": {}, "run": {}}
    if args.dataset is not None:
        overrides["dataset"]["path"] = args.dataset
    for key in ("mode", "output", "seed", "max_frames"):
        value = getattr(args, key)
        if value is not None:
            overrides["run"][key] = value
    try:
        return cfg.with_overrides(**overrides)
    except (ConfigError, ValueError, TypeError) as exc:
        raise ConfigError(f"command line: {exc}") from None


def cmd_run(args):
    cfg = _config_for(args)
    if not cfg.dataset.path:
        raise ConfigError("no dataset path: pass --dataset or set [dataset] path")
    result = run(cfg)
    print(f"{len(result.trajectory)} frames, {len(result.keyframe_ids)} keyframes, "
          f"{len(result.accepted_loops)} loop closures -> {cfg.run.output}")
    for key in ("ate_rmse_m", "rpe_trans_m_per_s", "rpe_rot_deg_per_s"):
        if key in result.metrics:
            print(f"{key} {result.metrics[key]:.6f}")
    return 0


def cmd_eval(args):
    metrics = trajectory_metrics(read_tum(args.estimate), read_tum(args.groundtruth), args.tolerance)
    if not metrics:
        raise ValueError(f"{args.estimate} and {args.groundtruth} share too few timestamps to evaluate")
    text = json.dumps(metrics, indent=2, sort_keys=True)
    print(text)
    if args.output:
        args.output.write_text(text + "\n")
    return 0


def cmd_build_vocab(args):
    if not args.images.is_dir():
        raise FileNotFoundError(f"image directory not found: {args.images}")
    if args.stride < 1:
        raise ValueError("--stride must be >= 1")
    paths = sorted(p for p in args.images.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)[::args.stride]
    descriptors = []
    for path in paths:
        img = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
        if img is None:
            raise ValueError(f"cannot decode image: {path}")
        descriptors.append(orb_descriptors(img, args.n_features))
    if not paths:
        raise FileNotFoundError(f"no images in {args.images}")
    vocab = Vocabulary(args.branching, args.depth, args.seed).fit(descriptors)
    vocab.save(args.output)
    print(f"{vocab.n_words_} words from {len(paths)} images -> {args.output}")
    return 0


def cmd_export_plot(args):
    rows = []
    for run_dir in args.runs:
        path = run_dir / "metrics.json"
        if not path.is_file():
            raise FileNotFoundError(f"missing metrics file: {path}")
        try:
            metrics = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{exc.lineno}: {exc.msg}") from None
        if "ate_rmse_m" not in metrics:
            logger.warning("%s has no ATE (no ground truth); skipped", path)
            continue
        rows.append((float(metrics["ate_rmse_m"]), str(run_dir)))
    rows.sort()
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(["rank", "run", "ate_rmse_m", "cumulative_fraction"])
        for rank, (ate, name) in enumerate(rows, 1):
            writer.writerow([rank, name, f"{ate:.9f}", f"{rank / len(rows):.6f}"])
    finally:
        if args.output:
            out.close()
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, OSError, ValueError, RuntimeError) as exc:
        print(f"rkhs-slam: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
