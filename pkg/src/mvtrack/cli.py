"""Command-line entry point: simulate, train, track, eval, gradcheck.

Exit codes: 0 success, 1 invalid input (bad arguments, configs or files),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import io as mio
from .checkpoint import load_checkpoint
from .errors import ConfigInvalid, FormatError, ValidationError
from .gradcheck import gradcheck_all
from .inference import TrackerParams, oracle_track, track_sequence
from .metrics import evaluate
from .model import MVTrackModel
from .simulator import SceneConfig, simulate_sequence
from .trainer import TrainConfig, config_path, train_run

log = logging.getLogger("mvtrack")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
THREADS_ENV = "MVTRACK_THREADS"


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _apply_thread_cap():
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigInvalid(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    torch.set_num_threads(n)


def _load_config(path, cls):
    return cls.from_dict(mio.load_json(path)) if path else cls()


def cmd_simulate(args) -> int:
    config = _load_config(args.config, SceneConfig)
    seq = simulate_sequence(config)
    mio.write_dataset(seq, args.out)
    print(f"wrote {len(seq)} frames x {seq.num_cameras} cameras to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args.config, TrainConfig)
    config.checkpoint_path = args.out
    if args.log:
        config.log_path = args.log
    elif config.log_path is None:
        config.log_path = str(args.out) + ".loss.csv"
    if args.epochs is not None:
        config = TrainConfig.from_dict({**config.to_dict(), "epochs": args.epochs})
    result = train_run(args.data, config, resume=args.resume)
    means = result.epoch_means(max(1, len(result.losses) // config.epochs))
    print(f"trained {config.epochs} epochs; mean total loss first {means[0]:.4f} last {means[-1]:.4f}")
    print(f"checkpoint {args.out}, loss log {config.log_path}")
    return EXIT_OK


def load_model(ckpt, seq) -> MVTrackModel:
    """Rebuild the model described by the config saved next to ``ckpt`` and load its weights."""
    cfg_file = config_path(ckpt)
    if not cfg_file.exists():
        raise FormatError("checkpoint config not found (expected next to the checkpoint)", cfg_file)
    config = TrainConfig.from_dict(mio.load_json(cfg_file))
    model = MVTrackModel(config.model).set_scene(seq.calibs, seq.grid)
    load_checkpoint(model, ckpt)
    return model


def cmd_track(args) -> int:
    seq = mio.load_dataset(args.data)
    params = TrackerParams(args.threshold, args.gate, args.max_misses)
    if args.oracle:
        rows = oracle_track(seq, params=params)
    else:
        if not args.ckpt:
            raise UsageError("track: --ckpt is required unless --oracle is given")
        rows = track_sequence(load_model(args.ckpt, seq), seq, params)
    mio.write_trajectories(args.out, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    gt = mio.read_ground_truth(args.gt)
    pred = mio.read_trajectories(args.pred)
    result = evaluate(gt, pred, r=args.r)
    print(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck_all(args.seed)
    print("\n".join(report.lines()))
    if args.json:
        Path(args.json).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return EXIT_OK if report.passed else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="mvtrack", description="Multi-view ground-plane tracking toolkit", formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="render a synthetic multi-camera dataset", formatter_class=fmt)
    p.add_argument("--config", help="scene JSON; omitted keys take SceneConfig defaults")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a model on a dataset directory", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="train JSON (epochs, lr, optimizer, seed, model, interaction, supervision)")
    p.add_argument("--out", required=True, help="checkpoint path; config and optimizer state are saved alongside")
    p.add_argument("--log", help="per-step loss CSV (default: <out>.loss.csv)")
    p.add_argument("--epochs", type=int, help="override the configured epoch count")
    p.add_argument("--resume", action="store_true", help="continue from the state saved next to --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="run frame-by-frame tracking", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", help="checkpoint written by train")
    p.add_argument("--oracle", action="store_true", help="use ground-truth heatmaps and offsets instead of a model")
    p.add_argument("--out", required=True, help="output trajectory CSV")
    p.add_argument("--threshold", type=float, default=0.4, help="heatmap peak threshold")
    p.add_argument("--gate", type=float, default=1.0, help="association gate in meters")
    p.add_argument("--max-misses", type=int, default=1, help="frames a track may coast unmatched")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score predicted trajectories", formatter_class=fmt)
    p.add_argument("--gt", required=True, help="ground truth: trajectory CSV or annotations.csv")
    p.add_argument("--pred", required=True, help="predicted trajectory CSV")
    p.add_argument("--r", type=float, default=2.0, help="match radius in meters")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every kernel and loss", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="also write the report as JSON")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _apply_thread_cap()
        return args.func(args)
    except (ValidationError, ValueError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
