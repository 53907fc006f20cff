"""
BALISTD command line: synth, train, eval, corrupt, report
"""
import argparse
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from PIL import Image

from checkpoint import CHECKPOINT_NAME, load_checkpoint
from config import ARCHITECTURES, TRAIN_MODES, ConfigManager
from corruptions import ACTION_SPACE, CorruptionAction, apply, default_table, parse_kind, parse_severity
from datasets import load_manifest, load_samples, read_gray, synth_generate, write_dataset
from errors import BalistdError, ConfigError, DatasetError
from logger import app_logger
from report import compare_runs, write_clean_report, write_robustness_report
from trainer import LOG_NAME, evaluate_robustness, restore_state, train

ABLATIONS = ("random", "noise", "blur", "isp")


class CliParser(argparse.ArgumentParser):
    """argparse with machine-parsable ``error:`` lines and exit code 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(1)


def _out_dir(args, manager: ConfigManager) -> Path:
    return Path(args.out or manager.config.output.out_dir)


def cmd_synth(args) -> int:
    manager = ConfigManager(args.config)
    cfg = manager.config.synth
    if cfg.count == 0:
        raise ConfigError("synth.count is 0; nothing to write")
    out = _out_dir(args, manager)
    samples = synth_generate(cfg)
    app_logger.attach_run_dir(out)
    content_hash = write_dataset(samples, out, cfg.test_fraction)
    manager.write_resolved(out, default_table().with_overrides(manager.config.corruption).to_dict())
    print(content_hash)
    return 0


def cmd_train(args) -> int:
    manager = ConfigManager(args.config)
    overrides = dict(mode=args.mode, steps=args.steps, seed=args.seed, workers=args.workers, arch=args.arch)
    if args.ablation == "random":
        if args.mode == "adversarial":
            raise ConfigError("--ablation random trains with uniform corruptions and conflicts with --mode adversarial")
        overrides.update(mode="joint", action_subset="all")
    elif args.ablation is not None:
        overrides.update(action_subset=args.ablation)
    manager.override_train(**overrides)
    cfg = manager.config.train
    table = default_table().with_overrides(manager.config.corruption)

    if args.data is None:
        raise DatasetError("no dataset given; pass --data DIR")
    manifest = load_manifest(args.data)
    out = _out_dir(args, manager)
    app_logger.attach_run_dir(out)
    app_logger.info("configuration resolved", **manager.get_status())
    manager.write_resolved(out, table.to_dict())

    samples = load_samples(manifest, "train")
    val_samples = load_samples(manifest, "test") or None
    train(cfg, samples, val_samples=val_samples, out_dir=out, table=table)
    print(out / CHECKPOINT_NAME)
    print(out / LOG_NAME)
    return 0


def cmd_eval(args) -> int:
    manager = ConfigManager(args.config)
    if args.workers < 1:
        raise ConfigError(f"--workers must be >= 1, got {args.workers}")
    torch.set_num_threads(args.workers)
    loaded = load_checkpoint(args.checkpoint)
    state = restore_state(loaded)
    manifest = load_manifest(args.data)
    samples = load_samples(manifest, args.split)
    if not samples:
        raise DatasetError(f"split '{args.split}' of {manifest.root} is empty")

    out = _out_dir(args, manager)
    app_logger.attach_run_dir(out)
    manager.write_resolved(out, loaded.table.to_dict())
    seed = args.seed if args.seed is not None else manager.config.train.seed
    report = evaluate_robustness(
        state.detector, samples,
        grid=() if args.clean_only else ACTION_SPACE,
        table=loaded.table,
        match=manager.config.match,
        seed=seed,
        workers=args.workers,
        dataset=manifest.root.name,
        arch=loaded.arch,
    )
    method = args.method or Path(args.checkpoint).parent.name or "model"
    paths = write_clean_report(report, out, method)
    if not args.clean_only:
        paths.update(write_robustness_report(report, out, method))
    for path in paths.values():
        print(path)
    return 0


def cmd_corrupt(args) -> int:
    action = CorruptionAction(parse_kind(args.kind), parse_severity(args.severity))
    image = read_gray(Path(args.image)).astype(np.float32) / 255.0
    corrupted = apply(image, action, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(corrupted * 255.0).astype(np.uint8)).save(out)
    print(out)
    return 0


def cmd_report(args) -> int:
    manager = ConfigManager(args.config)
    out = Path(args.out)
    app_logger.attach_run_dir(out)
    manager.write_resolved(out, default_table().with_overrides(manager.config.corruption).to_dict())
    frame = compare_runs(args.runs, out)
    print(frame.to_markdown(index=False, floatfmt=".2f"))
    return 0


def build_parser() -> CliParser:
    parser = CliParser(prog="balistd", description="Bi-level adversarial training lab for infrared small-target detection")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic dataset")
    synth.add_argument("--config", help="TOML run configuration")
    synth.add_argument("--out", help="dataset directory")
    synth.set_defaults(func=cmd_synth)

    tr = sub.add_parser("train", help="train detector and strategy network")
    tr.add_argument("--config", help="TOML run configuration")
    tr.add_argument("--data", help="dataset directory")
    tr.add_argument("--out", help="run directory")
    tr.add_argument("--mode", choices=TRAIN_MODES)
    tr.add_argument("--steps", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--ablation", choices=ABLATIONS)
    tr.add_argument("--workers", type=int)
    tr.add_argument("--arch", choices=ARCHITECTURES)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on clean and corrupted data")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--config", help="TOML run configuration (match and output settings)")
    ev.add_argument("--out", help="report directory")
    ev.add_argument("--split", choices=("train", "test"), default="test")
    ev.add_argument("--clean-only", action="store_true")
    ev.add_argument("--seed", type=int)
    ev.add_argument("--workers", type=int, default=1)
    ev.add_argument("--method", help="row label in the report tables")
    ev.set_defaults(func=cmd_eval)

    co = sub.add_parser("corrupt", help="apply one corruption to one image")
    co.add_argument("image")
    co.add_argument("kind")
    co.add_argument("severity")
    co.add_argument("out")
    co.add_argument("--seed", type=int, default=0)
    co.set_defaults(func=cmd_corrupt)

    rp = sub.add_parser("report", help="compare several eval outputs")
    rp.add_argument("--runs", nargs="+", required=True)
    rp.add_argument("--config", help="TOML run configuration recorded with the report")
    rp.add_argument("--out", default="runs/report")
    rp.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    try:
        return args.func(args)
    except BalistdError as e:
        app_logger.log_error(e, args.command)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        app_logger.log_error(e, args.command)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    finally:
        app_logger.log_performance(args.command, time.perf_counter() - started)
        app_logger.detach_run_dir()


if __name__ == "__main__":
    sys.exit(main())
