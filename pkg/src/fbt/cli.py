"""Command-line front end.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 dataset error, 4 checkpoint error, 5 numeric failure, 6 geometry error.
Failures print one machine-parsable line: ``error: <CODE>: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, parse_config, save_config
from .data import DataError
from .engine import (
    DivergenceError,
    run_ablation_suite,
    run_distillation,
    run_fusion_sweep,
    evaluate_model,
    train_teacher,
    write_metrics_csv,
)
from .models import build_model
from .tensor import NumericsError, ShapeError

EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_NUMERIC = 5
EXIT_GEOMETRY = 6

_ERROR_CODES = (
    (ConfigError, "CONFIG", EXIT_CONFIG),
    (DataError, "DATA", EXIT_DATA),
    (CheckpointError, "CHECKPOINT", EXIT_CHECKPOINT),
    (DivergenceError, "NUMERIC", EXIT_NUMERIC),
    (NumericsError, "NUMERIC", EXIT_NUMERIC),
    (ShapeError, "GEOMETRY", EXIT_GEOMETRY),
)


def _fail(code_name: str, exit_code: int, message: str) -> int:
    print(f"error: {code_name}: {message}", file=sys.stderr)
    return exit_code


def _parse_seeds(raw: str) -> tuple:
    try:
        return tuple(int(s) for s in raw.split(","))
    except ValueError as err:
        raise ConfigError(f"bad --seeds value {raw!r}: {err}") from err


def cmd_gradcheck(args) -> int:
    from .verify import run_gradient_suite

    # Verification always runs in float64; --double states that explicitly.
    reports, ok = run_gradient_suite(trials=args.trials, tolerance=args.tolerance,
                                     progress=print)
    print("gradient suite:", "PASS" if ok else "FAIL")
    return 0 if ok else EXIT_CHECK_FAILED


def cmd_train_teacher(args) -> int:
    cfg = parse_config(args.config)
    data = cfg.dataset()
    model_cfg = cfg.model_config(args.role)
    train_cfg = cfg.train_config()
    if args.epochs:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    out = args.out or (cfg.get("teacher", "checkpoint") if args.role == "teacher" else f"{args.role}.ckpt")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    _, acc = train_teacher(model_cfg, data, train_cfg, checkpoint_path=out, log=print)
    print(f"checkpoint: {out}")
    print(f"test_top1: {acc:.4f}")
    return 0


def cmd_distill(args) -> int:
    cfg = parse_config(args.config)
    run_cfg = cfg.run_config()
    if args.seed is not None:
        run_cfg = replace(run_cfg, train=replace(run_cfg.train, seed=args.seed))
    data = cfg.dataset()
    out_dir = Path(args.out_dir or f"run_seed{run_cfg.train.seed}")
    out_dir.mkdir(parents=True, exist_ok=True)
    art = run_distillation(run_cfg, data, log=print)
    write_metrics_csv(out_dir / "metrics.csv", art.records,
                      with_time=run_cfg.train.record_wall_time)
    save_checkpoint(art.student, out_dir / "student.ckpt")
    save_checkpoint(art.fusion.l2g, out_dir / "l2g.ckpt")
    save_checkpoint(art.heads, out_dir / "transfer.ckpt")
    save_config(cfg, out_dir / "config.used")
    last = art.records[-1]
    print(f"metrics: {out_dir / 'metrics.csv'}")
    print(f"final: student {last.acc_student:.4f} fused {last.acc_fused:.4f} "
          f"teacher {last.acc_teacher:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = parse_config(args.config)
    data = cfg.dataset()
    seeds = _parse_seeds(args.seeds)
    rows = run_ablation_suite(cfg.run_config(), data, seeds=seeds, log=print)
    out = args.out or "ablation.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        seed_cols = [f"acc_student_seed{s}" for s in seeds] + [f"acc_fused_seed{s}" for s in seeds]
        writer.writerow(["variant", "acc_student_mean", "acc_fused_mean", *seed_cols])
        for row in rows:
            writer.writerow([row["variant"], f"{row['acc_student_mean']:.6g}",
                             f"{row['acc_fused_mean']:.6g}",
                             *[f"{a:.6g}" for a in row["acc_student"]],
                             *[f"{a:.6g}" for a in row["acc_fused"]]])
    print(f"ablation table: {out}")
    return 0


def cmd_sweep_fusion(args) -> int:
    cfg = parse_config(args.config)
    data = cfg.dataset()
    seeds = _parse_seeds(args.seeds)
    rows = run_fusion_sweep(cfg.run_config(), data, seeds=seeds, log=print)
    out = args.out or "fusion_sweep.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "j", "label", "acc_student_mean", "acc_fused_mean"])
        for row in rows:
            writer.writerow([row["k"], "fc" if row["j"] == 5 else row["j"], row["label"],
                             f"{row['acc_student_mean']:.6g}", f"{row['acc_fused_mean']:.6g}"])
    print(f"fusion sweep table: {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = parse_config(args.data)
    data = cfg.dataset()
    model = build_model(cfg.model_config(args.role), seed=0)
    load_checkpoint(model, args.checkpoint)
    acc = evaluate_model(model, data)
    print(f"test_top1: {acc:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fbt",
                                     description="Cross-architecture distillation harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="run the gradient-oracle suite")
    p.add_argument("--double", action="store_true",
                   help="run in float64 (always on; checks are meaningless in float32)")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("train-teacher", help="train a model from scratch and checkpoint it")
    p.add_argument("--config", required=True)
    p.add_argument("--role", choices=("teacher", "student"), default="teacher",
                   help="which model section of the config to train")
    p.add_argument("--epochs", type=int, default=0, help="override [train] epochs")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="", help="checkpoint path override")
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("distill", help="run the full transfer training")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default="")
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("ablate", help="run the ablation variant suite")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", default="")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("sweep-fusion", help="train every fusion cut-point cell")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", default="")
    p.set_defaults(fn=cmd_sweep_fusion)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="config file providing the [data] section")
    p.add_argument("--role", choices=("teacher", "student"), default="teacher",
                   help="model section describing the checkpointed architecture")
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except tuple(cls for cls, _, _ in _ERROR_CODES) as err:
        for cls, code_name, exit_code in _ERROR_CODES:
            if isinstance(err, cls):
                return _fail(code_name, exit_code, str(err))
        raise


if __name__ == "__main__":
    sys.exit(main())
