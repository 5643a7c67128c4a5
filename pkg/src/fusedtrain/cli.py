"""Command-line front end: train, estimate, equivalence, implicit-batch, profile."""
from __future__ import annotations

import argparse
import json
import os
import sys

from .config import REPORT_DIR_ENV, load_run_config
from .errors import FusedTrainError
from .estimate import (ArchSpec, EstimatePrecision, PRESETS, TrainSetup,
                       estimate, format_estimate)
from .optim import OptimizerKind
from .trainer import run, run_equivalence, run_implicit_batch


def _add_override_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-c", "--config", help="YAML config file")
    parser.add_argument("--model-kind", choices=["mlp", "mini_transformer"])
    parser.add_argument("--layers", type=int)
    parser.add_argument("--hidden", type=int)
    parser.add_argument("--heads", type=int)
    parser.add_argument("--vocab", type=int)
    parser.add_argument("--input-dim", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--task-kind", choices=["regression", "sequence_copy"])
    parser.add_argument("--seq-len", type=int)
    parser.add_argument("--dataset-seed", type=int)
    parser.add_argument("--optimizer", choices=["sgd", "adamw", "lomo"])
    parser.add_argument("--lr", type=float)
    parser.add_argument("--clip-mode",
                        choices=["none", "by_value", "by_global_norm", "by_group_norm"])
    parser.add_argument("--clip-threshold", type=float)
    parser.add_argument("--max-norm", type=float)
    parser.add_argument("--clip-window", type=int)
    parser.add_argument("--scaler", action="store_true", default=None,
                        help="enable the dynamic loss scaler")
    parser.add_argument("--init-scale", type=float)
    parser.add_argument("--growth-interval", type=int)
    parser.add_argument("--precision", choices=["full", "half"])
    parser.add_argument("--checkpointing", action="store_true", default=None)
    parser.add_argument("--batch", type=int)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--lr-schedule", choices=["constant", "linear_decay"])
    parser.add_argument("--warmup-ratio", type=float)
    parser.add_argument("--report-dir")


def _overrides_from_args(args: argparse.Namespace) -> dict:
    report_dir = args.report_dir or os.environ.get(REPORT_DIR_ENV)
    return {
        "model": {
            "kind": args.model_kind, "layers": args.layers, "hidden": args.hidden,
            "heads": args.heads, "vocab": args.vocab, "input_dim": args.input_dim,
            "seed": args.seed,
        },
        "task": {
            "kind": args.task_kind, "seq_len": args.seq_len,
            "input_dim": args.input_dim, "vocab": args.vocab,
            "dataset_seed": args.dataset_seed,
        },
        "optimizer": {"kind": args.optimizer, "lr": args.lr},
        "clip": {
            "mode": args.clip_mode, "threshold": args.clip_threshold,
            "max_norm": args.max_norm, "window": args.clip_window,
        },
        "scaler": {
            "enabled": args.scaler, "init_scale": args.init_scale,
            "growth_interval": args.growth_interval,
        },
        "run": {
            "precision": args.precision, "checkpointing": args.checkpointing,
            "batch": args.batch, "steps": args.steps,
            "lr_schedule": args.lr_schedule, "warmup_ratio": args.warmup_ratio,
            "report_dir": report_dir,
        },
    }


def _load(args: argparse.Namespace):
    return load_run_config(args.config, _overrides_from_args(args))


def _cmd_train(args) -> int:
    config = _load(args)
    report = run(config)
    print(f"steps: {len(report.losses)}")
    print(f"final loss: {report.losses[-1]:.6g}")
    print(f"param digest: {report.param_digest}")
    print(f"report: {report.extras.get('report_path', '-')}")
    return 0


def _cmd_profile(args) -> int:
    config = _load(args)
    report = run(config)
    peak = report.memory["peak_bytes"]
    share = report.memory["peak_share_pct"]
    print(f"{'category':<14} {'peak bytes':>12} {'share %':>8}")
    for name in ("params", "gradients", "optim_states", "activations"):
        print(f"{name:<14} {peak[name]:>12} {share[name]:>8.1f}")
    print(f"report: {report.extras.get('report_path', '-')}")
    return 0


def _cmd_equivalence(args) -> int:
    config = _load(args)
    results = run_equivalence(config)
    print(f"lomo digest: {results['lomo']['digest']}")
    print(f"sgd digest:  {results['sgd']['digest']}")
    print("identical" if results["identical"] else "MISMATCH")
    return 0 if results["identical"] else 1


def _cmd_implicit_batch(args) -> int:
    config = _load(args)
    result = run_implicit_batch(config, args.lr)
    print(f"divergence at lr={result['lr']:g}:   {result['divergence_at_lr']:.3e}")
    print(f"divergence at lr/2:      {result['divergence_at_half_lr']:.3e}")
    print(f"ratio (expect ~4):       {result['ratio']:.3f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(result, fh, sort_keys=True, indent=2)
    return 0


def _cmd_estimate(args) -> int:
    if args.preset is not None:
        arch = PRESETS[args.preset]
    else:
        required = (args.layers, args.hidden, args.heads, args.ffn_hidden, args.vocab)
        if any(v is None for v in required):
            print("estimate: pass --preset or all of --layers --hidden --heads "
                  "--ffn-hidden --vocab", file=sys.stderr)
            return 2
        arch = ArchSpec(layers=args.layers, hidden=args.hidden, heads=args.heads,
                        ffn_hidden=args.ffn_hidden, vocab=args.vocab,
                        tie_embeddings=args.tie_embeddings)
    setup = TrainSetup(
        optimizer=OptimizerKind(args.optimizer),
        precision=EstimatePrecision(args.precision),
        activation_checkpointing=args.ac,
        seq_len=args.seq_len,
        batch=args.batch,
    )
    result = estimate(arch, setup)
    print(format_estimate(arch, setup, result))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(result.to_dict(), fh, sort_keys=True, indent=2)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusedtrain",
        description="Desk-scale fused-update training engine and memory tools",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, help_text in (
        ("train", _cmd_train, "run one training configuration"),
        ("profile", _cmd_profile, "run and print the peak-memory breakdown"),
        ("equivalence", _cmd_equivalence,
         "train fused vs plain SGD on the same seed and compare digests"),
        ("implicit-batch", _cmd_implicit_batch,
         "sequential vs batched two-sample step divergence at lr and lr/2"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_override_flags(p)
        if name == "implicit-batch":
            p.add_argument("--json", help="also write the result as JSON")
        p.set_defaults(fn=fn)

    p = sub.add_parser("estimate", help="closed-form memory table for an architecture")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--ffn-hidden", type=int)
    p.add_argument("--vocab", type=int)
    p.add_argument("--tie-embeddings", action="store_true")
    p.add_argument("--optimizer", choices=["sgd", "adamw", "lomo"], default="adamw")
    p.add_argument("--precision", choices=["mixed16", "full32"], default="mixed16")
    p.add_argument("--ac", action="store_true", help="activation checkpointing")
    p.add_argument("--seq-len", type=int, default=512)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--json", help="also write the estimate as JSON")
    p.set_defaults(fn=_cmd_estimate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (FusedTrainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
