"""Training loop, equivalence runner, and the sequential-vs-batched probe."""
from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from .config import RunConfig, ScheduleKind
from .errors import ConfigError
from .ledger import MemoryLedger
from .optim import LOMO, SGD, AdamW, OptimizerKind, sgd_step
from .report import RunReport, config_hash, emit_report, next_free_path
from .stabilize import ClipKind, Stabilizer, StepOutcome
from .tensor import Tensor
from .zoo import Model, build_model, sample_batch
from pathlib import Path


def lr_at(base: float, step: int, total: int, schedule: str,
          warmup_ratio: float = 0.0) -> float:
    """Constant, or linear warmup over ``warmup_ratio`` then linear decay."""
    if schedule == ScheduleKind.CONSTANT:
        return base
    warm = int(round(warmup_ratio * total))
    if step < warm:
        return base * (step + 1) / warm
    return base * (total - step) / (total - warm)


def _build_optimizer(config: RunConfig, model: Model, ledger: MemoryLedger):
    if config.optimizer_kind is OptimizerKind.SGD:
        return SGD(model, ledger)
    if config.optimizer_kind is OptimizerKind.ADAMW:
        return AdamW(model, config.adamw, ledger)
    stabilizer = None
    if config.clip.kind is not ClipKind.NONE or config.scaler_enabled:
        stabilizer = Stabilizer(config.clip, config.make_scaler())
    return LOMO(model, stabilizer, ledger)


def run(config: RunConfig, *, emit: bool = True) -> RunReport:
    """Execute one training run and (optionally) write its report files."""
    ledger = MemoryLedger()
    model = build_model(
        config.model,
        precision=config.precision,
        checkpointing=config.checkpointing,
        ledger=ledger,
    )
    optimizer = _build_optimizer(config, model, ledger)
    stabilizer = getattr(optimizer, "stabilizer", None)
    passes = stabilizer.backward_passes_per_step if stabilizer is not None else 1

    losses: list[float] = []
    step_seconds: list[float] = []
    scaler_events: list[dict] = []
    for step in range(config.steps):
        lr = lr_at(config.lr, step, config.steps, config.lr_schedule,
                   config.warmup_ratio)
        batch = sample_batch(config.task, config.batch, step)
        started = time.perf_counter()
        loss = optimizer.step(batch, lr)
        step_seconds.append(time.perf_counter() - started)
        losses.append(loss)
        outcome = getattr(optimizer, "last_outcome", None)
        if outcome is not None:
            event = {"step": step, "outcome": outcome.value}
            if stabilizer is not None and stabilizer.scaler is not None:
                event["scale"] = stabilizer.scaler.scale
            scaler_events.append(event)

    report = RunReport(
        config=config.raw,
        losses=losses,
        param_digest=model.digest(),
        memory=ledger.snapshot().to_dict(),
        scaler_events=scaler_events,
        step_seconds=step_seconds,
        backward_passes_per_step=passes,
    )
    if emit:
        path = next_free_path(Path(config.report_dir), config_hash(config.raw))
        emit_report(report, path)
        report.extras["report_path"] = str(path)
    return report


def run_equivalence(config: RunConfig) -> dict:
    """Train the fused and plain-SGD rules on identical seeds; compare digests."""
    if config.clip.kind is not ClipKind.NONE or config.scaler_enabled:
        raise ConfigError(
            "equivalence compares the unstabilized update rules; disable "
            "clipping and the loss scaler"
        )
    results = {}
    for kind in (OptimizerKind.LOMO, OptimizerKind.SGD):
        raw = {
            **config.raw,
            "optimizer": {**config.raw["optimizer"], "kind": kind.value},
        }
        variant = replace(config, optimizer_kind=kind, raw=raw)
        report = run(variant, emit=False)
        results[kind.value] = {
            "digest": report.param_digest,
            "final_loss": report.losses[-1],
        }
    results["identical"] = (
        results["lomo"]["digest"] == results["sgd"]["digest"]
    )
    return results


def implicit_batch_divergence(model: Model, sample_i, sample_j, lr: float) -> float:
    """|| two sequential one-sample steps - one batched two-sample step ||_2.

    The batched loss sums per-sample losses, so its single step applies
    the summed gradient; the sequential path takes the second step at the
    already-moved parameters. The gap is the second-order residual and
    shrinks as lr^2.
    """
    x_i, t_i = sample_i
    x_j, t_j = sample_j
    start = model.param_state()

    batched = (
        Tensor(np.concatenate([x_i.data, x_j.data], axis=0)),
        np.concatenate([t_i, t_j], axis=0),
    )
    sgd_step(model, batched, lr)
    theta_batched = model.param_state()
    model.set_param_state(start)

    sgd_step(model, (x_i, t_i), lr)
    sgd_step(model, (x_j, t_j), lr)
    theta_sequential = model.param_state()
    model.set_param_state(start)

    gap = np.concatenate([
        (a - b).ravel() for a, b in zip(theta_sequential, theta_batched)
    ])
    return float(np.linalg.norm(gap))


def run_implicit_batch(config: RunConfig, lr: float | None = None) -> dict:
    """Divergence at lr and lr/2 for two samples of the configured task."""
    base_lr = config.lr if lr is None else lr
    model = build_model(config.model)
    x, t = sample_batch(config.task, 2, step=0)
    sample_i = (Tensor(x.data[:1]), t[:1])
    sample_j = (Tensor(x.data[1:]), t[1:])
    at_lr = implicit_batch_divergence(model, sample_i, sample_j, base_lr)
    at_half = implicit_batch_divergence(model, sample_i, sample_j, base_lr / 2.0)
    return {
        "lr": base_lr,
        "divergence_at_lr": at_lr,
        "divergence_at_half_lr": at_half,
        "ratio": at_lr / at_half if at_half else float("inf"),
    }
