"""Run configuration: YAML sections, defaults, and flag overrides.

Precedence is flags > environment > file > defaults. The resolved nested
dict is what gets echoed into reports and hashed for report file names.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import ConfigError
from .optim import AdamWConfig, OptimizerKind
from .stabilize import ClipKind, ClipMode, LossScaler
from .tensor import Precision
from .zoo import ModelConfig, ModelKind, SyntheticTask, TaskKind

REPORT_DIR_ENV = "FUSEDTRAIN_REPORT_DIR"

DEFAULTS: dict = {
    "model": {
        "kind": "mlp",
        "layers": 2,
        "hidden": 16,
        "seed": 7,
        "input_dim": 4,
        "vocab": 64,
        "heads": 4,
    },
    "task": {
        "kind": "regression",
        "dataset_seed": 3,
        "input_dim": 4,
        "seq_len": 8,
        "vocab": 64,
    },
    "optimizer": {
        "kind": "lomo",
        "lr": 5.0e-2,
        "adamw": {"beta1": 0.9, "beta2": 0.999, "eps": 1.0e-8, "weight_decay": 0.0},
    },
    "clip": {
        "mode": "none",
        "threshold": 1.0,
        "max_norm": 1.0,
        "window": 1,
    },
    "scaler": {
        "enabled": False,
        "init_scale": 1024.0,
        "growth_interval": 16,
        "min_scale": 1.0,
        "max_scale": float(2**24),
    },
    "run": {
        "precision": "full",
        "checkpointing": False,
        "batch": 4,
        "steps": 100,
        "lr_schedule": "constant",
        "warmup_ratio": 0.0,
        "report_dir": "reports",
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        elif value is not None:
            merged[key] = value
    return merged


def load_config_file(path: str | Path) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping of sections")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return raw


def resolve(file_dict: dict | None = None, overrides: dict | None = None) -> dict:
    resolved = _deep_merge(DEFAULTS, file_dict or {})
    return _deep_merge(resolved, overrides or {})


def _enum(cls, value, field: str):
    try:
        return cls(value)
    except ValueError:
        choices = ", ".join(member.value for member in cls)
        raise ConfigError(f"{field}: {value!r} is not one of {choices}") from None


class ScheduleKind:
    CONSTANT = "constant"
    LINEAR_DECAY = "linear_decay"
    ALL = (CONSTANT, LINEAR_DECAY)


@dataclass(frozen=True)
class RunConfig:
    """Fully validated run description; `raw` is the resolved dict echo."""

    model: ModelConfig
    task: SyntheticTask
    optimizer_kind: OptimizerKind
    lr: float
    adamw: AdamWConfig
    clip: ClipMode
    scaler_enabled: bool
    scaler_init: dict
    precision: Precision
    checkpointing: bool
    batch: int
    steps: int
    lr_schedule: str
    warmup_ratio: float
    report_dir: str
    raw: dict

    def make_scaler(self) -> LossScaler | None:
        if not self.scaler_enabled:
            return None
        return LossScaler(
            scale=self.scaler_init["init_scale"],
            growth_interval=self.scaler_init["growth_interval"],
            min_scale=self.scaler_init["min_scale"],
            max_scale=self.scaler_init["max_scale"],
        )


def parse_config(resolved: dict) -> RunConfig:
    m, t = resolved["model"], resolved["task"]
    model_kind = _enum(ModelKind, m["kind"], "model.kind")
    model = ModelConfig(
        kind=model_kind,
        layers=int(m["layers"]),
        hidden=int(m["hidden"]),
        seed=int(m["seed"]),
        input_dim=int(m["input_dim"]) if model_kind is ModelKind.MLP else None,
        vocab=int(m["vocab"]) if model_kind is ModelKind.MINI_TRANSFORMER else None,
        heads=int(m["heads"]) if model_kind is ModelKind.MINI_TRANSFORMER else None,
    )
    task_kind = _enum(TaskKind, t["kind"], "task.kind")
    task = SyntheticTask(
        kind=task_kind,
        dataset_seed=int(t["dataset_seed"]),
        input_dim=int(t["input_dim"]) if task_kind is TaskKind.REGRESSION else None,
        seq_len=int(t["seq_len"]) if task_kind is TaskKind.SEQUENCE_COPY else None,
        vocab=int(t["vocab"]) if task_kind is TaskKind.SEQUENCE_COPY else None,
    )
    model.validate()
    task.validate()
    if model.kind is ModelKind.MLP and task.kind is not TaskKind.REGRESSION:
        raise ConfigError("mlp pairs with the regression task")
    if model.kind is ModelKind.MINI_TRANSFORMER:
        if task.kind is not TaskKind.SEQUENCE_COPY:
            raise ConfigError("mini_transformer pairs with the sequence_copy task")
        if task.vocab > model.vocab:
            raise ConfigError(
                f"task vocab {task.vocab} exceeds model vocab {model.vocab}"
            )
    if model.kind is ModelKind.MLP and task.input_dim != model.input_dim:
        raise ConfigError(
            f"task input_dim {task.input_dim} != model input_dim {model.input_dim}"
        )

    o = resolved["optimizer"]
    optimizer_kind = _enum(OptimizerKind, o["kind"], "optimizer.kind")
    lr = float(o["lr"])
    if lr <= 0:
        raise ConfigError(f"lr must be positive, got {lr}")
    a = o["adamw"]
    adamw = AdamWConfig(
        beta1=float(a["beta1"]), beta2=float(a["beta2"]),
        eps=float(a["eps"]), weight_decay=float(a["weight_decay"]),
    )
    adamw.validate()

    c = resolved["clip"]
    clip_kind = _enum(ClipKind, c["mode"], "clip.mode")
    if clip_kind is ClipKind.NONE:
        clip = ClipMode.none()
    elif clip_kind is ClipKind.BY_VALUE:
        clip = ClipMode.by_value(float(c["threshold"]))
    elif clip_kind is ClipKind.BY_GLOBAL_NORM:
        clip = ClipMode.by_global_norm(float(c["max_norm"]))
    else:
        clip = ClipMode.by_group_norm(float(c["max_norm"]), int(c["window"]))

    s = resolved["scaler"]
    scaler_enabled = bool(s["enabled"])
    scaler_init = {
        "init_scale": float(s["init_scale"]),
        "growth_interval": int(s["growth_interval"]),
        "min_scale": float(s["min_scale"]),
        "max_scale": float(s["max_scale"]),
    }

    r = resolved["run"]
    precision = Precision.FULL if r["precision"] == "full" else (
        Precision.HALF_EMULATED if r["precision"] in ("half", "half_emulated")
        else None
    )
    if precision is None:
        raise ConfigError(f"run.precision: {r['precision']!r} is not full or half")
    schedule = r["lr_schedule"]
    if schedule not in ScheduleKind.ALL:
        raise ConfigError(f"run.lr_schedule must be one of {ScheduleKind.ALL}")
    steps = int(r["steps"])
    batch = int(r["batch"])
    if steps < 1 or batch < 1:
        raise ConfigError(f"steps and batch must be >= 1: {steps}, {batch}")
    warmup_ratio = float(r["warmup_ratio"])
    if not 0.0 <= warmup_ratio < 1.0:
        raise ConfigError(f"warmup_ratio must lie in [0, 1), got {warmup_ratio}")

    stabilized = clip.kind is not ClipKind.NONE or scaler_enabled
    if stabilized and optimizer_kind is not OptimizerKind.LOMO:
        raise ConfigError(
            "clipping and loss scaling ride the fused backward pass; "
            "select optimizer.kind: lomo to use them"
        )

    return RunConfig(
        model=model, task=task,
        optimizer_kind=optimizer_kind, lr=lr, adamw=adamw,
        clip=clip, scaler_enabled=scaler_enabled, scaler_init=scaler_init,
        precision=precision, checkpointing=bool(r["checkpointing"]),
        batch=batch, steps=steps,
        lr_schedule=schedule, warmup_ratio=warmup_ratio,
        report_dir=str(r["report_dir"]),
        raw=resolved,
    )


def load_run_config(path: str | Path | None = None,
                    overrides: dict | None = None) -> RunConfig:
    file_dict = load_config_file(path) if path is not None else {}
    return parse_config(resolve(file_dict, overrides))
