"""Gradient clipping alternatives and dynamic loss scaling for fused updates.

The fused update discards each gradient immediately, so a global gradient
norm cannot be known while updating. Three remedies are provided:

* value clipping: clamp each gradient elementwise inside the hook; stays
  a single backward pass but can change the gradient direction (clipping
  [1.3, 0.8] at 1.0 yields [1.0, 0.8], a different direction). Works well
  for small and medium learning rates; prefer it below lr ~1e-3.
* two-pass norm clipping: a first forward+backward accumulates the global
  norm without touching parameters, a second applies the scaled fused
  update. Exact, at twice the per-step compute.
* grouped norm clipping: one pass, clipping each window of adjacent
  layers by its own norm. Biased: groups receive different scale factors,
  effectively a per-group learning rate.

The dynamic loss scaler rides the same two-pass protocol: pass one
detects non-finite gradients; on overflow the step is dropped and the
scale halves, otherwise pass two applies updates with unscaled gradients
and the scale doubles after ``growth_interval`` consecutive clean steps.
When norm clipping and scaling are both active they share the two passes,
so the worst case is two backward passes, never three.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, ScaleUnderflowError
from .optim import _forward_loss, _require_finite, apply_update
from .tape import Disposition, Parameter
from .tensor import Tensor


class ClipKind(Enum):
    NONE = "none"
    BY_VALUE = "by_value"
    BY_GLOBAL_NORM = "by_global_norm"
    BY_GROUP_NORM = "by_group_norm"


@dataclass(frozen=True)
class ClipMode:
    kind: ClipKind = ClipKind.NONE
    threshold: float | None = None
    max_norm: float | None = None
    window: int | None = None

    @staticmethod
    def none() -> "ClipMode":
        return ClipMode()

    @staticmethod
    def by_value(threshold: float) -> "ClipMode":
        if threshold <= 0:
            raise ConfigError(f"clip threshold must be positive, got {threshold}")
        return ClipMode(ClipKind.BY_VALUE, threshold=threshold)

    @staticmethod
    def by_global_norm(max_norm: float) -> "ClipMode":
        if max_norm <= 0:
            raise ConfigError(f"max_norm must be positive, got {max_norm}")
        return ClipMode(ClipKind.BY_GLOBAL_NORM, max_norm=max_norm)

    @staticmethod
    def by_group_norm(max_norm: float, window: int) -> "ClipMode":
        if max_norm <= 0:
            raise ConfigError(f"max_norm must be positive, got {max_norm}")
        if window < 1:
            raise ConfigError(f"group window must be >= 1, got {window}")
        return ClipMode(ClipKind.BY_GROUP_NORM, max_norm=max_norm, window=window)


class StepOutcome(Enum):
    APPLIED = "applied"
    SKIPPED_OVERFLOW = "skipped_overflow"


def clip_by_value(grad: Tensor, threshold: float) -> Tensor:
    """Clamp every element to [-threshold, +threshold]."""
    if threshold <= 0:
        raise ConfigError(f"clip threshold must be positive, got {threshold}")
    return Tensor(np.clip(grad.data, -threshold, threshold), grad.precision)


def _is_power_of_two(x: float) -> bool:
    mantissa, _ = math.frexp(x)
    return x > 0 and mantissa == 0.5


class LossScaler:
    """Dynamic loss-scale state machine; the scale is always a power of two."""

    def __init__(self, scale: float = 2.0**10, growth_interval: int = 16,
                 min_scale: float = 1.0, max_scale: float = 2.0**24):
        for name, value in (("scale", scale), ("min_scale", min_scale),
                            ("max_scale", max_scale)):
            if not _is_power_of_two(value):
                raise ConfigError(f"{name} must be a positive power of two, got {value}")
        if not (min_scale <= scale <= max_scale):
            raise ConfigError(
                f"scale {scale} outside [{min_scale}, {max_scale}]"
            )
        if growth_interval < 1:
            raise ConfigError(f"growth_interval must be >= 1, got {growth_interval}")
        self.scale = float(scale)
        self.growth_interval = growth_interval
        self.min_scale = float(min_scale)
        self.max_scale = float(max_scale)
        self.clean_steps = 0

    def on_overflow(self) -> None:
        if self.scale / 2.0 < self.min_scale:
            raise ScaleUnderflowError(
                f"loss scale would fall below {self.min_scale}; training diverged"
            )
        self.scale /= 2.0
        self.clean_steps = 0

    def on_clean(self) -> None:
        self.clean_steps += 1
        if self.clean_steps >= self.growth_interval:
            self.scale = min(self.scale * 2.0, self.max_scale)
            self.clean_steps = 0


class Stabilizer:
    """Bundles a clip mode and an optional scaler; owns the step protocol."""

    def __init__(self, clip: ClipMode = ClipMode.none(),
                 scaler: LossScaler | None = None):
        if scaler is not None and clip.kind is ClipKind.BY_GROUP_NORM:
            raise ConfigError(
                "grouped clipping is the single-pass alternative and does not "
                "combine with the loss scaler; use by_global_norm instead"
            )
        self.clip = clip
        self.scaler = scaler

    @property
    def backward_passes_per_step(self) -> int:
        two = self.scaler is not None or self.clip.kind is ClipKind.BY_GLOBAL_NORM
        return 2 if two else 1

    def run_step(self, model, batch, lr: float) -> tuple[float, StepOutcome]:
        if self.backward_passes_per_step == 2:
            return self._two_pass_step(model, batch, lr)
        if self.clip.kind is ClipKind.BY_GROUP_NORM:
            return self._grouped_step(model, batch, lr)
        return self._single_pass_step(model, batch, lr)

    def _skip(self, loss: float) -> tuple[float, StepOutcome]:
        """Overflow detected during pass one: drop the step untouched."""
        if self.scaler is not None:
            self.scaler.on_overflow()
        return loss, StepOutcome.SKIPPED_OVERFLOW

    # --- single fused pass (no clip, or clip by value) -------------------

    def _single_pass_step(self, model, batch, lr: float) -> tuple[float, StepOutcome]:
        loss, dout = _forward_loss(model, batch)
        _require_finite(loss)
        threshold = self.clip.threshold

        def hook(param: Parameter, grad: Tensor) -> Disposition:
            g = grad.data
            if threshold is not None:
                g = np.clip(g, -threshold, threshold)
            apply_update(param, g, lr)
            return Disposition.CONSUME

        model.tape.backward(Tensor(dout), hook)
        return loss, StepOutcome.APPLIED

    # --- two passes: norm accumulation / overflow check, then update -----

    def _two_pass_step(self, model, batch, lr: float) -> tuple[float, StepOutcome]:
        scale = self.scaler.scale if self.scaler is not None else 1.0
        norm_clip = self.clip.kind is ClipKind.BY_GLOBAL_NORM

        # An overflowed half-emulated forward makes the loss itself
        # non-finite; that is detected state, not a numpy error.
        with np.errstate(over="ignore", invalid="ignore"):
            loss, dout = _forward_loss(model, batch)
        if not np.isfinite(loss):
            return self._skip(loss)

        state = {"overflow": False, "sq_norm": 0.0}

        def probe_hook(param: Parameter, grad: Tensor) -> Disposition:
            g = grad.data
            if not np.all(np.isfinite(g)):
                state["overflow"] = True
            elif norm_clip:
                unscaled = (g / scale).ravel()
                state["sq_norm"] += float(np.dot(unscaled, unscaled))
            return Disposition.CONSUME

        model.tape.backward(Tensor(dout * scale), probe_hook)

        if state["overflow"]:
            return self._skip(loss)

        norm_scale = 1.0
        if norm_clip:
            total_norm = math.sqrt(state["sq_norm"])
            if not math.isfinite(total_norm):
                return self._skip(loss)
            if total_norm > 0.0:
                norm_scale = min(1.0, self.clip.max_norm / total_norm)

        threshold = self.clip.threshold

        def update_hook(param: Parameter, grad: Tensor) -> Disposition:
            g = grad.data / scale
            if threshold is not None:
                g = np.clip(g, -threshold, threshold)
            if norm_clip:
                g = g * norm_scale
            apply_update(param, g, lr)
            return Disposition.CONSUME

        loss2, dout2 = _forward_loss(model, batch)
        model.tape.backward(Tensor(dout2 * scale), update_hook)
        if self.scaler is not None:
            self.scaler.on_clean()
        return loss2, StepOutcome.APPLIED

    # --- single-pass grouped clipping ------------------------------------

    def _grouped_step(self, model, batch, lr: float) -> tuple[float, StepOutcome]:
        loss, dout = _forward_loss(model, batch)
        _require_finite(loss)
        window = self.clip.window
        max_norm = self.clip.max_norm
        ledger = model.tape.ledger
        state = {"group": None, "buffered": [], "skipped": False}

        def flush() -> None:
            buffered = state["buffered"]
            if not buffered:
                return
            sq = 0.0
            for param in buffered:
                flat = param.grad_slot.data.ravel()
                sq += float(np.dot(flat, flat))
            norm = math.sqrt(sq)
            if not math.isfinite(norm):
                # Earlier groups were already updated; drop only this one.
                state["skipped"] = True
                for param in buffered:
                    param.clear_grad(ledger)
            else:
                factor = min(1.0, max_norm / norm) if norm > 0.0 else 1.0
                for param in buffered:
                    apply_update(param, param.grad_slot.data * factor, lr)
                    param.clear_grad(ledger)
            state["buffered"] = []

        def hook(param: Parameter, grad: Tensor) -> Disposition:
            group = param.layer // window
            if state["group"] is not None and group != state["group"]:
                flush()
            state["group"] = group
            state["buffered"].append(param)
            return Disposition.RETAIN

        model.tape.backward(Tensor(dout), hook)
        flush()
        outcome = StepOutcome.SKIPPED_OVERFLOW if state["skipped"] else StepOutcome.APPLIED
        return loss, outcome


def two_pass_norm_clip_step(model, batch, lr: float, max_norm: float) -> float:
    """Global-norm-clipped fused step: one norm pass, one update pass."""
    loss, _ = Stabilizer(ClipMode.by_global_norm(max_norm)).run_step(model, batch, lr)
    return loss


def grouped_norm_clip_step(model, batch, lr: float, max_norm: float,
                           window: int) -> float:
    """Single-pass fused step with per-layer-window norm clipping."""
    loss, _ = Stabilizer(ClipMode.by_group_norm(max_norm, window)).run_step(
        model, batch, lr
    )
    return loss


def scaled_step(model, batch, lr: float, scaler: LossScaler,
                clip: ClipMode = ClipMode.none()) -> tuple[float, StepOutcome]:
    """Loss-scaled fused step under the two-pass overflow protocol."""
    return Stabilizer(clip, scaler).run_step(model, batch, lr)
