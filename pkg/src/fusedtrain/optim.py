"""Three update rules over the same tape.

SGD retains every gradient and then applies the update, AdamW adds the
usual two moment tensors (plus a full-precision master copy of the
weights under mixed precision), and LOMO applies ``p -= lr * g`` inside
the backward hook and consumes each gradient immediately, so at most one
gradient tensor is ever alive and the optimizer itself stores nothing.

Under half-emulated precision the update arithmetic always runs at full
width: gradient and parameter are taken at full precision, combined, and
the result is rounded back through 16 bits on the write. LOMO keeps no
master copy, so that per-step rounding is its storage model; SGD and
AdamW land the update in their full-precision master first.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, NonFiniteLossError
from .ledger import Category, MemoryLedger
from .tape import Disposition, Parameter
from .tensor import Precision, Tensor


class OptimizerKind(Enum):
    SGD = "sgd"
    ADAMW = "adamw"
    LOMO = "lomo"


@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def validate(self) -> None:
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1): {self.beta1}, {self.beta2}")
        if self.eps <= 0.0:
            raise ConfigError(f"eps must be positive, got {self.eps}")


def retain_hook(param: Parameter, grad: Tensor) -> Disposition:
    return Disposition.RETAIN


def apply_update(param: Parameter, grad_full: np.ndarray, lr: float) -> None:
    """p <- p - lr * g at full width; the assign rounds per precision."""
    param.value.assign(param.value.data - lr * grad_full)


def _forward_loss(model, batch) -> tuple[float, np.ndarray]:
    inputs, targets = batch
    output = model.forward(inputs)
    return model.loss_and_grad(output, targets)


def _require_finite(loss: float) -> None:
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"loss is non-finite ({loss}); step aborted")


class SGD:
    """Plain gradient descent; all gradients live simultaneously."""

    def __init__(self, model, ledger: MemoryLedger | None = None):
        self.model = model
        self.ledger = ledger if ledger is not None else model.tape.ledger
        self._masters: list[np.ndarray] | None = None
        if model.precision is Precision.HALF_EMULATED:
            self._masters = [p.value.data.copy() for p in model.parameters]
            if self.ledger is not None:
                for p in model.parameters:
                    self.ledger.record(Category.OPTIM_STATES, 4 * p.value.size)

    def state_nbytes(self) -> int:
        if self._masters is None:
            return 0
        return sum(4 * m.size for m in self._masters)

    def step(self, batch, lr: float) -> float:
        loss, dout = _forward_loss(self.model, batch)
        _require_finite(loss)
        self.model.tape.backward(Tensor(dout), retain_hook)
        for i, p in enumerate(self.model.parameters):
            g = p.grad_slot.data
            if self._masters is not None:
                self._masters[i] = self._masters[i] - lr * g
                p.value.assign(self._masters[i])
            else:
                apply_update(p, g, lr)
            p.clear_grad(self.ledger)
        return loss


class LOMO:
    """Fused update: each gradient is consumed the moment it is computed.

    An optional stabilizer (clipping and/or dynamic loss scaling) owns the
    step protocol when present; without one this is a single fused
    backward pass. Optimizer state is exactly zero bytes either way.
    """

    def __init__(self, model, stabilizer=None, ledger: MemoryLedger | None = None):
        self.model = model
        self.stabilizer = stabilizer
        self.ledger = ledger if ledger is not None else model.tape.ledger
        self.last_outcome = None

    def state_nbytes(self) -> int:
        return 0

    def step(self, batch, lr: float) -> float:
        if self.stabilizer is not None:
            loss, outcome = self.stabilizer.run_step(self.model, batch, lr)
            self.last_outcome = outcome
            return loss
        loss, dout = _forward_loss(self.model, batch)
        _require_finite(loss)

        def hook(param: Parameter, grad: Tensor) -> Disposition:
            apply_update(param, grad.data, lr)
            return Disposition.CONSUME

        self.model.tape.backward(Tensor(dout), hook)
        self.last_outcome = None
        return loss


class AdamW:
    """Decoupled-weight-decay Adam; the optimizer-state memory baseline."""

    def __init__(self, model, config: AdamWConfig = AdamWConfig(),
                 ledger: MemoryLedger | None = None):
        config.validate()
        self.model = model
        self.config = config
        self.ledger = ledger if ledger is not None else model.tape.ledger
        self._step_count = 0
        self._m = [np.zeros_like(p.value.data) for p in model.parameters]
        self._v = [np.zeros_like(p.value.data) for p in model.parameters]
        self._masters: list[np.ndarray] | None = None
        per_element = 8
        if model.precision is Precision.HALF_EMULATED:
            self._masters = [p.value.data.copy() for p in model.parameters]
            per_element = 12
        if self.ledger is not None:
            for p in model.parameters:
                self.ledger.record(Category.OPTIM_STATES, per_element * p.value.size)

    def state_nbytes(self) -> int:
        per_element = 12 if self._masters is not None else 8
        return sum(per_element * p.value.size for p in self.model.parameters)

    def step(self, batch, lr: float) -> float:
        loss, dout = _forward_loss(self.model, batch)
        _require_finite(loss)
        self.model.tape.backward(Tensor(dout), retain_hook)
        cfg = self.config
        self._step_count += 1
        t = self._step_count
        for i, p in enumerate(self.model.parameters):
            g = p.grad_slot.data
            self._m[i] = cfg.beta1 * self._m[i] + (1.0 - cfg.beta1) * g
            self._v[i] = cfg.beta2 * self._v[i] + (1.0 - cfg.beta2) * (g * g)
            m_hat = self._m[i] / (1.0 - cfg.beta1**t)
            v_hat = self._v[i] / (1.0 - cfg.beta2**t)
            base = self._masters[i] if self._masters is not None else p.value.data
            new = base - lr * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * base)
            if self._masters is not None:
                self._masters[i] = new
            p.value.assign(new)
            p.clear_grad(self.ledger)
        return loss


def sgd_step(model, batch, lr: float, ledger: MemoryLedger | None = None) -> float:
    """One full-precision SGD step; use the SGD class when a master copy is needed."""
    if model.precision is Precision.HALF_EMULATED:
        raise ConfigError("mixed-precision SGD is stateful; construct SGD(model) once")
    return SGD(model, ledger).step(batch, lr)


def lomo_step(model, batch, lr: float, stabilizer=None,
              ledger: MemoryLedger | None = None) -> float:
    """One fused step (stateless; safe to call as a free function)."""
    return LOMO(model, stabilizer, ledger).step(batch, lr)


def adamw_step(optimizer: AdamW, batch, lr: float) -> float:
    """One AdamW step on a persistent optimizer instance."""
    return optimizer.step(batch, lr)
