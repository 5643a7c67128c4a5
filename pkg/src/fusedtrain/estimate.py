"""Closed-form training-memory calculator for transformer shapes.

Parameter, gradient, and optimizer-state bytes are exact arithmetic over
the architecture (the same shape rules the bundled mini transformer uses,
so the formula is validated against enumerated parameters at desk scale):

* parameters: ``vocab*h`` embedding, per layer ``4h^2`` attention
  projections + ``3*h*ffn`` gated feed-forward + ``2h`` norm scales, plus
  a final norm and an untied ``vocab*h`` head.
* gradients: full parameter count for SGD/AdamW; for the fused optimizer
  only the single largest tensor is ever alive.
* optimizer states per element: AdamW 12 bytes under mixed precision
  (full-width master, momentum, variance) or 8 full-precision; SGD 4
  (master copy, mixed only); fused 0.

Activation bytes are a calibrated model, not exact accounting. Per token
and layer we charge 8 hidden-width buffers, 8 feed-forward-width buffer
equivalents, and 4 width-equivalents per attention-score element
(``heads * seq``), plus the output logits; with checkpointing enabled
only the per-layer boundary values, logits, and one layer's attention
score working set remain. The coefficients were calibrated on a
reference 7B-parameter profile at batch 8, sequence 512 and reproduce it
to within 1%; treat activation figures as estimates, the other columns
as arithmetic.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .errors import ConfigError
from .optim import OptimizerKind
from .zoo import ModelConfig, ModelKind, zoo_ffn_hidden

GIB = 1024**3

# Calibrated activation coefficients (width-equivalents per token-layer).
ACT_HIDDEN_BUFFERS = 8
ACT_FFN_BUFFERS = 8
ACT_SCORE_BUFFERS = 4


class EstimatePrecision(Enum):
    MIXED16 = "mixed16"
    FULL32 = "full32"


@dataclass(frozen=True)
class ArchSpec:
    layers: int
    hidden: int
    heads: int
    ffn_hidden: int
    vocab: int
    tie_embeddings: bool = False

    def validate(self) -> None:
        if min(self.hidden, self.heads, self.ffn_hidden, self.vocab) < 1:
            raise ConfigError(f"architecture extents must be >= 1: {self}")
        if self.layers < 0:
            raise ConfigError(f"layers must be >= 0, got {self.layers}")
        if self.hidden % self.heads != 0:
            raise ConfigError(
                f"hidden ({self.hidden}) must be divisible by heads ({self.heads})"
            )


@dataclass(frozen=True)
class TrainSetup:
    optimizer: OptimizerKind
    precision: EstimatePrecision = EstimatePrecision.MIXED16
    activation_checkpointing: bool = False
    seq_len: int = 512
    batch: int = 8

    def validate(self) -> None:
        if self.seq_len < 1 or self.batch < 1:
            raise ConfigError(
                f"seq_len and batch must be >= 1: {self.seq_len}, {self.batch}"
            )


PRESETS: dict[str, ArchSpec] = {
    "llama-7b": ArchSpec(layers=32, hidden=4096, heads=32, ffn_hidden=11008,
                         vocab=32000, tie_embeddings=False),
}


def arch_from_model_config(cfg: ModelConfig) -> ArchSpec:
    """The estimator shape matching a bundled mini-transformer config."""
    if cfg.kind is not ModelKind.MINI_TRANSFORMER:
        raise ConfigError("only transformer configs map onto an ArchSpec")
    return ArchSpec(layers=cfg.layers, hidden=cfg.hidden, heads=cfg.heads,
                    ffn_hidden=zoo_ffn_hidden(cfg.hidden), vocab=cfg.vocab)


def param_count(arch: ArchSpec) -> int:
    """Exact parameter count for the reference decoder shape."""
    arch.validate()
    h, f, v = arch.hidden, arch.ffn_hidden, arch.vocab
    per_layer = 4 * h * h + 3 * h * f + 2 * h
    head_stage = h + (0 if arch.tie_embeddings else v * h)
    return v * h + arch.layers * per_layer + head_stage


def largest_tensor_elements(arch: ArchSpec) -> int:
    """Element count of the single largest parameter tensor."""
    arch.validate()
    h, f, v = arch.hidden, arch.ffn_hidden, arch.vocab
    candidates = [v * h, h]
    if arch.layers > 0:
        candidates += [h * h, h * f]
    return max(candidates)


@dataclass(frozen=True)
class MemoryEstimate:
    params_bytes: int
    gradients_bytes: int
    optim_states_bytes: int
    activations_bytes: int

    @property
    def total_bytes(self) -> int:
        return (self.params_bytes + self.gradients_bytes
                + self.optim_states_bytes + self.activations_bytes)

    @property
    def params_gib(self) -> float:
        return self.params_bytes / GIB

    @property
    def gradients_gib(self) -> float:
        return self.gradients_bytes / GIB

    @property
    def optim_states_gib(self) -> float:
        return self.optim_states_bytes / GIB

    @property
    def activations_gib(self) -> float:
        return self.activations_bytes / GIB

    @property
    def total_gib(self) -> float:
        return self.total_bytes / GIB

    def model_state_bytes(self) -> int:
        return self.params_bytes + self.gradients_bytes + self.optim_states_bytes

    def shares(self) -> dict[str, dict[str, float]]:
        """Category shares against both denominators people quote."""
        total = self.total_bytes
        states = self.model_state_bytes()
        out: dict[str, dict[str, float]] = {}
        for name, value in (("params", self.params_bytes),
                            ("gradients", self.gradients_bytes),
                            ("optim_states", self.optim_states_bytes),
                            ("activations", self.activations_bytes)):
            out[name] = {
                "of_total_pct": 100.0 * value / total if total else 0.0,
                "of_model_states_pct": 100.0 * value / states if states else 0.0,
            }
        return out

    def to_dict(self) -> dict:
        return {
            "bytes": {
                "params": self.params_bytes,
                "gradients": self.gradients_bytes,
                "optim_states": self.optim_states_bytes,
                "activations": self.activations_bytes,
                "total": self.total_bytes,
            },
            "gib": {
                "params": round(self.params_gib, 2),
                "gradients": round(self.gradients_gib, 2),
                "optim_states": round(self.optim_states_gib, 2),
                "activations": round(self.activations_gib, 2),
                "total": round(self.total_gib, 2),
            },
            "shares_pct": self.shares(),
        }


def _activation_elements(arch: ArchSpec, setup: TrainSetup) -> int:
    tokens = setup.batch * setup.seq_len
    logits = tokens * arch.vocab
    score = arch.heads * setup.seq_len
    if not setup.activation_checkpointing:
        per_token_layer = (ACT_HIDDEN_BUFFERS * arch.hidden
                           + ACT_FFN_BUFFERS * arch.ffn_hidden
                           + ACT_SCORE_BUFFERS * score)
        return tokens * arch.layers * per_token_layer + logits
    boundaries = tokens * (arch.layers + 1) * arch.hidden
    working_set = tokens * ACT_SCORE_BUFFERS * score
    return boundaries + logits + working_set


def estimate(arch: ArchSpec, setup: TrainSetup) -> MemoryEstimate:
    """Byte estimate per memory category for one training configuration."""
    arch.validate()
    setup.validate()
    width = 2 if setup.precision is EstimatePrecision.MIXED16 else 4
    count = param_count(arch)

    params = count * width
    if setup.optimizer is OptimizerKind.LOMO:
        grads = largest_tensor_elements(arch) * width
        optim = 0
    elif setup.optimizer is OptimizerKind.SGD:
        grads = count * width
        optim = count * 4 if setup.precision is EstimatePrecision.MIXED16 else 0
    else:
        grads = count * width
        optim = count * (12 if setup.precision is EstimatePrecision.MIXED16 else 8)
    activations = _activation_elements(arch, setup) * width
    return MemoryEstimate(params, grads, optim, activations)


def format_estimate(arch: ArchSpec, setup: TrainSetup, est: MemoryEstimate) -> str:
    """Render one estimate as an aligned text table (GiB, two decimals)."""
    rows = [
        ("Params", est.params_gib),
        ("Gradients", est.gradients_gib),
        ("Optim States", est.optim_states_gib),
        ("Activations", est.activations_gib),
        ("Total Memory", est.total_gib),
    ]
    head = (f"optimizer={setup.optimizer.value} precision={setup.precision.value} "
            f"ac={'on' if setup.activation_checkpointing else 'off'} "
            f"seq={setup.seq_len} batch={setup.batch} "
            f"params={param_count(arch):,}")
    width = max(len(name) for name, _ in rows)
    lines = [head, "-" * len(head)]
    lines += [f"{name:<{width}}  {gib:>10.2f} GB" for name, gib in rows]
    return "\n".join(lines)
