"""Small deterministic models and synthetic tasks for desk-scale experiments.

Two model kinds are provided. The MLP is a stack of linear layers with
tanh between them, paired with the regression task. The mini transformer
is a pre-norm decoder stack shaped like contemporary LLM blocks: RMS
normalization (scale only, no bias), four square attention projections,
and a gated two-branch feed-forward, untied embedding and output head.
That shape choice matters: the closed-form parameter count used by the
memory estimator is exact for this architecture at any scale.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError
from .ledger import MemoryLedger
from .ops import softmax_cross_entropy, squared_error
from .tape import CheckpointPolicy, GraphBuilder, Parameter, Tape
from .tensor import Precision, Tensor

INIT_RANGE = 0.08
RMSNORM_EPS = 1e-5


class ModelKind(Enum):
    MLP = "mlp"
    MINI_TRANSFORMER = "mini_transformer"


class TaskKind(Enum):
    REGRESSION = "regression"
    SEQUENCE_COPY = "sequence_copy"


@dataclass(frozen=True)
class ModelConfig:
    kind: ModelKind
    layers: int
    hidden: int
    seed: int = 0
    input_dim: int | None = None  # MLP only
    vocab: int | None = None      # transformer only
    heads: int | None = None      # transformer only

    def validate(self) -> None:
        if self.layers < 1 or self.hidden < 1:
            raise ConfigError(f"extents must be >= 1: layers={self.layers}, hidden={self.hidden}")
        if self.kind is ModelKind.MLP:
            if self.input_dim is None or self.input_dim < 1:
                raise ConfigError("mlp requires input_dim >= 1")
        else:
            if self.vocab is None or self.vocab < 1:
                raise ConfigError("mini_transformer requires vocab >= 1")
            if self.heads is None or self.heads < 1:
                raise ConfigError("mini_transformer requires heads >= 1")
            if self.hidden % self.heads != 0:
                raise ConfigError(
                    f"hidden ({self.hidden}) must be divisible by heads ({self.heads})"
                )


@dataclass(frozen=True)
class SyntheticTask:
    kind: TaskKind
    dataset_seed: int = 0
    input_dim: int | None = None  # regression
    seq_len: int | None = None    # sequence copy
    vocab: int | None = None      # sequence copy: token id range

    def validate(self) -> None:
        if self.kind is TaskKind.REGRESSION:
            if self.input_dim is None or self.input_dim < 1:
                raise ConfigError("regression requires input_dim >= 1")
        else:
            if self.seq_len is None or self.seq_len < 1:
                raise ConfigError("sequence_copy requires seq_len >= 1")
            if self.vocab is None or self.vocab < 2:
                raise ConfigError("sequence_copy requires vocab >= 2")


def zoo_ffn_hidden(hidden: int) -> int:
    """Feed-forward width rule used by the bundled transformer."""
    return 4 * hidden


class Model:
    """A tape-backed model plus its loss function."""

    def __init__(self, config: ModelConfig, tape: Tape):
        self.config = config
        self.tape = tape

    @property
    def parameters(self) -> list[Parameter]:
        return self.tape.parameters

    @property
    def precision(self) -> Precision:
        return self.tape.precision

    def n_params(self) -> int:
        return sum(p.value.size for p in self.parameters)

    def forward(self, inputs: Tensor) -> Tensor:
        return self.tape.forward(inputs)

    def loss_and_grad(self, output: Tensor, targets: np.ndarray) -> tuple[float, np.ndarray]:
        if self.config.kind is ModelKind.MLP:
            return squared_error(output.data, targets)
        return softmax_cross_entropy(output.data, targets)

    def param_state(self) -> list[np.ndarray]:
        return [p.value.data.copy() for p in self.parameters]

    def set_param_state(self, state: list[np.ndarray]) -> None:
        for p, values in zip(self.parameters, state):
            p.value.assign(values)

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters:
            h.update(p.name.encode())
            h.update(p.value.data.tobytes())
        return h.hexdigest()


def _build_mlp(cfg: ModelConfig, builder: GraphBuilder, rng: np.random.Generator):
    x = builder.input("x")
    dims = [cfg.input_dim] + [cfg.hidden] * (cfg.layers - 1) + [1]
    for l in range(cfg.layers):
        with builder.layer(l):
            w = builder.parameter(
                f"layer{l}.weight",
                rng.uniform(-INIT_RANGE, INIT_RANGE, (dims[l], dims[l + 1])),
            )
            b = builder.parameter(
                f"layer{l}.bias", rng.uniform(-INIT_RANGE, INIT_RANGE, (dims[l + 1],))
            )
            x = builder.apply("add_bias", builder.apply("matmul", x, w), b)
            if l < cfg.layers - 1:
                x = builder.apply("tanh", x)
    return x


def _build_mini_transformer(cfg: ModelConfig, builder: GraphBuilder,
                            rng: np.random.Generator):
    hidden, heads = cfg.hidden, cfg.heads
    ffn = zoo_ffn_hidden(hidden)
    uniform = lambda *shape: rng.uniform(-INIT_RANGE, INIT_RANGE, shape)

    ids = builder.input("ids")
    with builder.layer(0):
        emb = builder.parameter("embedding.weight", uniform(cfg.vocab, hidden))
        x = builder.apply("add_pos", builder.apply("embedding", ids, emb))

    for l in range(1, cfg.layers + 1):
        with builder.layer(l):
            pre = f"block{l - 1}"
            s1 = builder.parameter(f"{pre}.attn_norm.scale", np.ones(hidden))
            a = builder.apply("rmsnorm", x, s1, eps=RMSNORM_EPS)
            heads_split = []
            for name in ("q", "k", "v"):
                w = builder.parameter(f"{pre}.attn.{name}_proj", uniform(hidden, hidden))
                heads_split.append(
                    builder.apply("split_heads", builder.apply("matmul", a, w), heads=heads)
                )
            qh, kh, vh = heads_split
            scores = builder.apply(
                "scale",
                builder.apply("bmm", qh, builder.apply("swap_last2", kh)),
                factor=1.0 / math.sqrt(hidden // heads),
            )
            ctx = builder.apply("bmm", builder.apply("softmax", scores), vh)
            wo = builder.parameter(f"{pre}.attn.out_proj", uniform(hidden, hidden))
            x = builder.apply(
                "add", x, builder.apply("matmul", builder.apply("merge_heads", ctx), wo)
            )

            s2 = builder.parameter(f"{pre}.ffn_norm.scale", np.ones(hidden))
            y = builder.apply("rmsnorm", x, s2, eps=RMSNORM_EPS)
            wg = builder.parameter(f"{pre}.ffn.gate_proj", uniform(hidden, ffn))
            wu = builder.parameter(f"{pre}.ffn.up_proj", uniform(hidden, ffn))
            wd = builder.parameter(f"{pre}.ffn.down_proj", uniform(ffn, hidden))
            gated = builder.apply(
                "mul",
                builder.apply("gelu", builder.apply("matmul", y, wg)),
                builder.apply("matmul", y, wu),
            )
            x = builder.apply("add", x, builder.apply("matmul", gated, wd))

    with builder.layer(cfg.layers + 1):
        sf = builder.parameter("final_norm.scale", np.ones(hidden))
        xf = builder.apply("rmsnorm", x, sf, eps=RMSNORM_EPS)
        head = builder.parameter("head.weight", uniform(hidden, cfg.vocab))
        logits = builder.apply("matmul", xf, head)
    return logits


def build_model(cfg: ModelConfig, *, precision: Precision = Precision.FULL,
                checkpointing: bool = False,
                ledger: MemoryLedger | None = None) -> Model:
    """Construct a tape-backed model with seed-deterministic parameters.

    Weight matrices, embeddings, and biases draw uniformly from
    [-0.08, 0.08]; normalization scale vectors start at 1.0 so signal
    actually propagates through an untrained stack.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    builder = GraphBuilder(precision=precision, ledger=ledger)
    if cfg.kind is ModelKind.MLP:
        out = _build_mlp(cfg, builder, rng)
    else:
        out = _build_mini_transformer(cfg, builder, rng)
    policy = (
        CheckpointPolicy.CHECKPOINT_PER_LAYER if checkpointing
        else CheckpointPolicy.STORE_ALL
    )
    return Model(cfg, builder.build(out, policy))


def sample_batch(task: SyntheticTask, batch: int, step: int) -> tuple[Tensor, np.ndarray]:
    """Deterministic batch for (dataset_seed, step); same pair, same bytes."""
    task.validate()
    if batch < 1:
        raise ConfigError(f"batch must be >= 1, got {batch}")
    rng = np.random.default_rng([task.dataset_seed, step])
    if task.kind is TaskKind.REGRESSION:
        x = rng.uniform(-1.0, 1.0, (batch, task.input_dim))
        teacher = np.random.default_rng(task.dataset_seed).uniform(
            -1.0, 1.0, task.input_dim
        )
        targets = np.tanh(x @ teacher)[:, None]
        return Tensor(x), targets
    ids = rng.integers(0, task.vocab, (batch, task.seq_len))
    return Tensor(ids), ids.copy()
