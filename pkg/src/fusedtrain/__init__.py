"""Desk-scale training engine with a fused gradient/update backward pass.

The package bundles a deterministic reverse-mode tape with per-parameter
gradient hooks, a fused low-memory update rule alongside SGD and AdamW
baselines, clipping/loss-scaling stabilizers, byte-exact memory
accounting, a closed-form memory estimator for large transformer shapes,
and a configuration-driven CLI.
"""
from .errors import (AccountingError, ConfigError, FusedTrainError,
                     GraphBuildError, NonFiniteLossError, ScaleUnderflowError,
                     ShapeError, TapeStateError)
from .estimate import (ArchSpec, EstimatePrecision, MemoryEstimate, PRESETS,
                       TrainSetup, estimate, largest_tensor_elements,
                       param_count)
from .ledger import Category, MemoryLedger, MemorySnapshot
from .optim import (LOMO, SGD, AdamW, AdamWConfig, OptimizerKind, adamw_step,
                    lomo_step, sgd_step)
from .stabilize import (ClipKind, ClipMode, LossScaler, Stabilizer,
                        StepOutcome, clip_by_value, grouped_norm_clip_step,
                        scaled_step, two_pass_norm_clip_step)
from .tape import (CheckpointPolicy, Disposition, GraphBuilder, Parameter,
                   Tape)
from .tensor import Precision, Tensor, round_through_half
from .zoo import (Model, ModelConfig, ModelKind, SyntheticTask, TaskKind,
                  build_model, sample_batch)

__version__ = "0.1.0"
