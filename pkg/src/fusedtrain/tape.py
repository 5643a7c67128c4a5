"""Static-graph reverse-mode tape with per-parameter gradient hooks.

A model definition is recorded once into a ``Tape`` via ``GraphBuilder``:
a flat list of op records over variables (inputs, parameters,
intermediates), each tagged with a layer index. ``forward`` interprets the
records; ``backward`` walks them in reverse, delivering each parameter's
gradient to a hook the moment it is complete, in non-increasing layer
order. The hook decides whether the buffer is released immediately
(``CONSUME``, the fused-update path) or parked in the parameter's single
gradient slot (``RETAIN``).

Layer tags drive activation checkpointing: under ``CHECKPOINT_PER_LAYER``
only values crossing a layer boundary survive the forward pass, and each
layer's interior values are recomputed at most once during backward.

Parameters must be consumed by exactly one op. Weight sharing would need
per-use hook bookkeeping to keep "gradient complete" well defined, so the
builder rejects it outright.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import GraphBuildError, ShapeError, TapeStateError
from .ledger import Category, MemoryLedger
from .ops import OPS
from .tensor import Precision, Tensor, logical_nbytes, round_through_half


class CheckpointPolicy(Enum):
    STORE_ALL = "store_all"
    CHECKPOINT_PER_LAYER = "checkpoint_per_layer"


class Disposition(Enum):
    CONSUME = "consume"
    RETAIN = "retain"


class VarKind(Enum):
    INPUT = "input"
    PARAM = "param"
    INTER = "inter"


class Parameter:
    """Named leaf tensor with a layer index and a single gradient slot."""

    __slots__ = ("name", "layer", "value", "grad_slot")

    def __init__(self, name: str, layer: int, value: Tensor):
        self.name = name
        self.layer = layer
        self.value = value
        self.grad_slot: Tensor | None = None

    def clear_grad(self, ledger: MemoryLedger | None = None) -> None:
        if self.grad_slot is not None:
            if ledger is not None:
                ledger.record(Category.GRADIENTS, -self.grad_slot.nbytes)
            self.grad_slot = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, layer={self.layer}, shape={self.value.shape})"


@dataclass(frozen=True)
class VarInfo:
    vid: int
    kind: VarKind
    layer: int
    name: str
    param: Parameter | None = None


@dataclass(frozen=True)
class OpRecord:
    index: int
    kind: str
    in_ids: tuple[int, ...]
    out_id: int
    attrs: dict
    layer: int


class VarRef:
    """Opaque handle to a graph variable, returned by the builder."""

    __slots__ = ("vid",)

    def __init__(self, vid: int):
        self.vid = vid


class GraphBuilder:
    """Records a model definition into an executable tape."""

    def __init__(self, precision: Precision = Precision.FULL,
                 ledger: MemoryLedger | None = None):
        self.precision = precision
        self.ledger = ledger
        self._vars: list[VarInfo] = []
        self._records: list[OpRecord] = []
        self._params: list[Parameter] = []
        self._input_ids: list[int] = []
        self._param_uses: dict[int, int] = {}
        self._layer = 0

    @contextmanager
    def layer(self, index: int):
        if index < 0:
            raise GraphBuildError(f"layer index must be >= 0, got {index}")
        previous = self._layer
        self._layer = index
        try:
            yield
        finally:
            self._layer = previous

    def _new_var(self, kind: VarKind, name: str, param: Parameter | None = None) -> VarRef:
        vid = len(self._vars)
        self._vars.append(VarInfo(vid, kind, self._layer, name, param))
        return VarRef(vid)

    def input(self, name: str) -> VarRef:
        ref = self._new_var(VarKind.INPUT, name)
        self._input_ids.append(ref.vid)
        return ref

    def parameter(self, name: str, values: np.ndarray) -> VarRef:
        param = Parameter(name, self._layer, Tensor(values, self.precision))
        self._params.append(param)
        if self.ledger is not None:
            self.ledger.record(Category.PARAMS, param.value.nbytes)
        ref = self._new_var(VarKind.PARAM, name, param)
        self._param_uses[ref.vid] = 0
        return ref

    def apply(self, kind: str, *inputs: VarRef, **attrs) -> VarRef:
        if kind not in OPS:
            raise GraphBuildError(f"unknown op kind {kind!r}")
        op = OPS[kind]
        if len(inputs) != op.n_inputs:
            raise GraphBuildError(
                f"{kind} takes {op.n_inputs} inputs, got {len(inputs)}"
            )
        if self._records and self._layer < self._records[-1].layer:
            raise GraphBuildError(
                f"op layers must be non-decreasing: {self._layer} after "
                f"{self._records[-1].layer}"
            )
        for ref in inputs:
            if self._vars[ref.vid].kind is VarKind.PARAM:
                self._param_uses[ref.vid] += 1
                if self._param_uses[ref.vid] > 1:
                    raise GraphBuildError(
                        f"parameter {self._vars[ref.vid].name!r} is consumed by "
                        "more than one op; weight sharing is not supported"
                    )
        out = self._new_var(VarKind.INTER, f"{kind}.{len(self._records)}")
        self._records.append(
            OpRecord(
                index=len(self._records),
                kind=kind,
                in_ids=tuple(ref.vid for ref in inputs),
                out_id=out.vid,
                attrs=attrs,
                layer=self._layer,
            )
        )
        return out

    def build(self, output: VarRef,
              policy: CheckpointPolicy = CheckpointPolicy.STORE_ALL) -> "Tape":
        if self._vars[output.vid].kind is VarKind.PARAM:
            raise GraphBuildError("tape output cannot be a bare parameter")
        return Tape(
            vars=self._vars,
            records=self._records,
            parameters=self._params,
            input_ids=self._input_ids,
            out_id=output.vid,
            precision=self.precision,
            policy=policy,
            ledger=self.ledger,
        )


@dataclass
class _Liveness:
    segments: list[tuple[int, int, int]]  # (layer, first record, last record + 1)
    segment_of_record: list[int]
    forward_keep: set[int]
    forward_uses: dict[int, int]


class Tape:
    """Executable recording of a model: ordered op records over variables."""

    def __init__(self, *, vars: list[VarInfo], records: list[OpRecord],
                 parameters: list[Parameter], input_ids: list[int], out_id: int,
                 precision: Precision, policy: CheckpointPolicy,
                 ledger: MemoryLedger | None):
        self.vars = vars
        self.records = records
        self.parameters = parameters
        self.input_ids = input_ids
        self.out_id = out_id
        self.precision = precision
        self.policy = policy
        self.ledger = ledger
        self.counters = {"forwards": 0, "forward_ops": 0, "backward_passes": 0}
        self._values: dict[int, np.ndarray] = {}
        self._held_bytes: dict[int, int] = {}
        self._forwarded = False
        self._liveness = self._analyze()

    # --- liveness -------------------------------------------------------

    def _analyze(self) -> _Liveness:
        segments: list[tuple[int, int, int]] = []
        segment_of_record: list[int] = []
        for rec in self.records:
            if segments and segments[-1][0] == rec.layer:
                layer, start, _ = segments[-1]
                segments[-1] = (layer, start, rec.index + 1)
            else:
                segments.append((rec.layer, rec.index, rec.index + 1))
            segment_of_record.append(len(segments) - 1)

        produced_seg: dict[int, int] = {}
        for rec in self.records:
            produced_seg[rec.out_id] = segment_of_record[rec.index]

        forward_uses: dict[int, int] = {}
        keep: set[int] = set(self.input_ids)
        keep.add(self.out_id)
        for rec in self.records:
            for vid in rec.in_ids:
                if self.vars[vid].kind is VarKind.PARAM:
                    continue
                forward_uses[vid] = forward_uses.get(vid, 0) + 1
                src = produced_seg.get(vid)
                if src is not None and segment_of_record[rec.index] > src:
                    keep.add(vid)  # crosses a layer boundary: checkpoint it
        return _Liveness(segments, segment_of_record, keep, forward_uses)

    # --- value storage with byte accounting -----------------------------

    def _store(self, vid: int, value: np.ndarray) -> None:
        self._values[vid] = value
        nbytes = logical_nbytes(value.size, self.precision)
        self._held_bytes[vid] = nbytes
        if self.ledger is not None:
            self.ledger.record(Category.ACTIVATIONS, nbytes)

    def _free(self, vid: int) -> None:
        if vid in self._values:
            del self._values[vid]
            if self.ledger is not None:
                self.ledger.record(Category.ACTIVATIONS, -self._held_bytes.pop(vid))
            else:
                self._held_bytes.pop(vid)

    def _release_all_values(self) -> None:
        for vid in list(self._values):
            self._free(vid)

    def _value_of(self, vid: int) -> np.ndarray:
        info = self.vars[vid]
        if info.kind is VarKind.PARAM:
            return info.param.value.data
        return self._values[vid]

    def _round(self, value: np.ndarray) -> np.ndarray:
        if self.precision is Precision.HALF_EMULATED and value.dtype.kind == "f":
            return round_through_half(value)
        return value

    # --- execution ------------------------------------------------------

    def _execute_record(self, rec: OpRecord) -> None:
        in_vals = [self._value_of(v) for v in rec.in_ids]
        out = OPS[rec.kind].fwd(in_vals, rec.attrs)
        self._store(rec.out_id, self._round(out))
        self.counters["forward_ops"] += 1

    def forward(self, *inputs: Tensor) -> Tensor:
        """Run the recorded computation on fresh inputs, saving values per policy."""
        if len(inputs) != len(self.input_ids):
            raise ShapeError(
                "forward",
                f"model takes {len(self.input_ids)} inputs, got {len(inputs)}",
            )
        self._release_all_values()
        self._forwarded = False
        live = self._liveness

        for vid, tensor in zip(self.input_ids, inputs):
            value = tensor.data if tensor.is_integer else self._round(tensor.data)
            self._store(vid, value)

        checkpointing = self.policy is CheckpointPolicy.CHECKPOINT_PER_LAYER
        pending = dict(live.forward_uses) if checkpointing else None
        # Non-finite values are data here (emulated 16-bit overflow must
        # propagate so the scaler can detect it); silence numpy's warnings.
        with np.errstate(over="ignore", invalid="ignore"):
            for rec in self.records:
                self._execute_record(rec)
                if checkpointing:
                    if rec.out_id not in live.forward_keep and \
                            live.forward_uses.get(rec.out_id, 0) == 0:
                        self._free(rec.out_id)
                    for vid in rec.in_ids:
                        if self.vars[vid].kind is VarKind.PARAM:
                            continue
                        pending[vid] -= 1
                        if pending[vid] == 0 and vid not in live.forward_keep:
                            self._free(vid)

        self.counters["forwards"] += 1
        self._forwarded = True
        out = self._values[self.out_id]
        return Tensor(out.copy(), self.precision)

    def backward(self, loss_grad: Tensor, hook) -> None:
        """Reverse traversal delivering each parameter gradient to ``hook``.

        ``hook(parameter, gradient) -> Disposition`` runs once per
        parameter, in non-increasing layer order. A consumed gradient is
        released before the next one is materialized.
        """
        if not self._forwarded:
            raise TapeStateError("backward requires a forward pass on this tape")
        self._forwarded = False
        out_val = self._values[self.out_id]
        if loss_grad.shape != out_val.shape:
            raise ShapeError(
                "backward",
                f"loss gradient {loss_grad.shape} vs output {out_val.shape}",
            )
        adjoints: dict[int, np.ndarray] = {self.out_id: self._round(loss_grad.data)}
        checkpointing = self.policy is CheckpointPolicy.CHECKPOINT_PER_LAYER

        with np.errstate(over="ignore", invalid="ignore"):
            for seg_idx in range(len(self._liveness.segments) - 1, -1, -1):
                _, start, stop = self._liveness.segments[seg_idx]
                if checkpointing:
                    # Re-run this layer's interior from its checkpointed
                    # inputs; values that survived the forward pass are
                    # reused as-is.
                    for rec in self.records[start:stop]:
                        if rec.out_id not in self._values:
                            self._execute_record(rec)
                for rec in reversed(self.records[start:stop]):
                    self._backward_record(rec, adjoints, hook)

        self._release_all_values()
        self.counters["backward_passes"] += 1

    def _backward_record(self, rec: OpRecord, adjoints: dict[int, np.ndarray],
                         hook) -> None:
        out_val = self._values[rec.out_id]
        g_out = adjoints.pop(rec.out_id, None)
        if g_out is None:
            g_out = np.zeros_like(out_val)
        in_vals = [self._value_of(v) for v in rec.in_ids]
        grads = OPS[rec.kind].vjp(in_vals, out_val, g_out, rec.attrs)
        self._free(rec.out_id)
        for vid, grad in zip(rec.in_ids, grads):
            if grad is None:
                continue
            grad = self._round(grad)
            info = self.vars[vid]
            if info.kind is VarKind.PARAM:
                self._deliver(info.param, grad, hook)
            elif info.kind is VarKind.INTER:
                if vid in adjoints:
                    adjoints[vid] = adjoints[vid] + grad
                else:
                    adjoints[vid] = grad

    def _deliver(self, param: Parameter, grad: np.ndarray, hook) -> None:
        if grad.shape != param.value.shape:
            raise ShapeError(
                "backward",
                f"gradient {grad.shape} vs parameter {param.value.shape} "
                f"for {param.name!r}",
            )
        tensor = Tensor(grad, self.precision)
        if self.ledger is not None:
            self.ledger.record(Category.GRADIENTS, tensor.nbytes)
        param.clear_grad(self.ledger)  # a stale slot would double-count
        disposition = hook(param, tensor)
        if disposition is Disposition.CONSUME:
            if self.ledger is not None:
                self.ledger.record(Category.GRADIENTS, -tensor.nbytes)
        elif disposition is Disposition.RETAIN:
            param.grad_slot = tensor
        else:
            raise TapeStateError(f"hook returned {disposition!r}, expected a Disposition")
