"""Forward rules and vector-Jacobian products for the supported op set.

The op set is the minimum the bundled models need: matrix multiplies,
elementwise add/mul, tanh/gelu, embedding lookup, RMS layer normalization,
softmax, head splitting/merging for attention, and the two loss functions.

Determinism rules: every contraction goes through ``np.einsum`` with
``optimize=False`` so the accumulation order is a fixed property of the
op, never of input size heuristics or BLAS threading. VJPs recompute any
auxiliary quantities from the saved input/output values instead of caching
extra buffers, which keeps activation byte accounting equal to the set of
saved graph values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ShapeError

Array = np.ndarray


def _ein(subscripts: str, *operands: Array) -> Array:
    return np.einsum(subscripts, *operands, optimize=False)


@dataclass(frozen=True)
class OpDef:
    name: str
    n_inputs: int
    fwd: Callable[[list[Array], dict], Array]
    vjp: Callable[[list[Array], Array, Array, dict], list[Array | None]]


OPS: dict[str, OpDef] = {}


def _register(name: str, n_inputs: int):
    def wrap(pair):
        fwd, vjp = pair
        OPS[name] = OpDef(name, n_inputs, fwd, vjp)
        return pair

    return wrap


def _check(cond: bool, op: str, message: str) -> None:
    if not cond:
        raise ShapeError(op, message)


# --- matrix multiply against a 2-D weight (2-D or 3-D activations) ---

def _matmul_fwd(ins, attrs):
    x, w = ins
    _check(w.ndim == 2, "matmul", f"weight must be 2-D, got shape {w.shape}")
    _check(
        x.ndim in (2, 3) and x.shape[-1] == w.shape[0],
        "matmul",
        f"inner extents do not match: {x.shape} @ {w.shape}",
    )
    if x.ndim == 2:
        return _ein("bi,io->bo", x, w)
    return _ein("bsi,io->bso", x, w)


def _matmul_vjp(ins, out, g, attrs):
    x, w = ins
    if x.ndim == 2:
        return [_ein("bo,io->bi", g, w), _ein("bi,bo->io", x, g)]
    return [_ein("bso,io->bsi", g, w), _ein("bsi,bso->io", x, g)]


_register("matmul", 2)((_matmul_fwd, _matmul_vjp))


# --- batched matmul for attention: [B,H,m,k] @ [B,H,k,n] ---

def _bmm_fwd(ins, attrs):
    a, b = ins
    _check(
        a.ndim == 4 and b.ndim == 4 and a.shape[:2] == b.shape[:2]
        and a.shape[3] == b.shape[2],
        "bmm",
        f"incompatible batched operands: {a.shape} @ {b.shape}",
    )
    return _ein("bhij,bhjk->bhik", a, b)


def _bmm_vjp(ins, out, g, attrs):
    a, b = ins
    return [_ein("bhik,bhjk->bhij", g, b), _ein("bhij,bhik->bhjk", a, g)]


_register("bmm", 2)((_bmm_fwd, _bmm_vjp))


# --- elementwise ---

def _add_fwd(ins, attrs):
    a, b = ins
    _check(a.shape == b.shape, "add", f"shape mismatch: {a.shape} vs {b.shape}")
    return a + b


_register("add", 2)((_add_fwd, lambda ins, out, g, attrs: [g, g]))


def _mul_fwd(ins, attrs):
    a, b = ins
    _check(a.shape == b.shape, "mul", f"shape mismatch: {a.shape} vs {b.shape}")
    return a * b


_register("mul", 2)(
    (_mul_fwd, lambda ins, out, g, attrs: [g * ins[1], g * ins[0]])
)


def _add_bias_fwd(ins, attrs):
    x, b = ins
    _check(
        b.ndim == 1 and x.shape[-1] == b.shape[0],
        "add_bias",
        f"bias {b.shape} does not broadcast over {x.shape}",
    )
    return x + b


def _add_bias_vjp(ins, out, g, attrs):
    lead = tuple(range(g.ndim - 1))
    return [g, np.sum(g, axis=lead)]


_register("add_bias", 2)((_add_bias_fwd, _add_bias_vjp))


def _scale_fwd(ins, attrs):
    return ins[0] * attrs["factor"]


_register("scale", 1)(
    (_scale_fwd, lambda ins, out, g, attrs: [g * attrs["factor"]])
)


_register("tanh", 1)(
    (
        lambda ins, attrs: np.tanh(ins[0]),
        lambda ins, out, g, attrs: [g * (1.0 - out * out)],
    )
)

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def _gelu_fwd(ins, attrs):
    x = ins[0]
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_K * x**3)))


def _gelu_vjp(ins, out, g, attrs):
    x = ins[0]
    t = np.tanh(_GELU_C * (x + _GELU_K * x**3))
    du = _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
    return [g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)]


_register("gelu", 1)((_gelu_fwd, _gelu_vjp))


# --- embedding lookup: ids are index data, never differentiated ---

def _embedding_fwd(ins, attrs):
    ids, table = ins
    _check(table.ndim == 2, "embedding", f"table must be 2-D, got {table.shape}")
    _check(
        ids.dtype.kind == "i",
        "embedding",
        f"ids must be integers, got dtype {ids.dtype}",
    )
    _check(
        ids.size == 0 or (ids.min() >= 0 and ids.max() < table.shape[0]),
        "embedding",
        f"ids out of range for vocab {table.shape[0]}",
    )
    return table[ids]


def _embedding_vjp(ins, out, g, attrs):
    ids, table = ins
    dtable = np.zeros_like(table)
    # np.add.at is an unbuffered scatter-add: repeated ids accumulate in
    # index order, which keeps the reduction order fixed.
    np.add.at(dtable, ids.reshape(-1), g.reshape(-1, table.shape[1]))
    return [None, dtable]


_register("embedding", 2)((_embedding_fwd, _embedding_vjp))


# --- sinusoidal position offsets (constant, parameter-free) ---

def sinusoidal_table(seq_len: int, width: int) -> Array:
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    idx = np.arange(width, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / width)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def _add_pos_fwd(ins, attrs):
    x = ins[0]
    _check(x.ndim == 3, "add_pos", f"expected [batch, seq, width], got {x.shape}")
    return x + sinusoidal_table(x.shape[1], x.shape[2])


_register("add_pos", 1)((_add_pos_fwd, lambda ins, out, g, attrs: [g]))


# --- RMS layer normalization with a learned scale vector ---

def _rmsnorm_fwd(ins, attrs):
    x, s = ins
    _check(
        s.ndim == 1 and x.shape[-1] == s.shape[0],
        "rmsnorm",
        f"scale {s.shape} does not match feature extent of {x.shape}",
    )
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + attrs["eps"])
    return x / r * s


def _rmsnorm_vjp(ins, out, g, attrs):
    x, s = ins
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + attrs["eps"])
    xhat = x / r
    ds = np.sum(g * xhat, axis=tuple(range(x.ndim - 1)))
    dx = (g * s - xhat * np.mean(g * s * xhat, axis=-1, keepdims=True)) / r
    return [dx, ds]


_register("rmsnorm", 2)((_rmsnorm_fwd, _rmsnorm_vjp))


# --- softmax over the last axis ---

def _softmax_fwd(ins, attrs):
    x = ins[0]
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def _softmax_vjp(ins, out, g, attrs):
    inner = np.sum(g * out, axis=-1, keepdims=True)
    return [out * (g - inner)]


_register("softmax", 1)((_softmax_fwd, _softmax_vjp))


# --- attention head reshapes ---

def _split_heads_fwd(ins, attrs):
    x = ins[0]
    heads = attrs["heads"]
    _check(
        x.ndim == 3 and x.shape[2] % heads == 0,
        "split_heads",
        f"width of {x.shape} not divisible into {heads} heads",
    )
    b, s, h = x.shape
    return x.reshape(b, s, heads, h // heads).transpose(0, 2, 1, 3).copy()


def _split_heads_vjp(ins, out, g, attrs):
    b, s, h = ins[0].shape
    return [g.transpose(0, 2, 1, 3).reshape(b, s, h).copy()]


_register("split_heads", 1)((_split_heads_fwd, _split_heads_vjp))


def _merge_heads_fwd(ins, attrs):
    x = ins[0]
    _check(x.ndim == 4, "merge_heads", f"expected [b, heads, seq, dh], got {x.shape}")
    b, nh, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, nh * dh).copy()


def _merge_heads_vjp(ins, out, g, attrs):
    b, nh, s, dh = ins[0].shape
    return [g.reshape(b, s, nh, dh).transpose(0, 2, 1, 3).copy()]


_register("merge_heads", 1)((_merge_heads_fwd, _merge_heads_vjp))


def _swap_last2_fwd(ins, attrs):
    x = ins[0]
    _check(x.ndim >= 2, "swap_last2", f"need at least 2 axes, got {x.shape}")
    return np.swapaxes(x, -1, -2).copy()


_register("swap_last2", 1)(
    (_swap_last2_fwd, lambda ins, out, g, attrs: [np.swapaxes(g, -1, -2).copy()])
)


# --- losses (closed-form value + gradient, evaluated off-tape) ---

def squared_error(pred: Array, target: Array) -> tuple[float, Array]:
    """0.5 * sum((pred - target)^2) and its gradient w.r.t. pred.

    Sum reduction (not mean): the gradient of a stacked batch is then the
    sum of per-sample gradients, matching one-step batched gradient
    descent semantics exactly.
    """
    if pred.shape != target.shape:
        raise ShapeError(
            "squared_error", f"prediction {pred.shape} vs target {target.shape}"
        )
    diff = pred - target
    return 0.5 * float(np.sum(diff * diff)), diff


def softmax_cross_entropy(logits: Array, targets: Array) -> tuple[float, Array]:
    """Mean per-position cross entropy and its gradient w.r.t. logits.

    Mean reduction keeps the untrained loss at ~ln(vocab) regardless of
    batch and sequence extents.
    """
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(
            "softmax_cross_entropy",
            f"logits {logits.shape} vs targets {targets.shape}",
        )
    m = np.max(logits, axis=-1, keepdims=True)
    e = np.exp(logits - m)
    z = np.sum(e, axis=-1, keepdims=True)
    logp = logits - m - np.log(z)
    idx = targets[..., None]
    n = targets.size
    loss = -float(np.sum(np.take_along_axis(logp, idx, axis=-1))) / n
    d = e / z / n
    np.put_along_axis(d, idx, np.take_along_axis(d, idx, axis=-1) - 1.0 / n, axis=-1)
    return loss, d
