"""Dense tensors with a precision tag and deterministic 16-bit emulation.

Buffers are held at full machine width (float64) regardless of the tag, so
arithmetic is reproducible across platforms. The tag controls two things:
values of a half-emulated tensor are rounded through IEEE binary16 on every
write (round-to-nearest-even, overflow to infinity), and logical byte
accounting uses 2 bytes per element instead of 4.

Integer-typed payloads (token ids) keep an int64 buffer and are never
rounded; they are index data, not numeric values.
"""
from __future__ import annotations

from enum import Enum

import numpy as np


class Precision(Enum):
    FULL = "full"
    HALF_EMULATED = "half"


_BYTES_PER_ELEMENT = {Precision.FULL: 4, Precision.HALF_EMULATED: 2}

# Largest finite binary16 magnitude; anything above rounds to infinity.
HALF_MAX = 65504.0


def round_through_half(values: np.ndarray) -> np.ndarray:
    """Round float values through binary16 and widen back.

    numpy's float16 conversion implements round-to-nearest-even with
    overflow to signed infinity, which is exactly the emulation contract;
    the overflow warning is suppressed because producing inf is the point.
    """
    with np.errstate(over="ignore"):
        return np.asarray(values, dtype=np.float64).astype(np.float16).astype(np.float64)


class Tensor:
    """A dense numeric array plus precision tag and logical byte size."""

    __slots__ = ("data", "precision")

    def __init__(self, data, precision: Precision = Precision.FULL):
        arr = np.asarray(data)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.int64)
        else:
            arr = arr.astype(np.float64)
            if precision is Precision.HALF_EMULATED:
                arr = round_through_half(arr)
        self.data = arr
        self.precision = precision

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def nbytes(self) -> int:
        """Logical bytes: element count times 2 (half) or 4 (full)."""
        return self.size * _BYTES_PER_ELEMENT[self.precision]

    @property
    def is_integer(self) -> bool:
        return self.data.dtype.kind == "i"

    def assign(self, values) -> None:
        """Overwrite the buffer in place, rounding per the precision tag."""
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ValueError(f"assign shape {arr.shape} != tensor shape {self.data.shape}")
        if self.precision is Precision.HALF_EMULATED:
            arr = round_through_half(arr)
        self.data = arr

    def cast(self, precision: Precision) -> "Tensor":
        """Return a new tensor in the requested precision.

        Half -> full is lossless (the stored values are already binary16
        representable); full -> half rounds, overflowing to infinity.
        """
        return Tensor(self.data.copy(), precision)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), self.precision)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, precision={self.precision.value})"


def bytes_per_element(precision: Precision) -> int:
    return _BYTES_PER_ELEMENT[precision]


def logical_nbytes(n_elements: int, precision: Precision) -> int:
    return n_elements * _BYTES_PER_ELEMENT[precision]
