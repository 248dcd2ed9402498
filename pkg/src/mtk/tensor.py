"""Dense tensor primitives and the memory arena.

Tensors are plain ``numpy.ndarray`` objects in row-major (C) order. The
functions here add the contracts the rest of the toolkit relies on: rank and
shape checks, errors instead of silent infinities, stable softmax with masks
and lowest-index argmax.
"""
from __future__ import annotations

from collections import defaultdict
from typing import Sequence

import numpy as np

from .errors import ArenaExhaustedError, ContractError, DimensionError, NumericError

MAX_RANK = 4

_default_dtype = np.float32


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Switch between float32 (default) and float64 (gradient checking)."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


def check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if not 1 <= len(shape) <= MAX_RANK:
        raise DimensionError(f"rank must be in [1, {MAX_RANK}], got shape {shape}")
    if any(d < 1 for d in shape):
        raise DimensionError(f"every extent must be >= 1, got shape {shape}")
    return shape


def tensor(data, dtype=None) -> np.ndarray:
    """Build a contiguous tensor, validating shape and finiteness."""
    out = np.ascontiguousarray(data, dtype=dtype or _default_dtype)
    if out.ndim == 0:
        out = out.reshape(1)
    check_shape(out.shape)
    if not np.all(np.isfinite(out)):
        raise NumericError("tensor contains non-finite values")
    return out


def broadcast_shape(*shapes: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(*shapes))
    except ValueError:
        raise DimensionError(
            "shapes not broadcastable: " + " vs ".join(str(tuple(s)) for s in shapes)
        ) from None


def matmul_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if len(a) < 2 or len(b) < 2 or a[-1] != b[-2]:
        raise DimensionError(f"matmul shape mismatch: {a} x {b}")
    try:
        lead = np.broadcast_shapes(a[:-2], b[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dims mismatch: {a} x {b}") from None
    return tuple(lead) + (a[-2], b[-1])


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product; leading (batch) dims broadcast pairwise."""
    matmul_shape(a.shape, b.shape)
    return np.matmul(a, b)


_UNARY = {
    "tanh": np.tanh,
    "exp": np.exp,
    "neg": np.negative,
    "relu": lambda x: np.maximum(x, 0),
}


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def ewise(op: str, *operands: np.ndarray) -> np.ndarray:
    """Element-wise operation with trailing-dimension broadcasting."""
    if op in ("add", "sub", "mul", "div"):
        if len(operands) != 2:
            raise ContractError(f"{op} takes two operands")
        a, b = operands
        broadcast_shape(a.shape, b.shape)
        if op == "add":
            return a + b
        if op == "sub":
            return a - b
        if op == "mul":
            return a * b
        if np.any(b == 0):
            raise NumericError("division by zero")
        return a / b
    if len(operands) != 1:
        raise ContractError(f"{op} takes one operand")
    (x,) = operands
    if op == "sigmoid":
        return sigmoid(x)
    if op == "log":
        if np.any(x <= 0):
            raise NumericError("log of non-positive value")
        return np.log(x)
    try:
        return _UNARY[op](x)
    except KeyError:
        raise ContractError(f"unknown element-wise op {op!r}") from None


def _check_axis(t: np.ndarray, axis: int) -> int:
    if not 0 <= axis < t.ndim:
        raise ContractError(f"axis {axis} out of range for rank {t.ndim}")
    return axis


def reduce(op: str, t: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    axis = _check_axis(t, axis)
    if op == "sum":
        out = t.sum(axis=axis, keepdims=keepdims)
    elif op == "mean":
        out = t.mean(axis=axis, keepdims=keepdims)
    elif op == "max":
        out = t.max(axis=axis, keepdims=keepdims)
    elif op == "argmax":
        # numpy returns the first occurrence, i.e. the lowest index on ties
        out = t.argmax(axis=axis)
        if keepdims:
            out = np.expand_dims(out, axis)
    else:
        raise ContractError(f"unknown reduction {op!r}")
    out = np.asarray(out)
    return out.reshape(1) if out.ndim == 0 else out


def _masked_input(t: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return t
    broadcast_shape(mask.shape, t.shape)
    keep = np.broadcast_to(mask, t.shape) > 0
    if not np.all(keep.any(axis=-1)):
        raise NumericError("softmax over a fully masked row")
    return np.where(keep, t, -np.inf)


def softmax(t: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Max-subtracted softmax along the last axis; masked slots get exactly 0."""
    x = _masked_input(t, mask)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(t: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    x = _masked_input(t, mask)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def logsumexp(t: np.ndarray) -> np.ndarray:
    m = t.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(t - m).sum(axis=-1, keepdims=True)))[..., 0]


class Arena:
    """Byte-budgeted pool of reusable buffers.

    Blocks are grouped in power-of-two size classes. ``reset`` returns every
    outstanding block to its free list, so replaying the same allocation
    sequence hands back the same blocks and never grows the high-water mark.
    """

    MIN_BLOCK = 64

    def __init__(self, capacity: int = 1 << 31):
        self.capacity = int(capacity)
        self.reserved = 0  # bytes ever carved out (the high-water mark)
        self.outstanding = 0
        self._free: dict[int, list[np.ndarray]] = defaultdict(list)
        self._live: list[np.ndarray] = []

    @property
    def high_water(self) -> int:
        return self.reserved

    @staticmethod
    def _size_class(nbytes: int) -> int:
        size = Arena.MIN_BLOCK
        while size < nbytes:
            size <<= 1
        return size

    def alloc(self, shape: tuple[int, ...], dtype) -> np.ndarray:
        dtype = np.dtype(dtype)
        nbytes = int(np.prod(shape)) * dtype.itemsize
        size = self._size_class(nbytes)
        free = self._free[size]
        if free:
            block = free.pop()
        else:
            if self.reserved + size > self.capacity:
                raise ArenaExhaustedError(
                    f"arena budget of {self.capacity} bytes exceeded "
                    f"(reserved {self.reserved}, requested {size})"
                )
            block = np.empty(size, dtype=np.uint8)
            self.reserved += size
        self._live.append(block)
        self.outstanding += size
        return block[:nbytes].view(dtype).reshape(shape)

    def reset(self) -> None:
        for block in reversed(self._live):
            self._free[block.nbytes].append(block)
        self._live.clear()
        self.outstanding = 0
