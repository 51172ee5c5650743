"""Minimal dense-tensor substrate: immutable float arrays plus the handful of
reductions, products, and the stable softmax everything else is built on.

Tensors are row-major, float32 (default) or float64, and immutable after
construction; values can be shared freely across threads. Operations that
would produce NaN/Inf raise instead of returning non-finite values.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

_DTYPES = {
    "float32": np.dtype(np.float32),
    "float64": np.dtype(np.float64),
}

REDUCE_KINDS = ("l2norm", "mean", "std")


def _resolve_dtype(dtype) -> np.dtype:
    if dtype is None:
        return _DTYPES["float32"]
    dt = np.dtype(dtype)
    if dt not in _DTYPES.values():
        raise ValueError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


class Tensor:
    """Immutable dense array with explicit shape, flat row-major storage, and a
    dtype tag (float32 or float64).

    Invariants enforced at construction: every shape entry is >= 1, the flat
    data length equals the product of the shape, and all elements are finite.
    """

    __slots__ = ("_array",)

    def __init__(self, data, dtype=None):
        if isinstance(data, Tensor):
            data = data._array
        if dtype is None and isinstance(data, np.ndarray) and data.dtype in _DTYPES.values():
            dt = data.dtype
        else:
            dt = _resolve_dtype(dtype)
        arr = np.array(data, dtype=dt, order="C", copy=True)
        self._array = _validated(arr)

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        # Internal fast path: takes ownership of a freshly-computed array.
        t = object.__new__(cls)
        t._array = _validated(np.ascontiguousarray(array))
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def ndim(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return self._array.size

    @property
    def dtype(self) -> str:
        return self._array.dtype.name

    @property
    def array(self) -> np.ndarray:
        """Read-only ndarray view of the underlying storage."""
        return self._array

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the elements."""
        return self._array.reshape(-1)

    def astype(self, dtype) -> "Tensor":
        dt = _resolve_dtype(dtype)
        if dt == self._array.dtype:
            return self
        return Tensor._wrap(self._array.astype(dt))

    def to_numpy(self) -> np.ndarray:
        """Writable copy of the contents."""
        return self._array.copy()

    def tolist(self):
        return self._array.tolist()

    def item(self) -> float:
        return float(self._array.item())

    def reshape(self, shape) -> "Tensor":
        total = int(np.prod(shape)) if len(shape) else 1
        if total != self.size or any(s < 1 for s in shape):
            raise ShapeError(f"cannot reshape {self.shape} to {tuple(shape)}")
        return Tensor._wrap(self._array.reshape(shape))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


def _validated(arr: np.ndarray) -> np.ndarray:
    if arr.dtype not in _DTYPES.values():
        raise ValueError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
    if any(s < 1 for s in arr.shape):
        raise ShapeError(f"shape entries must all be >= 1, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("tensor contains NaN or Inf")
    arr.flags.writeable = False
    return arr


def tensor(data, dtype=None) -> Tensor:
    """Convenience constructor; lists default to float32."""
    return Tensor(data, dtype=dtype)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction so finite
    inputs of any magnitude stay finite. Each last-dim slice of the result is
    non-negative and sums to 1."""
    if x.ndim < 1:
        raise ShapeError("softmax_lastdim requires rank >= 1")
    a = x.array
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return Tensor._wrap(e / e.sum(axis=-1, keepdims=True))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched inputs contract the last axis of `a` with the
    second-to-last axis of `b` (np.matmul semantics)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return Tensor._wrap(np.matmul(a.array, b.array))


def reduce(x: Tensor, axis: int, kind: str) -> Tensor:
    """Reduce one axis away. kind is one of 'l2norm' (sqrt of sum of squares),
    'mean', or 'std' (population, divisor N)."""
    if kind not in REDUCE_KINDS:
        raise ValueError(f"unknown reduce kind {kind!r}; expected one of {REDUCE_KINDS}")
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
    a = x.array
    if kind == "l2norm":
        out = np.sqrt(np.square(a).sum(axis=axis))
    elif kind == "mean":
        out = a.mean(axis=axis)
    else:
        out = a.std(axis=axis)
    return Tensor._wrap(np.asarray(out, dtype=a.dtype))


def slice_seq(x: Tensor, start: int, end: int) -> Tensor:
    """Slice [start, end) of the sequence axis (axis 1) of a [B, S, ...] tensor."""
    if x.ndim < 2:
        raise ShapeError("slice_seq requires rank >= 2")
    s = x.shape[1]
    if not (0 <= start < end <= s):
        raise ShapeError(f"slice [{start}, {end}) out of range for sequence length {s}")
    return Tensor._wrap(x.array[:, start:end].copy())


def concat_seq(parts) -> Tensor:
    """Concatenate tensors along the sequence axis (axis 1); inverse of slicing
    a full partition. All non-sequence dimensions must agree."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_seq requires at least one part")
    first = parts[0]
    for p in parts[1:]:
        if p.ndim != first.ndim or p.shape[:1] + p.shape[2:] != first.shape[:1] + first.shape[2:]:
            raise ShapeError(f"incompatible part shapes {first.shape} vs {p.shape}")
    return Tensor._wrap(np.concatenate([p.array for p in parts], axis=1))
