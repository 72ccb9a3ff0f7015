from __future__ import annotations

# tensor_core.py
import zlib
from typing import Any, Callable, Sequence, TypeVar

import numpy as np
import numpy.typing as npt

Matrix = npt.NDArray[np.float64]

T = TypeVar("T")


class DimensionError(ValueError):
    """Raised when operand shapes do not line up."""


class EmptyDomainError(ValueError):
    """Raised when a random draw is requested from an empty domain."""


def as_matrix(data: Any, rows: int | None = None, cols: int | None = None) -> Matrix:
    """Coerce ``data`` to a finite float64 array, optionally checking its 2-D shape."""
    arr = np.asarray(data, dtype=np.float64)
    if rows is not None or cols is not None:
        if arr.ndim != 2:
            raise DimensionError(f"expected a 2-D matrix, got shape {arr.shape}")
        if rows is not None and arr.shape[0] != rows:
            raise DimensionError(f"expected {rows} rows, got shape {arr.shape}")
        if cols is not None and arr.shape[1] != cols:
            raise DimensionError(f"expected {cols} cols, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix contains NaN or Inf entries")
    return arr


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def sigmoid(x: Matrix) -> Matrix:
    # Split by sign so exp() never overflows.
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: Matrix, axis: int = -1) -> Matrix:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=axis, keepdims=True)


_UNARY: dict[str, Callable[[Matrix], Matrix]] = {
    "sigmoid": sigmoid,
    "tanh": np.tanh,
    "square": np.square,
}
_BINARY: dict[str, Callable[[Matrix, Matrix], Matrix]] = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(op: str, a: Matrix, b: Matrix | None = None) -> Matrix:
    """Apply ``op`` entrywise. Binary ops require exactly equal shapes."""
    if op in _UNARY:
        if b is not None:
            raise TypeError(f"'{op}' takes a single operand")
        return _UNARY[op](np.asarray(a, dtype=np.float64))
    if op in _BINARY:
        if b is None:
            raise TypeError(f"'{op}' takes two operands")
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise DimensionError(f"elementwise '{op}' shape mismatch: {a.shape} vs {b.shape}")
        return _BINARY[op](a, b)
    raise ValueError(f"Unknown elementwise op '{op}'. Valid ops: {', '.join([*_UNARY, *_BINARY])}.")


def axpy(alpha: float, x: Matrix, y: Matrix) -> Matrix:
    """In-place ``y += alpha * x``; returns ``y``."""
    if x.shape != y.shape:
        raise DimensionError(f"axpy shape mismatch: {x.shape} vs {y.shape}")
    y += alpha * x
    return y


def _key_to_int(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key) & 0xFFFFFFFFFFFFFFFF


class Rng:
    """
    Seeded generator: numpy's PCG64 behind a ``Generator``.

    Identical seeds (and identical child keys) yield bit-identical draw
    sequences. Child generators are derived through ``SeedSequence`` so
    per-batch streams stay independent of how many draws earlier batches made.
    """

    def __init__(self, seed: int | Sequence[int] = 0) -> None:
        self._entropy = [_key_to_int(s) for s in seed] if isinstance(seed, (list, tuple)) else [_key_to_int(seed)]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self._entropy)))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    @property
    def seed(self) -> int:
        return self._entropy[0]

    def child(self, *keys: int | str) -> "Rng":
        return Rng([*self._entropy, *(_key_to_int(k) for k in keys)])

    def spawn(self, n: int) -> list["Rng"]:
        return [self.child("spawn", i) for i in range(n)]

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        if not lo < hi:
            raise ValueError(f"uniform requires lo < hi, got [{lo}, {hi})")
        return float(self._gen.uniform(lo, hi))

    def choice(self, n: int) -> int:
        if n < 1:
            raise EmptyDomainError("choice over an empty domain (n=0)")
        return int(self._gen.integers(0, n))

    def sample(self, n: int, k: int) -> npt.NDArray[np.int64]:
        """``k`` distinct indices from ``range(n)`` in random order."""
        if n < 1:
            raise EmptyDomainError("sample over an empty domain (n=0)")
        return self._gen.choice(n, size=k, replace=False)

    def shuffle(self, seq: Sequence[T]) -> list[T]:
        order = self._gen.permutation(len(seq))
        return [seq[int(i)] for i in order]

    def normal(self, scale: float, shape: tuple[int, ...]) -> Matrix:
        return self._gen.normal(0.0, scale, size=shape)

    def uniform_array(self, lo: float, hi: float, shape: tuple[int, ...]) -> Matrix:
        return self._gen.uniform(lo, hi, size=shape)

    def integers(self, lo: int, hi: int, size: int | None = None) -> Any:
        return self._gen.integers(lo, hi, size=size)
