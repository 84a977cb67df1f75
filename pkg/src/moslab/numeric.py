"""Dense float64 linear algebra and seeded random streams.

Matrices are plain row-major ``numpy.ndarray`` objects of dtype float64. The
helpers here only add the shape checks and error types the rest of the
package relies on.

Random streams use numpy's ``PCG64`` bit generator, which yields the same
sequence for the same seed on every platform.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

RNG_ALGORITHM = "PCG64"


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Return ``data`` as a C-contiguous float64 2-D array, optionally checking its shape."""
    m = np.ascontiguousarray(data, dtype=np.float64)
    if m.ndim == 1 and rows is not None and cols is not None:
        if m.size != rows * cols:
            raise ShapeError(f"data length {m.size} != {rows}x{cols}")
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected {cols} cols, got {m.shape[1]}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b`` with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def outer(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Outer product, ``result[i, j] = u[i] * v[j]``."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    return np.multiply.outer(u, v)


class SeededRng:
    """Single-owner random stream seeded from an integer.

    Not safe for concurrent use; give each worker its own instance
    (see :meth:`spawn`).
    """

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, algorithm={self.algorithm!r})"

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def spawn(self, key: int) -> "SeededRng":
        """Independent child stream derived deterministically from (seed, key)."""
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, int(key)])
        child = SeededRng.__new__(SeededRng)
        child.seed = self.seed
        child._gen = np.random.Generator(np.random.PCG64(ss))
        return child

    def uniform(self, n: int, bound: float) -> np.ndarray:
        return sample_uniform(self, n, bound)

    def normal(self, n: int) -> np.ndarray:
        return sample_normal(self, n)

    def integers(self, high: int, size) -> np.ndarray:
        return self._gen.integers(0, high, size=size, dtype=np.int64)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=False)


def sample_uniform(rng: SeededRng, n: int, bound: float) -> np.ndarray:
    """``n`` i.i.d. draws from the closed interval ``[-bound, bound]``."""
    if bound <= 0:
        raise ValueError("bound must be positive")
    if n == 0:
        return np.empty(0, dtype=np.float64)
    # generator.uniform samples [low, high); clip keeps the contract exact under rounding
    x = rng.generator.uniform(-bound, bound, size=n)
    return np.clip(x, -bound, bound)


def sample_normal(rng: SeededRng, n: int) -> np.ndarray:
    """``n`` i.i.d. standard-normal draws."""
    if n == 0:
        return np.empty(0, dtype=np.float64)
    return rng.generator.standard_normal(n)
