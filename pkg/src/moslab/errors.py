"""Exception hierarchy shared by every moslab module."""

from __future__ import annotations


class MosError(Exception):
    """Base class for all moslab errors."""


class ShapeError(MosError, ValueError):
    """Operand dimensions do not agree."""


class ConfigError(MosError, ValueError):
    """A configuration violates a structural requirement (divisibility, ranks, variant)."""


class BudgetError(MosError, ValueError):
    """A parameter budget cannot be resolved exactly.

    ``lower`` and ``upper`` carry the nearest feasible budgets when known.
    """

    def __init__(self, message: str, lower: int | None = None, upper: int | None = None):
        super().__init__(message)
        self.lower = lower
        self.upper = upper


class RoutingError(MosError, IndexError):
    """An index matrix references a shard outside its pool."""


class DomainError(MosError, ValueError):
    """Arguments lie outside the domain of a combinatorial formula."""


class LoadError(MosError):
    """An adapter file is malformed, corrupted or violates an invariant."""


class StaleCacheError(MosError):
    """A cached composition no longer matches the pool version it was built from."""


class DivergenceError(MosError, FloatingPointError):
    """Training produced a non-finite loss."""


class TenantError(MosError, KeyError):
    """Unknown or duplicate tenant id in a serving registry."""

    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""
