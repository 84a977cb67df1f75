"""Parameter accounting, equivalent-rank solving and combinational diversity.

Counts are exact Python integers throughout; binomials of shard pools
overflow 64 bits long before the grids we check are exhausted.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable

from .errors import BudgetError, DomainError
from .pool import LayerTypeSpec

PROJECTIONS_ATTN = ("query", "key", "value", "output")


def llama2_7b() -> list[LayerTypeSpec]:
    """All seven projection types of a 32-block, 4096-wide model with 11008-wide MLP."""
    d, ff, L = 4096, 11008, 32
    return [
        *(LayerTypeSpec(n, d, d, L) for n in PROJECTIONS_ATTN),
        LayerTypeSpec("up", d, ff, L),
        LayerTypeSpec("gate", d, ff, L),
        LayerTypeSpec("down", ff, d, L),
    ]


def llama2_70b_attention() -> list[LayerTypeSpec]:
    """Query/key/value/output projections only, 8192 wide, 80 blocks, no grouped KV."""
    return [LayerTypeSpec(n, 8192, 8192, 80) for n in PROJECTIONS_ATTN]


DIMS_PRESETS = {
    "7b": llama2_7b,
    "70b-attn": llama2_70b_attention,
}

PRESET_ASSUMPTIONS = {
    "7b": "q,k,v,o,up,gate,down adapted; h=4096, ffn=11008, L=32",
    "70b-attn": "attention projections q,k,v,o only; h=o=8192 (no GQA), L=80",
}


def dims_preset(name: str) -> list[LayerTypeSpec]:
    try:
        return DIMS_PRESETS[name]()
    except KeyError:
        raise DomainError(f"unknown dims preset {name!r}; choose from {sorted(DIMS_PRESETS)}") from None


@dataclass(frozen=True)
class BudgetSpec:
    """Model dimensions plus either a LoRA rank or an explicit parameter budget."""

    layer_types: tuple[LayerTypeSpec, ...]
    r_lora: int | None = None
    param_budget: int | None = None
    bytes_per_param: int = 4

    def __post_init__(self):
        object.__setattr__(self, "layer_types", tuple(self.layer_types))
        if not self.layer_types:
            raise DomainError("BudgetSpec needs at least one layer type")
        if self.bytes_per_param < 1:
            raise DomainError("bytes_per_param must be positive")

    @property
    def per_rank(self) -> int:
        """Parameters added by one unit of LoRA rank: ``sum L * (h + o)``."""
        return sum(t.num_blocks * (t.in_dim + t.out_dim) for t in self.layer_types)

    def budget(self) -> int:
        if self.param_budget is not None:
            return self.param_budget
        if self.r_lora is not None:
            return lora_param_count(self, self.r_lora)
        raise DomainError("BudgetSpec has neither r_lora nor param_budget")


def _as_budget_spec(spec) -> BudgetSpec:
    if isinstance(spec, BudgetSpec):
        return spec
    return BudgetSpec(tuple(spec))


def lora_param_count(spec: BudgetSpec | Iterable[LayerTypeSpec], r: int) -> int:
    """``sum over layer types of L * r * (h + o)``."""
    if r < 0:
        raise DomainError("rank must be non-negative")
    return r * _as_budget_spec(spec).per_rank


def mos_param_count(spec: BudgetSpec | Iterable[LayerTypeSpec], equivalent_rank: int) -> int:
    """Pool parameters at equivalent rank ``e``: ``l*e*L`` shards of ``h/l`` plus ``o/l`` per type."""
    return lora_param_count(spec, equivalent_rank)


@dataclass(frozen=True)
class EquivalentRank:
    e: int
    budget: int
    pool_rank: dict[str, int] = field(default_factory=dict)


def solve_equivalent_rank(spec: BudgetSpec | Iterable[LayerTypeSpec], param_budget: int) -> EquivalentRank:
    """Invert the budget: the uniform ``e`` with ``e * sum L (h + o) == param_budget``.

    Raises:
        BudgetError: if no integer ``e >= 1`` fits exactly; ``lower``/``upper``
            hold the nearest feasible budgets.
    """
    bs = _as_budget_spec(spec)
    unit = bs.per_rank
    e, rem = divmod(int(param_budget), unit)
    if rem or e < 1:
        lower = e * unit if e >= 1 else None
        upper = (e + 1) * unit
        raise BudgetError(
            f"budget {param_budget} is not a positive multiple of {unit}; "
            f"nearest feasible budgets: {lower} and {upper}",
            lower=lower,
            upper=upper,
        )
    return EquivalentRank(e, int(param_budget), {t.name: e * t.num_blocks for t in bs.layer_types})


def serving_memory(spec: BudgetSpec | Iterable[LayerTypeSpec], r: int, num_tenants: int,
                   bytes_per_param: int = 4) -> int:
    """Bytes held by ``num_tenants`` independent rank-``r`` LoRA adapters."""
    return num_tenants * lora_param_count(spec, r) * bytes_per_param


DIVERSITY_VARIANTS = {
    "pure": "pure_sharing",
    "pure_sharing": "pure_sharing",
    "subset": "subset_selection",
    "subset_selection": "subset_selection",
    "dissociation": "pair_dissociation",
    "pair_dissociation": "pair_dissociation",
    "sharding": "vector_sharding",
    "vector_sharding": "vector_sharding",
    "mos": "vector_sharding",
}


@dataclass(frozen=True)
class DiversityReport:
    """Number of distinct adapter compositions for one differentiation scheme.

    ``combinations`` counts unordered selections per side (binomials).
    ``ordered_combinations`` counts ordered index matrices drawn with
    replacement, ``pool_size ** (r * l)`` per independently indexed side.
    """

    variant: str
    combinations: int
    formula: str
    ordered_combinations: int
    ordered_formula: str


def _check_domain(L: int, e: int, r: int, l: int) -> None:
    if min(L, e, r, l) < 1:
        raise DomainError("L, e, r and l must all be >= 1")
    if r > L * e:
        raise DomainError(f"r={r} exceeds pool size L*e={L * e}")


def diversity(variant: str, L: int, e: int, r: int, l: int = 1) -> DiversityReport:
    """Closed-form combinational diversity of one low-rank matrix pair."""
    try:
        v = DIVERSITY_VARIANTS[variant]
    except KeyError:
        raise DomainError(f"unknown diversity variant {variant!r}") from None
    _check_domain(L, e, r, l)
    n = L * e
    if v == "pure_sharing":
        return DiversityReport(v, math.comb(n, n), f"C({n},{n})", 1, "1")
    if v == "subset_selection":
        return DiversityReport(v, math.comb(n, r), f"C({n},{r})", n**r, f"{n}^{r}")
    if v == "pair_dissociation":
        return DiversityReport(v, math.comb(n, r) ** 2, f"C({n},{r})^2", n ** (2 * r), f"({n}^{r})^2")
    ns, ks = l * n, r * l
    return DiversityReport(v, math.comb(ns, ks) ** 2, f"C({ns},{ks})^2",
                           ns ** (2 * ks), f"({ns}^{ks})^2")


@functools.lru_cache(maxsize=None)
def _distinct_selections(n: int, k: int) -> frozenset[frozenset[int]]:
    """Every distinct k-subset of ``range(n)``, built explicitly."""
    if n <= 16:
        # bitmask sweep: independent of itertools.combinations
        out = set()
        for bits in range(1 << n):
            if bin(bits).count("1") == k:
                out.add(frozenset(i for i in range(n) if bits >> i & 1))
        return frozenset(out)
    return frozenset(frozenset(c) for c in itertools.combinations(range(n), k))


def enumerate_diversity(variant: str, L: int, e: int, r: int, l: int = 1) -> int:
    """Brute-force count of distinct index assignments; for cross-checking :func:`diversity`."""
    v = DIVERSITY_VARIANTS[variant]
    _check_domain(L, e, r, l)
    n = L * e
    if v == "pure_sharing":
        # every block takes the whole pool; only one assignment exists
        return len({frozenset(range(n))})
    if v == "subset_selection":
        return len(_distinct_selections(n, r))
    if v == "pair_dissociation":
        side = _distinct_selections(n, r)
    else:
        side = _distinct_selections(l * n, r * l)
    return len({(a, b) for a in side for b in side})
