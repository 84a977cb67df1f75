"""Multi-tenant serving simulator: registry, precompute cache, hot swap, memory.

Nothing here generates tokens. The simulator tracks which adapters are
resident, how many bytes they hold, and whether cached compositions still
match the pools they were gathered from.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

from .budget import (
    PRESET_ASSUMPTIONS,
    BudgetSpec,
    dims_preset,
    lora_param_count,
    solve_equivalent_rank,
)
from .composer import ComposedAdapter, forward, is_stale, merge, precompose_all
from .errors import DomainError, StaleCacheError, TenantError
from .pool import LayerTypeSpec, MosState

TENANT_STATES = ("registered", "composed", "merged")


@dataclass(frozen=True)
class AdapterDescriptor:
    """Config-only adapter, for accounting at scales we never materialize.

    ``lora`` uses ``rank``; ``mos`` uses ``equivalent_rank`` or, failing
    that, ``param_budget`` resolved against the registry dims.
    """

    method: str
    rank: int | None = None
    equivalent_rank: int | None = None
    param_budget: int | None = None

    def param_count(self, dims: BudgetSpec) -> int:
        if self.method == "lora":
            if self.rank is None:
                raise DomainError("lora descriptor needs a rank")
            return lora_param_count(dims, self.rank)
        if self.method == "mos":
            if self.equivalent_rank is not None:
                return lora_param_count(dims, self.equivalent_rank)
            if self.param_budget is not None:
                return solve_equivalent_rank(dims, self.param_budget).budget
            raise DomainError("mos descriptor needs equivalent_rank or param_budget")
        raise DomainError(f"unknown adapter method {self.method!r}")


AdapterRef = Union[MosState, AdapterDescriptor]


@dataclass
class TenantRecord:
    tenant_id: str
    adapter_ref: AdapterRef
    state: str = "registered"
    memory_bytes: int = 0

    @property
    def materialized(self) -> bool:
        return isinstance(self.adapter_ref, MosState)


@dataclass(frozen=True)
class SwapEvent:
    action: str
    tenant_id: str
    bytes_moved: int


class ComposedCache:
    """Composed adapters keyed by ``(tenant, layer type)``, tagged with pool versions."""

    def __init__(self):
        self._entries: dict[tuple[str, str], list[ComposedAdapter]] = {}
        self.hits = 0
        self.misses = 0

    def __contains__(self, key: tuple[str, str]) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def keys(self):
        return self._entries.keys()

    def put(self, tenant_id: str, layer_type: str, adapters: list[ComposedAdapter]) -> None:
        self._entries[(tenant_id, layer_type)] = adapters

    def drop_tenant(self, tenant_id: str) -> None:
        for key in [k for k in self._entries if k[0] == tenant_id]:
            del self._entries[key]

    def read(self, tenant_id: str, state: MosState, layer_type: str) -> list[ComposedAdapter]:
        """Return cached adapters, refusing any whose pool version has moved on."""
        try:
            adapters = self._entries[(tenant_id, layer_type)]
        except KeyError:
            raise StaleCacheError(f"no cached composition for {tenant_id}/{layer_type}") from None
        if any(is_stale(a, state[layer_type]) for a in adapters):
            raise StaleCacheError(
                f"{tenant_id}/{layer_type}: cached at version {adapters[0].version}, "
                f"pools now at {state[layer_type].version}"
            )
        return adapters

    def get(self, tenant_id: str, state: MosState, layer_type: str, workers: int | None = None
            ) -> list[ComposedAdapter]:
        """Cached adapters when fresh, otherwise recompose and refill."""
        try:
            adapters = self.read(tenant_id, state, layer_type)
            self.hits += 1
            return adapters
        except StaleCacheError:
            self.misses += 1
        adapters = precompose_all(state[layer_type], state.cfg, workers=workers)
        self.put(tenant_id, layer_type, adapters)
        return adapters


class Registry:
    """Tenants sharing one base model.

    Mutations (register, unregister, swap, merge) are expected from a
    single writer; precompute workers only read frozen pools.
    """

    def __init__(self, base_dims: BudgetSpec | Iterable[LayerTypeSpec], precision: int = 4):
        if precision not in (2, 4):
            raise DomainError("precision must be 2 or 4 bytes per parameter")
        self.base_dims = base_dims if isinstance(base_dims, BudgetSpec) else BudgetSpec(tuple(base_dims))
        self.precision = precision
        self.tenants: dict[str, TenantRecord] = {}
        self.cache = ComposedCache()
        self.log: list[SwapEvent] = []
        self._total = 0

    def __len__(self) -> int:
        return len(self.tenants)

    def adapter_bytes(self, adapter: AdapterRef) -> int:
        if isinstance(adapter, MosState):
            return adapter.param_count() * self.precision
        return adapter.param_count(self.base_dims) * self.precision

    @property
    def total_memory(self) -> int:
        return self._total

    def recount(self) -> int:
        return sum(self.adapter_bytes(t.adapter_ref) for t in self.tenants.values())

    def _check(self) -> None:
        assert self._total == sum(t.memory_bytes for t in self.tenants.values()), "memory accounting drifted"

    def record(self, tenant_id: str) -> TenantRecord:
        try:
            return self.tenants[tenant_id]
        except KeyError:
            raise TenantError(f"unknown tenant {tenant_id!r}") from None

    def register(self, tenant_id: str, adapter: AdapterRef) -> TenantRecord:
        if tenant_id in self.tenants:
            raise TenantError(f"duplicate tenant id {tenant_id!r}")
        rec = TenantRecord(tenant_id, adapter, "registered", self.adapter_bytes(adapter))
        self.tenants[tenant_id] = rec
        self._total += rec.memory_bytes
        self._check()
        return rec

    def register_many(self, ids: Iterable[str], adapter: AdapterRef) -> None:
        """Register ``adapter`` under every id; accounting is updated once per tenant."""
        nbytes = self.adapter_bytes(adapter)
        for tid in ids:
            if tid in self.tenants:
                raise TenantError(f"duplicate tenant id {tid!r}")
            self.tenants[tid] = TenantRecord(tid, adapter, "registered", nbytes)
            self._total += nbytes
        self._check()

    def unregister(self, tenant_id: str) -> None:
        rec = self.record(tenant_id)
        self.cache.drop_tenant(tenant_id)
        del self.tenants[tenant_id]
        self._total -= rec.memory_bytes
        self._check()

    def _compose(self, rec: TenantRecord, workers: int | None = None) -> None:
        if rec.materialized:
            for name in rec.adapter_ref.layers:
                self.cache.get(rec.tenant_id, rec.adapter_ref, name, workers=workers)
        rec.state = "composed"

    def swap(self, out_id: str, in_id: str, workers: int | None = None) -> list[SwapEvent]:
        """Release ``out_id``'s composed matrices and compose ``in_id``.

        Only adapter bytes move; base weights are never touched.
        """
        out_rec, in_rec = self.record(out_id), self.record(in_id)
        if out_id == in_id:
            events = [SwapEvent("noop", in_id, 0)]
        else:
            self.cache.drop_tenant(out_id)
            out_rec.state = "registered"
            self._compose(in_rec, workers=workers)
            events = [SwapEvent("release", out_id, 0), SwapEvent("load", in_id, in_rec.memory_bytes)]
        self.log.extend(events)
        self._check()
        return events

    def adapters(self, tenant_id: str, layer_type: str) -> list[ComposedAdapter]:
        rec = self.record(tenant_id)
        if not rec.materialized:
            raise DomainError(f"tenant {tenant_id!r} is config-only and cannot be composed")
        return self.cache.get(tenant_id, rec.adapter_ref, layer_type)

    def forward(self, tenant_id: str, layer_type: str, k: int, W0: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Serve one adapted projection (dropout off)."""
        return forward(self.adapters(tenant_id, layer_type)[k], W0, x)

    def merge(self, tenant_id: str, layer_type: str, base_weights: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Merged weights for every block of ``layer_type``; marks the tenant merged."""
        merged = [merge(a, W0) for a, W0 in zip(self.adapters(tenant_id, layer_type), base_weights)]
        self.record(tenant_id).state = "merged"
        return merged


def register(registry: Registry, tenant_id: str, adapter: AdapterRef) -> TenantRecord:
    return registry.register(tenant_id, adapter)


def swap(registry: Registry, out_id: str, in_id: str) -> list[SwapEvent]:
    return registry.swap(out_id, in_id)


def precompute_pipeline(registry: Registry, ids: Sequence[str], workers: int | None = None) -> ComposedCache:
    """Compose every listed tenant, concurrently across tenants when ``workers > 1``."""
    recs = [registry.record(t) for t in ids]

    def job(rec: TenantRecord):
        if not rec.materialized:
            return rec, {}
        return rec, {name: precompose_all(ls, rec.adapter_ref.cfg) for name, ls in rec.adapter_ref.layers.items()}

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(job, recs))
    else:
        results = [job(r) for r in recs]
    # single writer: fill the cache after all workers finish
    for rec, composed in results:
        for name, adapters in composed.items():
            registry.cache.put(rec.tenant_id, name, adapters)
        rec.state = "composed"
    return registry.cache


@dataclass
class MemoryReport:
    method: str
    tenants: int
    params_per_tenant: int
    bytes_per_param: int
    total_bytes: int
    assumptions: list[str] = field(default_factory=list)

    @property
    def total_tb(self) -> float:
        return self.total_bytes / 1e12

    def lines(self) -> list[str]:
        return [
            f"method: {self.method}",
            f"tenants: {self.tenants}",
            f"params_per_tenant: {self.params_per_tenant}",
            f"bytes_per_param: {self.bytes_per_param}",
            f"total_bytes: {self.total_bytes}",
            f"total_TB: {self.total_tb:.4f}",
            *(f"assumption: {a}" for a in self.assumptions),
        ]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "tenants": self.tenants,
            "params_per_tenant": self.params_per_tenant,
            "bytes_per_param": self.bytes_per_param,
            "total_bytes": self.total_bytes,
            "total_tb": self.total_tb,
            "assumptions": self.assumptions,
        }


def simulate_serving(
    num_tenants: int,
    method: str = "lora",
    rank: int | None = None,
    budget: int | None = None,
    precision_bytes: int = 4,
    dims: str | Iterable[LayerTypeSpec] = "70b-attn",
) -> MemoryReport:
    """Register ``num_tenants`` identical adapters and report the resident adapter memory.

    For ``mos``, ``rank`` is the equivalent rank ``e``; ``budget`` is a
    per-tenant trainable-parameter budget and overrides ``rank``.
    """
    specs = dims_preset(dims) if isinstance(dims, str) else list(dims)
    reg = Registry(specs, precision=precision_bytes)
    if method == "lora":
        desc = AdapterDescriptor("lora", rank=rank)
    elif method == "mos":
        desc = AdapterDescriptor("mos", equivalent_rank=None if budget else rank, param_budget=budget)
    else:
        raise DomainError(f"unknown method {method!r}")
    reg.register_many((f"tenant-{i}" for i in range(num_tenants)), desc)
    assumptions = [
        f"dims: {PRESET_ASSUMPTIONS[dims] if isinstance(dims, str) else 'custom'}",
        f"precision: {precision_bytes} bytes/param ({'fp32' if precision_bytes == 4 else 'fp16/bf16'})",
        "counted: adapter (pool) parameters only; index matrices and base weights excluded",
    ]
    per = desc.param_count(reg.base_dims)
    assert reg.total_memory == reg.recount()
    return MemoryReport(method, num_tenants, per, precision_bytes, reg.total_memory, assumptions)
