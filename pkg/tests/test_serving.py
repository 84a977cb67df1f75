import numpy as np
import pytest

from moslab.budget import dims_preset
from moslab.composer import compose, forward as plain_forward
from moslab.errors import DomainError, StaleCacheError, TenantError
from moslab.serving import (
    AdapterDescriptor,
    Registry,
    precompute_pipeline,
    register,
    simulate_serving,
    swap,
)

from conftest import make_state


def registry_with(n=3):
    reg = Registry([make_state("mos", rank=2, l=2).specs[0]])
    states = [make_state("mos", rank=2, l=2, seed=i) for i in range(n)]
    for i, s in enumerate(states):
        register(reg, f"t{i}", s)
    return reg, states


def test_memory_is_conserved_through_register_swap_unregister():
    reg, states = registry_with()
    per = states[0].param_count() * 4
    assert reg.total_memory == 3 * per == reg.recount()
    swap(reg, "t0", "t1")
    assert reg.total_memory == 3 * per
    reg.unregister("t2")
    assert reg.total_memory == 2 * per == reg.recount()
    with pytest.raises(TenantError):
        reg.register("t0", states[0])
    with pytest.raises(TenantError):
        reg.unregister("nope")


def test_swap_moves_only_the_incoming_adapter():
    reg, states = registry_with()
    ev = reg.swap("t0", "t1")
    assert [(e.action, e.tenant_id) for e in ev] == [("release", "t0"), ("load", "t1")]
    assert ev[1].bytes_moved == states[1].param_count() * 4
    assert reg.tenants["t1"].state == "composed"
    assert ("t1", "proj") in reg.cache and ("t0", "proj") not in reg.cache
    noop = reg.swap("t1", "t1")
    assert noop[0].action == "noop" and noop[0].bytes_moved == 0


def test_cache_detects_stale_pools():
    reg, states = registry_with(1)
    precompute_pipeline(reg, ["t0"])
    assert reg.cache.read("t0", states[0], "proj")
    states[0]["proj"].pool_a.apply_update(np.full_like(states[0]["proj"].pool_a.data, 1e-3))
    with pytest.raises(StaleCacheError):
        reg.cache.read("t0", states[0], "proj")
    fresh = reg.adapters("t0", "proj")
    assert reg.cache.misses == 1
    np.testing.assert_array_equal(fresh[0].A, compose(states[0]["proj"], 0, states[0].cfg).A)


def test_precompute_parallel_matches_sequential():
    reg_a, _ = registry_with(4)
    reg_b, _ = registry_with(4)
    ids = [f"t{i}" for i in range(4)]
    precompute_pipeline(reg_a, ids)
    precompute_pipeline(reg_b, ids, workers=3)
    for key in reg_a.cache.keys():
        for x, y in zip(reg_a.cache._entries[key], reg_b.cache._entries[key]):
            assert np.array_equal(x.A, y.A) and np.array_equal(x.B, y.B)


def test_forward_and_merge_per_tenant():
    reg, states = registry_with(2)
    g = np.random.default_rng(0)
    W0 = [g.standard_normal((12, 8)) for _ in range(3)]
    x = g.standard_normal(8)
    y = reg.forward("t1", "proj", 2, W0[2], x)
    np.testing.assert_array_equal(y, plain_forward(compose(states[1]["proj"], 2, states[1].cfg), W0[2], x))
    merged = reg.merge("t1", "proj", W0)
    np.testing.assert_allclose(merged[2] @ x, y, atol=1e-10)
    assert reg.tenants["t1"].state == "merged"


def test_descriptors():
    specs = dims_preset("7b")
    reg = Registry(specs, precision=2)
    reg.register("a", AdapterDescriptor("lora", rank=2))
    reg.register("b", AdapterDescriptor("mos", param_budget=4_997_120))
    assert reg.total_memory == 2 * 4_997_120 * 2
    with pytest.raises(DomainError):
        reg.adapters("a", "query")
    with pytest.raises(DomainError):
        AdapterDescriptor("lora").param_count(reg.base_dims)
    with pytest.raises(DomainError):
        Registry(specs, precision=8)


def test_simulate_serving_70b():
    rep = simulate_serving(10_000, "lora", rank=16, precision_bytes=4, dims="70b-attn")
    assert rep.total_bytes == 3_355_443_200_000
    assert abs(rep.total_tb - 3.36) / 3.36 < 0.01
    assert any("attention projections" in a for a in rep.assumptions)
    assert any("fp32" in a for a in rep.assumptions)
    mos = simulate_serving(10, "mos", rank=16, dims="70b-attn")
    assert mos.params_per_tenant == rep.params_per_tenant
    with pytest.raises(DomainError):
        simulate_serving(1, "vera", rank=1)
