import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moslab.composer import (
    apply_random_scaling,
    compose,
    delta_w,
    forward,
    is_stale,
    merge,
    precompose_all,
    route_rows,
)
from moslab.errors import RoutingError, ShapeError
from moslab.numeric import SeededRng
from moslab.pool import IndexMatrix

from conftest import make_state


def loop_compose(ls, k):
    """Oracle: build A and B one shard at a time."""
    ia, ib = ls.index_a[k].entries, ls.index_b[k].entries
    l, r = ia.shape
    A = np.zeros((r, ls.spec.in_dim))
    B = np.zeros((ls.spec.out_dim, r))
    sa, sb = ls.pool_a.shard_len, ls.pool_b.shard_len
    for i in range(r):
        for j in range(l):
            A[i, j * sa:(j + 1) * sa] = ls.pool_a.data[ia[j, i]]
            B[j * sb:(j + 1) * sb, i] = ls.pool_b.data[ib[j, i]]
    return A, B


@pytest.mark.parametrize("l,p", [(1, 0), (2, 1), (4, 2), (2, 3)])
def test_compose_matches_loop_oracle(l, p):
    state = make_state("mos", h=8, o=12, L=4, e=3, rank=3, l=l, p=p)
    ls = state["proj"]
    for k in range(4):
        ad = compose(ls, k, state.cfg)
        A, B = loop_compose(ls, k)
        np.testing.assert_array_equal(ad.A, A)
        np.testing.assert_array_equal(ad.B, B)
        np.testing.assert_allclose(delta_w(ad), state.cfg.scaling * B @ A, rtol=1e-12, atol=1e-12)


def test_compose_is_pure_and_copies():
    state = make_state("mos", rank=2, l=2)
    ls = state["proj"]
    a1, a2 = compose(ls, 1, state.cfg), compose(ls, 1, state.cfg)
    assert np.array_equal(a1.A, a2.A) and np.array_equal(a1.B, a2.B)
    a1.A[0, 0] += 1.0
    assert ls.pool_a.data[ls.index_a[1].entries[0, 0], 0] != a1.A[0, 0]


def test_forward_matches_unrolled_and_merge():
    state = make_state("mos", h=8, o=12, rank=3, l=2, p=1, e=3)
    ad = compose(state["proj"], 2, state.cfg)
    g = np.random.default_rng(0)
    W0 = g.standard_normal((12, 8))
    x = g.standard_normal(8)
    y = forward(ad, W0, x)
    expect = W0 @ x + state.cfg.scaling * (ad.B @ (ad.A @ x))
    np.testing.assert_allclose(y, expect, rtol=1e-12)
    np.testing.assert_allclose(merge(ad, W0) @ x, y, rtol=1e-10, atol=1e-12)
    X = g.standard_normal((5, 8))
    np.testing.assert_allclose(forward(ad, W0, X), np.stack([forward(ad, W0, r) for r in X]), rtol=1e-12)


def test_dropout_only_in_training():
    state = make_state("lora", e=2)
    ad = compose(state["proj"], 0, state.cfg)
    W0 = np.eye(12, 8)
    x = np.ones(8)
    assert np.array_equal(forward(ad, W0, x, dropout=0.5), forward(ad, W0, x))
    y, cache = forward(ad, W0, x, training=True, rng=SeededRng(0), dropout=0.5, return_cache=True)
    assert set(np.unique(cache.mask)) <= {0.0, 2.0}
    np.testing.assert_allclose(y, W0 @ x + ad.alpha_over_r * ad.B @ (ad.A @ (x * cache.mask)))
    with pytest.raises(ValueError):
        forward(ad, W0, x, training=True, dropout=0.5)


def test_random_scaling_is_weighted_outer_sum():
    state = make_state("random_scaling", e=2, L=3)
    ls = state["proj"]
    for k in range(3):
        ad = compose(ls, k, state.cfg)
        s = ls.scalars[k].values
        Bp, Ap = ls.pool_b.data.T, ls.pool_a.data
        expect = sum(s[i] * np.outer(Bp[:, i], Ap[i]) for i in range(len(s)))
        np.testing.assert_allclose(delta_w(ad), state.cfg.scaling * expect, rtol=1e-10, atol=1e-12)
        np.testing.assert_array_equal(ad.row_scales, s)


def test_apply_random_scaling_shape_check():
    state = make_state("mos", rank=2)
    ad = compose(state["proj"], 0, state.cfg)
    with pytest.raises(ShapeError):
        apply_random_scaling(ad, np.ones(3))


def test_pure_sharing_blocks_identical():
    state = make_state("pure_sharing", e=2, L=3)
    ads = precompose_all(state["proj"], state.cfg)
    for ad in ads[1:]:
        assert np.array_equal(ad.A, ads[0].A) and np.array_equal(ad.B, ads[0].B)


def test_precompose_parallel_equals_sequential():
    state = make_state("mos", h=8, o=8, L=4, e=2, rank=3, l=2, p=1)
    seq = precompose_all(state["proj"], state.cfg)
    par = precompose_all(state["proj"], state.cfg, workers=4)
    for a, b in zip(seq, par):
        assert np.array_equal(a.A, b.A) and np.array_equal(a.B, b.B) and a.version == b.version


def test_staleness_tracks_pool_updates():
    state = make_state("mos", rank=2)
    ls = state["proj"]
    ad = compose(ls, 0, state.cfg)
    assert not is_stale(ad, ls)
    ls.pool_b.apply_update(np.full_like(ls.pool_b.data, 0.1))
    assert is_stale(ad, ls)
    assert not is_stale(compose(ls, 0, state.cfg), ls)


def test_routing_errors():
    state = make_state("mos", rank=2)
    ls = state["proj"]
    with pytest.raises(RoutingError):
        compose(ls, 3, state.cfg)
    with pytest.raises(RoutingError):
        route_rows(ls.pool_a, IndexMatrix(0, "A", np.array([[0, ls.pool_a.num_shards]])))


def test_forward_shape_errors():
    state = make_state("mos", rank=2)
    ad = compose(state["proj"], 0, state.cfg)
    with pytest.raises(ShapeError):
        forward(ad, np.zeros((8, 12)), np.zeros(8))
    with pytest.raises(ShapeError):
        forward(ad, np.zeros((12, 8)), np.zeros(7))
    with pytest.raises(ShapeError):
        merge(ad, np.zeros((8, 8)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2, 4]), st.integers(1, 4), st.integers(0, 3))
def test_merge_equivalence_property(seed, l, r, p):
    p = min(p, r)
    e = r + p  # leaves L*(e-p) >= r public shards
    state = make_state("mos", h=8, o=4, L=2, e=e, rank=r, l=l, p=p, seed=seed)
    g = np.random.default_rng(seed)
    W0 = g.standard_normal((4, 8))
    X = g.standard_normal((3, 8))
    for ad in precompose_all(state["proj"], state.cfg):
        np.testing.assert_allclose(X @ merge(ad, W0).T, forward(ad, W0, X), rtol=1e-9, atol=1e-10)
