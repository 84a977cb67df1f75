import numpy as np
import pytest

from moslab.composer import compose, forward
from moslab.errors import ShapeError
from moslab.gradient import (
    BlockBatch,
    PoolGradient,
    backward_layer,
    finite_diff_oracle,
    layerwise_loss,
    layerwise_loss_and_grads,
    max_relative_error,
    scatter_to_pools,
)
from moslab.pool import IndexMatrix

from conftest import make_state


def batches_for(state, n=4, seed=0, dropout=None):
    g = np.random.default_rng(seed)
    ls = state["proj"]
    h, o = ls.spec.in_dim, ls.spec.out_dim
    out = []
    for _ in range(ls.spec.num_blocks):
        x = g.standard_normal((n, h))
        mask = None
        if dropout:
            mask = (g.random((n, h)) >= dropout) / (1 - dropout)
        out.append(BlockBatch(g.standard_normal((o, h)), x, g.standard_normal((n, o)), mask))
    return {"proj": out}


CASES = [
    ("lora", {}),
    ("pure_sharing", {}),
    ("random_scaling", {}),
    ("subset_selection", {"rank": 3}),
    ("mos", {"rank": 3, "l": 2, "p": 1}),
    ("mos", {"rank": 3, "l": 4, "p": 0}),
    ("mos", {"rank": 2, "l": 2, "p": 2}),
    ("mos", {"rank": 3, "l": 2, "p": 1, "dissociate": False}),
]


@pytest.mark.parametrize("variant,kw", CASES)
def test_pool_gradients_match_finite_differences(variant, kw):
    state = make_state(variant, h=8, o=4, L=3, e=2, **kw)
    batches = batches_for(state)
    _, grads = layerwise_loss_and_grads(state, batches)
    ls = state["proj"]
    numeric = finite_diff_oracle(lambda: layerwise_loss(state, batches), [ls.pool_a, ls.pool_b], eps=1e-6)
    for analytic, num in zip(grads["proj"], numeric):
        assert max_relative_error(analytic.data, num.data) < 1e-6


def test_gradient_with_dropout_mask():
    state = make_state("mos", h=8, o=4, L=2, e=2, rank=2, l=2, p=1)
    batches = batches_for(state, dropout=0.3)
    _, grads = layerwise_loss_and_grads(state, batches)
    ls = state["proj"]
    numeric = finite_diff_oracle(lambda: layerwise_loss(state, batches), [ls.pool_a, ls.pool_b])
    for a, n in zip(grads["proj"], numeric):
        assert max_relative_error(a.data, n.data) < 1e-6


def test_backward_input_gradient():
    state = make_state("mos", h=8, o=4, L=2, e=2, rank=2, l=2)
    ad = compose(state["proj"], 0, state.cfg)
    g = np.random.default_rng(3)
    W0, x, up = g.standard_normal((4, 8)), g.standard_normal(8), g.standard_normal(4)
    _, _, dx = backward_layer(ad, W0, x, up)
    eps = 1e-6
    num = np.array([
        (up @ forward(ad, W0, x + eps * np.eye(8)[i]) - up @ forward(ad, W0, x - eps * np.eye(8)[i])) / (2 * eps)
        for i in range(8)
    ])
    assert max_relative_error(dx, num) < 1e-7
    with pytest.raises(ShapeError):
        backward_layer(ad, W0, x, np.zeros(5))


def test_scatter_accumulates_repeated_shards():
    # every rank vector points at shard 0: all contributions must add up
    n, slen = 3, 2
    ga, gb = PoolGradient("A", np.zeros((n, slen))), PoolGradient("B", np.zeros((n, slen)))
    ia = IndexMatrix(0, "A", np.zeros((2, 3), dtype=int))
    ib = IndexMatrix(0, "B", np.array([[0, 1, 0], [2, 2, 2]]))
    dA = np.arange(12.0).reshape(3, 4)
    dB = np.arange(12.0).reshape(4, 3)
    scatter_to_pools(ga, gb, dA, dB, ia, ib)
    np.testing.assert_array_equal(ga.data[0], dA.reshape(3, 2, 2).sum(axis=(0, 1)))
    np.testing.assert_array_equal(ga.data[1:], 0)
    expect_b = np.zeros((n, slen))
    for i in range(3):
        for j in range(2):
            expect_b[ib.entries[j, i]] += dB[j * 2:(j + 1) * 2, i]
    np.testing.assert_array_equal(gb.data, expect_b)


def test_scatter_is_deterministic():
    state = make_state("mos", h=8, o=8, L=4, e=2, rank=4, l=2, p=1)
    batches = batches_for(state, seed=5)
    _, g1 = layerwise_loss_and_grads(state, batches)
    _, g2 = layerwise_loss_and_grads(state, batches)
    for a, b in zip(g1["proj"], g2["proj"]):
        assert np.array_equal(a.data, b.data)


def test_scatter_shape_error():
    ga, gb = PoolGradient("A", np.zeros((4, 2))), PoolGradient("B", np.zeros((4, 2)))
    ia = IndexMatrix(0, "A", np.zeros((1, 2), dtype=int))
    with pytest.raises(ShapeError):
        scatter_to_pools(ga, gb, np.zeros((2, 3)), np.zeros((2, 2)), ia, ia)


def test_finite_diff_restores_pools():
    state = make_state("mos", rank=2)
    before = [p.data.copy() for p in state.pools()]
    finite_diff_oracle(lambda: layerwise_loss(state, batches_for(state)), state.pools())
    for b, p in zip(before, state.pools()):
        assert np.array_equal(b, p.data)
    with pytest.raises(ValueError):
        finite_diff_oracle(lambda: 0.0, [], eps=0)


def test_max_relative_error_is_normwise():
    assert max_relative_error(np.array([1.0, 1e-9]), np.array([1.0, 0.0])) == pytest.approx(1e-9)
    assert max_relative_error(np.array([]), np.array([])) == 0.0
