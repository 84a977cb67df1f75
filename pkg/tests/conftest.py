from __future__ import annotations

import numpy as np
import pytest

from moslab.pool import LayerTypeSpec, init_state, variant_config


def randomize_pools(state, seed: int = 0, scale: float = 0.5) -> None:
    """Overwrite every pool with Gaussian values so side B is no longer zero."""
    rng = np.random.default_rng(seed)
    for pool in state.pools():
        pool.data[:] = scale * rng.standard_normal(pool.data.shape)
        pool.mark_dirty()


def make_state(variant="mos", h=8, o=12, L=3, e=2, rank=None, l=1, p=0, seed=0, random=True, **kw):
    spec = LayerTypeSpec("proj", h, o, L)
    if variant == "mos" and rank is None:
        rank = 2
    cfg = variant_config(variant, e, L, rank=rank, shards_per_vector=l, private_rank=p, seed=seed, **kw)
    state = init_state([spec], cfg)
    if random:
        randomize_pools(state, seed + 100)
    return state


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
