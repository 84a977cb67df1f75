"""
Shard pools and routing
=======================

Build a small adapter state, look at its pools and index matrices, and
compose the per-block low-rank matrices by hand.
"""

# %%
import numpy as np

from moslab import LayerTypeSpec, compose, delta_w, init_state, validate, variant_config

# one layer type, 4 blocks, 8 -> 12 projection
spec = LayerTypeSpec("proj", 8, 12, 4)
cfg = variant_config("mos", equivalent_rank=2, num_blocks=4, rank=3, shards_per_vector=2, private_rank=1)
state = init_state([spec], cfg)
ls = state["proj"]

# %%
# The budget is e * L vectors per side. With l = 2 each vector is split in two,
# so the pool holds l * e * L = 16 shards; the last L * l * p = 8 are private.
print("A pool:", ls.pool_a.data.shape, "public", ls.pool_a.num_public, "private", ls.pool_a.num_private)
print("B pool:", ls.pool_b.data.shape, "all zero:", not ls.pool_b.data.any())
print("trainable params:", state.param_count(), "= e*L*(h+o) =", 2 * 4 * (8 + 12))

# %%
# Column i of an index matrix lists the shards concatenated into rank vector i.
# The last p columns point into the block's own private segment.
for k in range(2):
    print(f"block {k} A-index:\n{ls.index_a[k].entries}")
    print(f"block {k} B-index:\n{ls.index_b[k].entries}")

# %%
# Composition is a gather. B starts at zero, so every block starts at dW = 0.
ad = compose(ls, 0, cfg)
print("A_0", ad.A.shape, "B_0", ad.B.shape, "|dW_0| =", np.linalg.norm(delta_w(ad)))

# %%
# Every structural invariant is checked explicitly.
print(validate(state))
