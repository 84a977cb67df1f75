"""
Budget accounting and combinational diversity
=============================================

Parameter counts for a 7B-scale model, the rank lift that pooling buys at a
fixed budget, the multi-tenant memory bill, and how many distinct adapters
each differentiation scheme can express.
"""

# %%
from moslab.budget import diversity, dims_preset, enumerate_diversity, lora_param_count, solve_equivalent_rank
from moslab.serving import simulate_serving

specs = dims_preset("7b")
for r in (2, 8):
    n = lora_param_count(specs, r)
    print(f"LoRA r={r}: {n:,} params (~{n / 1e6:.2f}M)")

# %%
# The same budget spent on shared pools: every block can route from e*L vectors.
sol = solve_equivalent_rank(specs, lora_param_count(specs, 2))
print("equivalent rank", sol.e, "-> pool rank per layer type", sol.pool_rank["query"])

# %%
# Serving 10,000 independent rank-16 adapters on 70B-class attention projections.
rep = simulate_serving(10_000, "lora", rank=16, precision_bytes=4, dims="70b-attn")
print("\n".join(rep.lines()))

# %%
# Diversity grows from 1 (pure sharing) through subset selection and pair
# dissociation to vector sharding.
L, e, r, l = 4, 2, 3, 2
for v in ("pure", "subset", "dissociation", "sharding"):
    d = diversity(v, L, e, r, l)
    print(f"{v:<13} {d.formula:<12} = {d.combinations}")

# %%
# The closed forms agree with brute-force enumeration on small pools.
print(all(diversity(v, 2, 2, 2, 2).combinations == enumerate_diversity(v, 2, 2, 2, 2)
          for v in ("pure", "subset", "dissociation", "sharding")))
