"""Shard-pool adapters: low-rank updates routed from globally shared shard pools."""

from .budget import (
    BudgetSpec,
    DiversityReport,
    diversity,
    dims_preset,
    enumerate_diversity,
    lora_param_count,
    serving_memory,
    solve_equivalent_rank,
)
from .composer import ComposedAdapter, apply_random_scaling, compose, delta_w, forward, merge, precompose_all
from .errors import (
    BudgetError,
    ConfigError,
    DivergenceError,
    DomainError,
    LoadError,
    MosError,
    RoutingError,
    ShapeError,
    StaleCacheError,
    TenantError,
)
from .gradient import PoolGradient, backward_layer, finite_diff_oracle, scatter_to_pools
from .numeric import SeededRng, matmul, outer, sample_normal, sample_uniform
from .pool import (
    IndexMatrix,
    LayerState,
    LayerTypeSpec,
    MosConfig,
    MosState,
    ScalingVector,
    ShardPool,
    as_mos,
    init_index_matrices,
    init_pools,
    init_state,
    validate,
    variant_config,
)

__version__ = "0.1.0"
