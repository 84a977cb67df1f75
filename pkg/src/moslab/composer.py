"""Materialize per-block low-rank matrices from shard pools.

Row ``i`` of ``A_k`` is the concatenation of the side-A shards named by
column ``i`` of the block's A index matrix; column ``i`` of ``B_k`` is built
the same way from side B. Routing depends only on frozen indices, never on
activations, so every block can be composed ahead of time.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, RoutingError, ShapeError
from .numeric import SeededRng, as_matrix
from .pool import IndexMatrix, LayerState, MosConfig, ScalingVector, ShardPool


@dataclass(frozen=True)
class ComposedAdapter:
    """Materialized ``(A_k, B_k)`` pair for block ``k`` of one layer type.

    ``version`` records the ``(pool_a, pool_b)`` versions the matrices were
    gathered from. ``row_scales`` is set when random scaling has been
    applied; ``A`` then already includes the scaling.
    """

    layer_index: int
    A: np.ndarray
    B: np.ndarray
    alpha_over_r: float
    variant: str
    layer_type: str = ""
    version: tuple[int, int] = (0, 0)
    row_scales: np.ndarray | None = None

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def in_dim(self) -> int:
        return self.A.shape[1]

    @property
    def out_dim(self) -> int:
        return self.B.shape[0]


def route_rows(pool: ShardPool, index: IndexMatrix) -> np.ndarray:
    """Gather an ``r x (l * shard_len)`` matrix whose rows are concatenated shards."""
    e = index.entries
    if e.size and (e.min() < 0 or e.max() >= pool.num_shards):
        raise RoutingError(
            f"side {index.side}, block {index.layer_index}: index out of range [0, {pool.num_shards})"
        )
    l, r = e.shape
    # (r, l, shard_len) -> (r, l * shard_len); fancy indexing copies
    return pool.data[e.T].reshape(r, l * pool.shard_len)


def route_cols(pool: ShardPool, index: IndexMatrix) -> np.ndarray:
    """Gather an ``(l * shard_len) x r`` matrix whose columns are concatenated shards."""
    return np.ascontiguousarray(route_rows(pool, index).T)


def compose(layer: LayerState, k: int, cfg: MosConfig) -> ComposedAdapter:
    """Build the adapter of block ``k``. Pure: repeated calls are bit-identical."""
    if not 0 <= k < layer.spec.num_blocks:
        raise RoutingError(f"block {k} out of range for {layer.spec.name} (L={layer.spec.num_blocks})")
    A = route_rows(layer.pool_a, layer.index_a[k])
    B = route_cols(layer.pool_b, layer.index_b[k])
    if A.shape != (cfg.rank, layer.spec.in_dim) or B.shape != (layer.spec.out_dim, cfg.rank):
        raise ShapeError(f"composed shapes {A.shape}, {B.shape} disagree with config")
    adapter = ComposedAdapter(k, A, B, cfg.scaling, cfg.variant, layer.spec.name, layer.version)
    if cfg.variant == "random_scaling":
        if not layer.scalars:
            raise ConfigError("random_scaling layer has no scalars")
        adapter = apply_random_scaling(adapter, layer.scalars[k])
    return adapter


def apply_random_scaling(adapter: ComposedAdapter, scalars: ScalingVector | np.ndarray) -> ComposedAdapter:
    """Scale row ``i`` of ``A_k`` by ``s_i`` so that ``B A = sum_i s_i b_i (x) a_i``."""
    s = np.asarray(scalars.values if isinstance(scalars, ScalingVector) else scalars, dtype=np.float64)
    if s.shape != (adapter.rank,):
        raise ShapeError(f"need {adapter.rank} scalars, got shape {s.shape}")
    prior = adapter.row_scales if adapter.row_scales is not None else np.ones(adapter.rank)
    return replace(adapter, A=adapter.A * s[:, None], row_scales=prior * s)


def delta_w(adapter: ComposedAdapter) -> np.ndarray:
    """``(alpha / r) * B_k A_k``, shape ``o x h``."""
    return adapter.alpha_over_r * (adapter.B @ adapter.A)


def dropout_mask(rng: SeededRng, shape, rate: float) -> np.ndarray:
    """Inverted-dropout multiplier: ``0`` with probability ``rate``, else ``1/(1-rate)``."""
    keep = rng.generator.random(shape) >= rate
    return keep / (1.0 - rate)


@dataclass
class ForwardCache:
    """Inputs to the adapter branch, kept for the backward pass."""

    x: np.ndarray
    x_tilde: np.ndarray
    mask: np.ndarray | None
    hidden: np.ndarray


def forward(
    adapter: ComposedAdapter,
    W0: np.ndarray,
    x: np.ndarray,
    training: bool = False,
    rng: SeededRng | None = None,
    dropout: float = 0.0,
    mask: np.ndarray | None = None,
    return_cache: bool = False,
):
    """``W0 x + (alpha/r) B_k A_k x~`` for a vector or a batch of row vectors.

    ``x~`` is ``x`` with inverted dropout applied when ``training`` and
    ``dropout > 0``; pass ``mask`` to replay a previously drawn mask.
    """
    W0 = np.asarray(W0, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W0.shape != (adapter.out_dim, adapter.in_dim):
        raise ShapeError(f"W0 shape {W0.shape} != ({adapter.out_dim}, {adapter.in_dim})")
    if x.shape[-1] != adapter.in_dim or x.ndim > 2:
        raise ShapeError(f"input of shape {x.shape} does not match in_dim {adapter.in_dim}")
    if training and (dropout > 0 or mask is not None):
        if mask is None:
            if rng is None:
                raise ValueError("dropout in training mode needs an rng")
            mask = dropout_mask(rng, x.shape, dropout)
        x_tilde = x * mask
    else:
        mask = None
        x_tilde = x
    hidden = x_tilde @ adapter.A.T
    y = x @ W0.T + adapter.alpha_over_r * (hidden @ adapter.B.T)
    if return_cache:
        return y, ForwardCache(x, x_tilde, mask, hidden)
    return y


def merge(adapter: ComposedAdapter, W0: np.ndarray) -> np.ndarray:
    """Fold the adapter into the base weight: ``W0 + delta_w``."""
    W0 = as_matrix(W0)
    if W0.shape != (adapter.out_dim, adapter.in_dim):
        raise ShapeError(f"W0 shape {W0.shape} != ({adapter.out_dim}, {adapter.in_dim})")
    return W0 + delta_w(adapter)


def precompose_all(layer: LayerState, cfg: MosConfig, workers: int | None = None) -> list[ComposedAdapter]:
    """Compose every block of a layer type, optionally on a thread pool.

    Results equal per-block :func:`compose` bit for bit; ``workers=None``
    or ``1`` runs sequentially.
    """
    ks = range(layer.spec.num_blocks)
    if not workers or workers <= 1:
        return [compose(layer, k, cfg) for k in ks]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(lambda k: compose(layer, k, cfg), ks))


def is_stale(adapter: ComposedAdapter, layer: LayerState) -> bool:
    return adapter.version != layer.version
