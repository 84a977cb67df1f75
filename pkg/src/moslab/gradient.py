"""Backpropagation into shared pools, and a finite-difference oracle.

Composition is a gather, so its gradient is a scatter-add: every slice of
``dA_k`` / ``dB_k`` is added to the pool row its index names. A shard used
``t`` times across the model accumulates ``t`` contributions. Accumulation
order is fixed (block, then rank, then shard) so results are reproducible
bit for bit.

Only pool data receives gradients. Index matrices, masks and scalars are
frozen and never differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .composer import ComposedAdapter, ForwardCache, compose, forward
from .errors import RoutingError, ShapeError
from .pool import IndexMatrix, MosState, ShardPool


@dataclass
class PoolGradient:
    side: str
    data: np.ndarray

    @classmethod
    def zeros_like(cls, pool: ShardPool) -> "PoolGradient":
        return cls(pool.side, np.zeros_like(pool.data))


def backward_layer(
    adapter: ComposedAdapter,
    W0: np.ndarray,
    x: np.ndarray,
    dL_dy: np.ndarray,
    mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of one adapted linear layer.

    Args:
        adapter: the composed adapter used in the forward pass.
        W0: frozen base weight, ``o x h``.
        x: layer input (vector or ``n x h`` batch), before dropout.
        dL_dy: upstream gradient with the shape of the layer output.
        mask: the dropout multiplier drawn in forward, if any.

    Returns:
        ``(dA_k, dB_k, dx)``. ``dA_k`` is with respect to ``adapter.A`` as
        stored, i.e. after any random scaling.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(dL_dy, dtype=np.float64)
    vector = x.ndim == 1
    X = np.atleast_2d(x)
    G = np.atleast_2d(g)
    if X.shape[1] != adapter.in_dim or G.shape != (X.shape[0], adapter.out_dim):
        raise ShapeError(f"backward shapes x={x.shape}, dL_dy={g.shape} incompatible with adapter")
    s = adapter.alpha_over_r
    M = None if mask is None else np.atleast_2d(mask)
    Xt = X if M is None else X * M
    hidden = Xt @ adapter.A.T                 # n x r
    gB = G @ adapter.B                        # n x r
    dB = s * (G.T @ hidden)                   # o x r
    dA = s * (gB.T @ Xt)                      # r x h
    dxt = s * (gB @ adapter.A)
    if M is not None:
        dxt = dxt * M
    dx = G @ np.asarray(W0, dtype=np.float64) + dxt
    return dA, dB, (dx[0] if vector else dx)


def backward_from_cache(adapter: ComposedAdapter, W0: np.ndarray, cache: ForwardCache, dL_dy: np.ndarray):
    return backward_layer(adapter, W0, cache.x, dL_dy, mask=cache.mask)


def scatter_to_pools(
    grad_a: PoolGradient,
    grad_b: PoolGradient,
    dA: np.ndarray,
    dB: np.ndarray,
    index_a: IndexMatrix,
    index_b: IndexMatrix,
    row_scales: np.ndarray | None = None,
) -> None:
    """Add one block's ``dA_k`` / ``dB_k`` into the pool gradients in place.

    ``row_scales`` undoes the random-scaling chain rule: the raw shard row
    ``i`` feeds ``A_k`` multiplied by ``s_i``.
    """
    dA = np.asarray(dA, dtype=np.float64)
    if row_scales is not None:
        dA = dA * np.asarray(row_scales)[:, None]
    for grad, d_rows, index in ((grad_a, dA, index_a), (grad_b, np.asarray(dB).T, index_b)):
        l, r = index.entries.shape
        n, shard_len = grad.data.shape
        if d_rows.shape != (r, l * shard_len):
            raise ShapeError(f"side {grad.side}: gradient rows {d_rows.shape} vs index {l}x{r}")
        idx = index.entries.T  # r x l, C order = rank-major then shard
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise RoutingError(f"side {grad.side}: index out of range [0, {n})")
        np.add.at(grad.data, idx, d_rows.reshape(r, l, shard_len))


@dataclass
class BlockBatch:
    """Independent regression problem for one block: ``y = W0 x + adapter``, target ``t``."""

    W0: np.ndarray
    x: np.ndarray
    target: np.ndarray
    mask: np.ndarray | None = None


def _block_loss(y: np.ndarray, t: np.ndarray) -> tuple[float, np.ndarray]:
    diff = np.atleast_2d(y - t)
    n = diff.shape[0]
    return 0.5 * float(np.sum(diff * diff)) / n, diff / n


def layerwise_loss(state: MosState, batches: dict[str, Sequence[BlockBatch]]) -> float:
    """Sum over layer types and blocks of ``0.5 * mean_n ||y - t||^2``."""
    cfg = state.cfg
    total = 0.0
    for name, blocks in batches.items():
        ls = state[name]
        for k, bb in enumerate(blocks):
            ad = compose(ls, k, cfg)
            y = forward(ad, bb.W0, bb.x, training=bb.mask is not None, mask=bb.mask)
            total += _block_loss(y, bb.target)[0]
    return total


def layerwise_loss_and_grads(
    state: MosState, batches: dict[str, Sequence[BlockBatch]]
) -> tuple[float, dict[str, tuple[PoolGradient, PoolGradient]]]:
    """Loss of :func:`layerwise_loss` and its analytic gradient for every pool.

    Per-block backward passes run first; the scatter phase then accumulates
    them block by block in ascending order.
    """
    cfg = state.cfg
    total = 0.0
    grads: dict[str, tuple[PoolGradient, PoolGradient]] = {}
    for name, blocks in batches.items():
        ls = state[name]
        ga, gb = PoolGradient.zeros_like(ls.pool_a), PoolGradient.zeros_like(ls.pool_b)
        per_block = []
        for k, bb in enumerate(blocks):
            ad = compose(ls, k, cfg)
            y = forward(ad, bb.W0, bb.x, training=bb.mask is not None, mask=bb.mask)
            loss, g = _block_loss(y, bb.target)
            total += loss
            dA, dB, _ = backward_layer(ad, bb.W0, bb.x, g.reshape(np.shape(y)), mask=bb.mask)
            per_block.append((k, dA, dB, ad.row_scales))
        for k, dA, dB, scales in per_block:
            scatter_to_pools(ga, gb, dA, dB, ls.index_a[k], ls.index_b[k], row_scales=scales)
        grads[name] = (ga, gb)
    return total, grads


def finite_diff_oracle(
    loss_fn: Callable[[], float], pools: Iterable[ShardPool], eps: float = 1e-5
) -> list[PoolGradient]:
    """Central differences ``(f(theta+eps) - f(theta-eps)) / (2 eps)`` for every pool entry.

    Each entry is perturbed in place and restored exactly afterwards.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    out = []
    for pool in pools:
        g = np.zeros_like(pool.data)
        flat = pool.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss_fn()
            flat[i] = orig - eps
            fm = loss_fn()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
        out.append(PoolGradient(pool.side, g))
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max|n|``, normwise relative error over all entries.

    Entries whose true gradient is ~0 would make an elementwise ratio
    meaningless, so the error is normalized by the largest reference entry.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(float(np.max(np.abs(n))) if n.size else 0.0, 1e-300)
    return float(np.max(np.abs(a - n))) / scale if a.size else 0.0
