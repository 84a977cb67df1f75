"""Global shard pools, frozen index matrices and their initialization.

One pair of pools (side ``"A"`` and side ``"B"``) exists per linear-layer
type. Each pool row is a *shard*: a contiguous ``1/l`` slice of an adapter
vector. Shards ``[0, num_public)`` are shared by every block; shards
``[num_public, num_public + num_private)`` are reserved, ``l * p`` of them
per block, and referenced exactly once in the whole model.

Each block ``k`` owns two ``l x r`` index matrices. Entry ``[j, i]`` names the
pool shard placed at slice ``j`` of rank vector ``i``.

The five variants share this representation:

========================  ======  ====  ==========  =================
variant                   r       l     p           index layout
========================  ======  ====  ==========  =================
``lora``                  e       any   r           block-private
``pure_sharing``          e*L     1     0           identity, tied
``random_scaling``        e*L     1     0           identity, tied
``subset_selection``      <= e*L  1     0           sorted mask, tied
``mos``                   any     any   <= r        sampled
========================  ======  ====  ==========  =================
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .errors import BudgetError, ConfigError
from .numeric import SeededRng, sample_normal, sample_uniform

VARIANTS = ("lora", "pure_sharing", "random_scaling", "subset_selection", "mos")
SIDES = ("A", "B")


@dataclass(frozen=True)
class LayerTypeSpec:
    """Shape of one linear-layer type repeated over ``num_blocks`` blocks."""

    name: str
    in_dim: int
    out_dim: int
    num_blocks: int

    def __post_init__(self):
        for attr in ("in_dim", "out_dim", "num_blocks"):
            if int(getattr(self, attr)) < 1:
                raise ConfigError(f"{self.name}: {attr} must be >= 1")

    @property
    def h(self) -> int:
        return self.in_dim

    @property
    def o(self) -> int:
        return self.out_dim

    @property
    def L(self) -> int:
        return self.num_blocks


@dataclass(frozen=True)
class MosConfig:
    """Adapter hyperparameters shared by all layer types of a model.

    Args:
        rank: number of vector pairs per block (``r``).
        equivalent_rank: the LoRA rank with the same trainable parameter
            count (``e``); each pool holds ``l * e * L`` shards.
        shards_per_vector: ``l``, shards concatenated into one vector.
        private_rank: ``p``, trailing rank positions built from private shards.
        variant: one of :data:`VARIANTS`.
        alpha: LoRA scaling numerator; updates are scaled by ``alpha / rank``.
        dropout: inverted-dropout rate on adapter inputs during training.
        seed: seed for pools, index matrices and frozen differentiators.
        dissociate: sample A- and B-side indices independently (pair
            dissociation). ``False`` ties them, which the non-``mos``
            variants always do.
    """

    rank: int
    equivalent_rank: int
    shards_per_vector: int = 1
    private_rank: int = 0
    variant: str = "mos"
    alpha: float = 16.0
    dropout: float = 0.0
    seed: int = 0
    dissociate: bool = True

    def __post_init__(self):
        r, e, l, p = self.rank, self.equivalent_rank, self.shards_per_vector, self.private_rank
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if r < 1 or l < 1 or e < 1:
            raise ConfigError("rank, shards_per_vector and equivalent_rank must be >= 1")
        if not 0 <= p <= r:
            raise ConfigError(f"private_rank must lie in [0, rank], got p={p}, r={r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.variant == "lora":
            if r != e or p != r:
                raise ConfigError("lora requires rank == equivalent_rank == private_rank")
        elif self.variant in ("pure_sharing", "random_scaling", "subset_selection"):
            if l != 1 or p != 0:
                raise ConfigError(f"{self.variant} requires shards_per_vector=1 and private_rank=0")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def tied(self) -> bool:
        return self.variant != "mos" or not self.dissociate

    def replace(self, **changes) -> "MosConfig":
        return replace(self, **changes)

    def pool_counts(self, num_blocks: int) -> tuple[int, int]:
        """``(num_public, num_private)`` shards per side for a layer type with ``num_blocks`` blocks."""
        l, e, p, L = self.shards_per_vector, self.equivalent_rank, self.private_rank, num_blocks
        total = l * e * L
        private = L * l * p
        public = total - private
        if public < 0:
            raise BudgetError(
                f"budget of {total} shards cannot reserve {private} private shards "
                f"(need equivalent_rank >= private_rank)"
            )
        return public, private

    def check_layer(self, spec: LayerTypeSpec) -> None:
        """Raise if this config cannot be realized on ``spec``."""
        l, r, e, p, L = (self.shards_per_vector, self.rank, self.equivalent_rank,
                         self.private_rank, spec.num_blocks)
        if spec.in_dim % l or spec.out_dim % l:
            raise ConfigError(
                f"{spec.name}: dims h={spec.in_dim}, o={spec.out_dim} not divisible by l={l}"
            )
        public, _ = self.pool_counts(L)
        if self.variant in ("pure_sharing", "random_scaling") and r != e * L:
            raise ConfigError(f"{self.variant} requires rank == e*L = {e * L}, got {r}")
        if self.variant == "subset_selection" and r > e * L:
            raise BudgetError(f"subset_selection needs rank <= e*L = {e * L}, got {r}")
        if self.variant == "mos" and p < r and public < r * l:
            raise BudgetError(
                f"{spec.name}: {public} public shards < r*l = {r * l}; "
                f"raise equivalent_rank or lower private_rank"
            )


def variant_config(
    variant: str,
    equivalent_rank: int,
    num_blocks: int,
    rank: int | None = None,
    shards_per_vector: int = 1,
    private_rank: int = 0,
    **kwargs,
) -> MosConfig:
    """Build a budget-matched :class:`MosConfig` for ``variant``.

    Fills in the rank, shard count and private rank each baseline variant is
    pinned to; only ``mos`` and ``subset_selection`` honour ``rank``.
    """
    e, L = equivalent_rank, num_blocks
    if variant == "lora":
        return MosConfig(rank=e, equivalent_rank=e, private_rank=e,
                         shards_per_vector=shards_per_vector, variant=variant, **kwargs)
    if variant in ("pure_sharing", "random_scaling"):
        return MosConfig(rank=e * L, equivalent_rank=e, variant=variant, **kwargs)
    if variant == "subset_selection":
        return MosConfig(rank=rank if rank is not None else max(1, e * L // 2),
                         equivalent_rank=e, variant=variant, **kwargs)
    if variant == "mos":
        if rank is None:
            raise ConfigError("mos requires an explicit rank")
        return MosConfig(rank=rank, equivalent_rank=e, shards_per_vector=shards_per_vector,
                         private_rank=private_rank, variant=variant, **kwargs)
    raise ConfigError(f"unknown variant {variant!r}")


@dataclass
class ShardPool:
    """Trainable shard storage for one (layer type, side).

    ``data`` has shape ``(num_public + num_private, shard_len)``. ``version``
    is bumped by every write made through :meth:`apply_update` or
    :meth:`mark_dirty` so composed caches can detect staleness.
    """

    side: str
    shard_len: int
    num_public: int
    num_private: int
    data: np.ndarray
    trainable: bool = True
    version: int = 0

    @property
    def num_shards(self) -> int:
        return self.num_public + self.num_private

    @property
    def num_params(self) -> int:
        return self.num_shards * self.shard_len

    def private_block(self, k: int, shards_per_block: int) -> np.ndarray:
        start = self.num_public + k * shards_per_block
        return np.arange(start, start + shards_per_block)

    def apply_update(self, delta: np.ndarray) -> None:
        self.data += delta
        self.version += 1

    def mark_dirty(self) -> None:
        self.version += 1


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class IndexMatrix:
    """Frozen ``l x r`` routing table for one block and side."""

    layer_index: int
    side: str
    entries: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "entries", _frozen(np.atleast_2d(self.entries), np.int64))

    @property
    def frozen(self) -> bool:
        return not self.entries.flags.writeable

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape


@dataclass(frozen=True)
class ScalingVector:
    """Frozen per-block differentiator.

    Real-valued with length ``r`` for random scaling; boolean with length
    ``e * L`` and exactly ``r`` true entries for subset selection.
    """

    layer_index: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        object.__setattr__(self, "values", _frozen(v, bool if v.dtype == bool else np.float64))

    @property
    def is_mask(self) -> bool:
        return self.values.dtype == bool


@dataclass
class LayerState:
    """Pools, index matrices and frozen differentiators for one layer type."""

    spec: LayerTypeSpec
    pool_a: ShardPool
    pool_b: ShardPool
    index_a: list[IndexMatrix]
    index_b: list[IndexMatrix]
    scalars: list[ScalingVector] | None = None
    masks: list[ScalingVector] | None = None

    def pool(self, side: str) -> ShardPool:
        return self.pool_a if side == "A" else self.pool_b

    def indices(self, side: str) -> list[IndexMatrix]:
        return self.index_a if side == "A" else self.index_b

    @property
    def version(self) -> tuple[int, int]:
        return (self.pool_a.version, self.pool_b.version)

    @property
    def num_params(self) -> int:
        return self.pool_a.num_params + self.pool_b.num_params


@dataclass
class MosState:
    """Complete adapter state for a model: one :class:`LayerState` per layer type."""

    cfg: MosConfig
    layers: dict[str, LayerState] = field(default_factory=dict)

    def __getitem__(self, name: str) -> LayerState:
        return self.layers[name]

    @property
    def specs(self) -> list[LayerTypeSpec]:
        return [ls.spec for ls in self.layers.values()]

    def pools(self) -> Iterator[ShardPool]:
        for ls in self.layers.values():
            yield ls.pool_a
            yield ls.pool_b

    def param_count(self) -> int:
        return sum(ls.num_params for ls in self.layers.values())

    def structure_hash(self) -> str:
        """SHA-256 over everything frozen: index matrices, masks and scalars."""
        h = hashlib.sha256()
        for name, ls in self.layers.items():
            h.update(name.encode())
            for im in ls.index_a + ls.index_b:
                h.update(im.side.encode())
                h.update(np.ascontiguousarray(im.entries).tobytes())
            for sv in (ls.scalars or []) + (ls.masks or []):
                h.update(np.ascontiguousarray(sv.values).tobytes())
        return h.hexdigest()

    def copy(self) -> "MosState":
        """Deep copy of pool data; frozen structures are shared."""
        layers = {}
        for name, ls in self.layers.items():
            layers[name] = replace(
                ls,
                pool_a=replace(ls.pool_a, data=ls.pool_a.data.copy()),
                pool_b=replace(ls.pool_b, data=ls.pool_b.data.copy()),
                index_a=list(ls.index_a),
                index_b=list(ls.index_b),
            )
        return MosState(self.cfg, layers)


def a_side_bound(in_dim: int) -> float:
    """Uniform init bound for side-A shards; variance ``1/h`` regardless of shard length."""
    return math.sqrt(3.0 / in_dim)


def init_pools(spec: LayerTypeSpec, cfg: MosConfig, rng: SeededRng) -> tuple[ShardPool, ShardPool]:
    """Allocate both pools of a layer type. Side B starts at zero; side A is uniform."""
    cfg.check_layer(spec)
    l = cfg.shards_per_vector
    public, private = cfg.pool_counts(spec.num_blocks)
    n = public + private
    len_a, len_b = spec.in_dim // l, spec.out_dim // l
    data_a = sample_uniform(rng, n * len_a, a_side_bound(spec.in_dim)).reshape(n, len_a)
    data_b = np.zeros((n, len_b))
    return (
        ShardPool("A", len_a, public, private, data_a),
        ShardPool("B", len_b, public, private, data_b),
    )


def init_scalars(spec: LayerTypeSpec, cfg: MosConfig, rng: SeededRng) -> list[ScalingVector]:
    """Standard-normal per-rank scalars, one vector per block."""
    return [ScalingVector(k, sample_normal(rng, cfg.rank)) for k in range(spec.num_blocks)]


def init_masks(spec: LayerTypeSpec, cfg: MosConfig, rng: SeededRng) -> list[ScalingVector]:
    """Boolean selection of ``r`` out of ``e * L`` pooled pairs, one mask per block."""
    n = cfg.equivalent_rank * spec.num_blocks
    masks = []
    for k in range(spec.num_blocks):
        m = np.zeros(n, dtype=bool)
        m[rng.choice_without_replacement(n, cfg.rank)] = True
        masks.append(ScalingVector(k, m))
    return masks


def _private_columns(k: int, cfg: MosConfig, public: int) -> np.ndarray:
    """``l x p`` block of private shard ids owned by block ``k``."""
    l, p = cfg.shards_per_vector, cfg.private_rank
    ids = public + k * l * p + np.arange(l * p)
    # column q holds shards q*l .. q*l + l-1, slice j in row j
    return ids.reshape(p, l).T


def init_index_matrices(
    spec: LayerTypeSpec,
    cfg: MosConfig,
    rng: SeededRng,
    masks: list[ScalingVector] | None = None,
) -> list[IndexMatrix]:
    """Routing tables for every block, ordered ``[A_0, B_0, A_1, B_1, ...]``.

    Public rank columns are drawn uniformly with replacement from the public
    segment; the last ``p`` columns hold the block's reserved private shards.
    """
    cfg.check_layer(spec)
    public, private = cfg.pool_counts(spec.num_blocks)
    l, r, p, L = cfg.shards_per_vector, cfg.rank, cfg.private_rank, spec.num_blocks
    if private != L * l * p:
        raise ConfigError("private capacity does not match L*l*p")
    if cfg.variant == "subset_selection" and masks is None:
        raise ConfigError("subset_selection needs masks to derive its index matrices")

    out: list[IndexMatrix] = []
    for k in range(L):
        if cfg.variant in ("pure_sharing", "random_scaling"):
            ea = np.arange(r).reshape(1, r)
            eb = ea
        elif cfg.variant == "subset_selection":
            ea = np.flatnonzero(masks[k].values).reshape(1, r)
            eb = ea
        else:
            pub_cols = r - p
            priv = _private_columns(k, cfg, public) if p else np.empty((l, 0), dtype=np.int64)
            ea = np.concatenate([rng.integers(public, (l, pub_cols)) if pub_cols else
                                 np.empty((l, 0), dtype=np.int64), priv], axis=1)
            if cfg.tied:
                eb = ea
            else:
                eb = np.concatenate([rng.integers(public, (l, pub_cols)) if pub_cols else
                                     np.empty((l, 0), dtype=np.int64), priv], axis=1)
        out.append(IndexMatrix(k, "A", ea))
        out.append(IndexMatrix(k, "B", eb))
    return out


def init_layer(spec: LayerTypeSpec, cfg: MosConfig, rng: SeededRng) -> LayerState:
    pool_a, pool_b = init_pools(spec, cfg, rng)
    scalars = init_scalars(spec, cfg, rng) if cfg.variant == "random_scaling" else None
    masks = init_masks(spec, cfg, rng) if cfg.variant == "subset_selection" else None
    idx = init_index_matrices(spec, cfg, rng, masks=masks)
    return LayerState(spec, pool_a, pool_b, idx[0::2], idx[1::2], scalars=scalars, masks=masks)


def init_state(specs: list[LayerTypeSpec], cfg: MosConfig, rng: SeededRng | None = None) -> MosState:
    """Initialize pools and routing for every layer type, in order, from one stream."""
    rng = rng if rng is not None else SeededRng(cfg.seed)
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate layer type names: {names}")
    return MosState(cfg, {s.name: init_layer(s, cfg, rng) for s in specs})


def as_mos(state: MosState) -> MosState:
    """Re-express a baseline state as a degenerate ``mos`` state over the same pools.

    Pure sharing becomes ``l=1, p=0`` with tied identity routing, subset
    selection becomes tied routing to the selected pairs, and LoRA becomes
    full privatization ``p=r``. Pools are shared, not copied.

    Raises:
        ConfigError: for ``random_scaling``, whose frozen scalars have no
            counterpart in plain routing.
    """
    cfg = state.cfg
    if cfg.variant == "mos":
        return state
    if cfg.variant == "random_scaling":
        raise ConfigError("random_scaling has no degenerate mos form")
    new = cfg.replace(variant="mos", dissociate=cfg.variant == "lora")
    layers = {
        name: replace(ls, scalars=None, masks=None)
        for name, ls in state.layers.items()
    }
    return MosState(new, layers)


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ValidationReport:
    checks: list[Check] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def add(self, name: str, passed: bool, detail: str = "") -> None:
        self.checks.append(Check(name, bool(passed), detail))

    def __str__(self) -> str:
        return "\n".join(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}"
                         + (f": {c.detail}" if c.detail else "") for c in self.checks)


def validate(state: MosState) -> ValidationReport:
    """Check every structural invariant of ``state``; never raises on bad data."""
    cfg = state.cfg
    rep = ValidationReport()
    l, r, p = cfg.shards_per_vector, cfg.rank, cfg.private_rank
    for name, ls in state.layers.items():
        spec, L = ls.spec, ls.spec.num_blocks
        tag = f"{name}:"
        try:
            cfg.check_layer(spec)
            rep.add(f"{tag}config", True)
        except (ConfigError, BudgetError) as exc:
            rep.add(f"{tag}config", False, str(exc))
            continue
        public, private = cfg.pool_counts(L)
        for side, pool, dim in (("A", ls.pool_a, spec.in_dim), ("B", ls.pool_b, spec.out_dim)):
            rep.add(f"{tag}pool_{side}_counts",
                    pool.num_public == public and pool.num_private == private,
                    f"({pool.num_public}, {pool.num_private}) vs expected ({public}, {private})")
            rep.add(f"{tag}pool_{side}_shape",
                    pool.data.shape == (public + private, dim // l) and pool.shard_len == dim // l,
                    f"{pool.data.shape}")
            rep.add(f"{tag}pool_{side}_finite", bool(np.all(np.isfinite(pool.data))))

            mats = ls.indices(side)
            rep.add(f"{tag}index_{side}_count", len(mats) == L, f"{len(mats)} matrices for L={L}")
            n = pool.num_shards
            private_refs: list[int] = []
            shapes_ok = range_ok = frozen_ok = per_block_ok = True
            for k, im in enumerate(mats):
                shapes_ok &= im.shape == (l, r) and im.layer_index == k and im.side == side
                frozen_ok &= im.frozen
                e = im.entries
                range_ok &= bool(np.all((e >= 0) & (e < n)))
                priv = e[e >= pool.num_public]
                per_block_ok &= priv.size == l * p
                private_refs.extend(int(x) for x in priv.ravel())
            rep.add(f"{tag}index_{side}_shape", shapes_ok, f"expected {l}x{r}")
            rep.add(f"{tag}index_{side}_frozen", frozen_ok)
            rep.add(f"{tag}index_{side}_range", range_ok, f"entries must lie in [0, {n})")
            rep.add(f"{tag}index_{side}_private_per_block", per_block_ok,
                    f"each block must reference exactly l*p = {l * p} private shards")
            counts = np.bincount(np.asarray(private_refs, dtype=np.int64), minlength=n)[pool.num_public:n] \
                if private_refs else np.zeros(private, dtype=np.int64)
            rep.add(f"{tag}index_{side}_private_exclusive",
                    len(private_refs) == private and bool(np.all(counts == 1)),
                    "every private shard must be referenced exactly once")

        if cfg.tied:
            rep.add(f"{tag}tied_indices",
                    all(np.array_equal(a.entries, b.entries) for a, b in zip(ls.index_a, ls.index_b)))
        if cfg.variant == "random_scaling":
            sc = ls.scalars or []
            rep.add(f"{tag}scalars",
                    len(sc) == L and all(s.values.shape == (r,) and not s.is_mask
                                         and np.all(np.isfinite(s.values)) for s in sc),
                    f"need {L} real vectors of length {r}")
        if cfg.variant == "subset_selection":
            ms = ls.masks or []
            n_pairs = cfg.equivalent_rank * L
            ok = len(ms) == L and all(m.is_mask and m.values.shape == (n_pairs,)
                                      and int(m.values.sum()) == r for m in ms)
            rep.add(f"{tag}masks", ok, f"need {L} boolean masks of length {n_pairs} with {r} set")
            if ok:
                rep.add(f"{tag}masks_match_indices",
                        all(np.array_equal(np.flatnonzero(m.values), im.entries[0])
                            for m, im in zip(ms, ls.index_a)))
    return rep
