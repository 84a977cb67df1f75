"""Seeded toy training on synthetic regression tasks.

The default model is a stack of ``L`` square linear blocks. Each block has a
frozen random orthogonal base weight and one adapter-carrying projection, so
all blocks draw from the same pair of shard pools:

    z_{k+1} = W0_k z_k + (alpha / r) B_k A_k dropout(z_k)

The loss is the mean squared error of the stack output against the task
targets, over samples and output coordinates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .composer import compose, forward
from .errors import ConfigError, DivergenceError
from .gradient import PoolGradient, backward_layer, scatter_to_pools
from .numeric import SeededRng
from .pool import LayerTypeSpec, MosConfig, MosState, ShardPool, init_state, variant_config

log = logging.getLogger(__name__)

TASK_KINDS = ("teacher_student_linear", "random_feature_regression")
LAYER_NAME = "proj"


@dataclass
class ToyTask:
    """A frozen dataset plus the frozen base weights of the student stack."""

    kind: str
    width: int
    num_blocks: int
    num_samples: int
    noise_std: float
    seed: int
    base_weights: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray
    teacher_deltas: np.ndarray | None = None

    @property
    def dims(self) -> tuple[int, int]:
        return (self.width, self.num_blocks)

    def layer_spec(self) -> LayerTypeSpec:
        return LayerTypeSpec(LAYER_NAME, self.width, self.width, self.num_blocks)


def _orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def stack_apply(weights: Sequence[np.ndarray], x: np.ndarray) -> np.ndarray:
    for W in weights:
        x = x @ W.T
    return x


def make_task(
    kind: str = "teacher_student_linear",
    dims: tuple[int, int] = (16, 4),
    seed: int = 0,
    num_samples: int = 256,
    noise_std: float = 0.0,
    teacher_rank: int = 4,
    teacher_scale: float = 1.0,
) -> ToyTask:
    """Build a deterministic synthetic task.

    ``teacher_student_linear`` targets come from the same stack with a
    private rank-``teacher_rank`` perturbation added to every block, so a
    LoRA student of rank ``>= teacher_rank`` can fit them exactly when
    ``noise_std == 0``. ``random_feature_regression`` targets are a random
    tanh-feature map of the inputs, which no linear stack realizes.
    """
    if kind not in TASK_KINDS:
        raise ConfigError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")
    d, L = dims
    if d < 1 or L < 1:
        raise ConfigError("task dims must be positive")
    if num_samples < 1:
        raise ConfigError("task needs at least one sample")
    g = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x7A5C])))
    base = np.stack([_orthogonal(g, d) for _ in range(L)])
    X = g.standard_normal((num_samples, d))
    deltas = None
    if kind == "teacher_student_linear":
        t = min(teacher_rank, d)
        deltas = np.stack([
            teacher_scale * (g.standard_normal((d, t)) @ g.standard_normal((t, d))) / d
            for _ in range(L)
        ])
        Y = stack_apply(list(base + deltas), X)
    else:
        G1 = g.standard_normal((d, 4 * d)) / math.sqrt(d)
        G2 = g.standard_normal((4 * d, d)) / math.sqrt(4 * d)
        Y = np.tanh(X @ G1) @ G2
    if noise_std > 0:
        Y = Y + noise_std * g.standard_normal(Y.shape)
    return ToyTask(kind, d, L, num_samples, float(noise_std), seed, base, X, Y, deltas)


def loss_and_grads(
    state: MosState,
    task: ToyTask,
    training: bool = False,
    rng: SeededRng | None = None,
) -> tuple[float, tuple[PoolGradient, PoolGradient]]:
    """MSE of the adapted stack and the scatter-accumulated pool gradients."""
    cfg = state.cfg
    ls = state[LAYER_NAME]
    adapters = [compose(ls, k, cfg) for k in range(task.num_blocks)]
    z = task.inputs
    caches = []
    for k, ad in enumerate(adapters):
        z_next, cache = forward(ad, task.base_weights[k], z, training=training, rng=rng,
                                dropout=cfg.dropout, return_cache=True)
        caches.append(cache)
        z = z_next
    diff = z - task.targets
    loss = float(np.mean(diff * diff))
    g = 2.0 * diff / diff.size

    per_block = [None] * task.num_blocks
    for k in reversed(range(task.num_blocks)):
        dA, dB, g = backward_layer(adapters[k], task.base_weights[k], caches[k].x, g, mask=caches[k].mask)
        per_block[k] = (dA, dB)
    ga, gb = PoolGradient.zeros_like(ls.pool_a), PoolGradient.zeros_like(ls.pool_b)
    for k, (dA, dB) in enumerate(per_block):
        scatter_to_pools(ga, gb, dA, dB, ls.index_a[k], ls.index_b[k], row_scales=adapters[k].row_scales)
    return loss, (ga, gb)


def evaluate(state: MosState, task: ToyTask) -> float:
    cfg = state.cfg
    ls = state[LAYER_NAME]
    z = task.inputs
    for k in range(task.num_blocks):
        z = forward(compose(ls, k, cfg), task.base_weights[k], z)
    diff = z - task.targets
    return float(np.mean(diff * diff))


class SGD:
    def __init__(self, pools: Sequence[ShardPool], lr: float):
        self.pools = list(pools)
        self.lr = lr

    def step(self, grads: Sequence[PoolGradient]) -> None:
        for pool, g in zip(self.pools, grads):
            pool.apply_update(-self.lr * g.data)


class Adam:
    def __init__(self, pools: Sequence[ShardPool], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.pools = list(pools)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.pools]
        self.v = [np.zeros_like(p.data) for p in self.pools]

    def step(self, grads: Sequence[PoolGradient]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, (pool, g) in enumerate(zip(self.pools, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g.data
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g.data**2
            step = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            pool.apply_update(-step)


OPTIMIZERS = {"sgd": SGD, "adam": Adam}


@dataclass
class TrainRun:
    """Configuration and outcome of one training run.

    ``loss_trace[t]`` is the training loss evaluated before update ``t``.
    ``seed`` drives pool/index initialization and dropout; ``None`` falls
    back to ``cfg.seed``.
    """

    cfg: MosConfig
    task: ToyTask
    optimizer: str = "adam"
    lr: float = 1e-3
    steps: int = 1000
    seed: int | None = None
    loss_trace: list[float] = field(default_factory=list)
    final_loss: float | None = None
    state: MosState | None = field(default=None, repr=False)

    @property
    def effective_seed(self) -> int:
        return self.cfg.seed if self.seed is None else self.seed


def train(run: TrainRun) -> TrainRun:
    """Optimize the pools of a fresh state and return a completed copy of ``run``.

    Raises:
        DivergenceError: when the loss becomes NaN or infinite.
    """
    if run.optimizer not in OPTIMIZERS:
        raise ConfigError(f"unknown optimizer {run.optimizer!r}")
    seed = run.effective_seed
    cfg = run.cfg.replace(seed=seed)
    state = init_state([run.task.layer_spec()], cfg)
    ls = state[LAYER_NAME]
    opt = OPTIMIZERS[run.optimizer]([ls.pool_a, ls.pool_b], lr=run.lr)
    drop_rng = SeededRng(seed).spawn(1)
    trace: list[float] = []
    for step in range(run.steps):
        loss, grads = loss_and_grads(state, run.task, training=cfg.dropout > 0, rng=drop_rng)
        if not math.isfinite(loss):
            last = trace[-1] if trace else float("nan")
            raise DivergenceError(
                f"non-finite loss at step {step} (variant={cfg.variant}, lr={run.lr}, "
                f"last finite loss={last:.6g})"
            )
        trace.append(loss)
        opt.step(grads)
    final = evaluate(state, run.task)
    if not math.isfinite(final):
        raise DivergenceError(f"non-finite final loss (variant={cfg.variant}, lr={run.lr})")
    return replace(run, cfg=cfg, loss_trace=trace, final_loss=final, state=state)


ABLATION_VARIANTS = (
    "lora", "pure_sharing", "random_scaling", "subset_selection",
    "mos", "mos-sp", "mos-vs", "mos-pd",
)


def ablation_configs(
    equivalent_rank: int,
    num_blocks: int,
    rank: int,
    shards_per_vector: int,
    private_rank: int,
    subset_rank: int | None = None,
    alpha: float = 16.0,
) -> dict[str, MosConfig]:
    """Budget-matched configs for every ablation variant.

    ``mos-sp`` drops shard privatization (``p = 0``), ``mos-vs`` drops vector
    sharding (``l = 1``) and ``mos-pd`` drops pair dissociation (tied A/B
    indices).
    """
    e, L = equivalent_rank, num_blocks
    mos = variant_config("mos", e, L, rank=rank, shards_per_vector=shards_per_vector,
                         private_rank=private_rank, alpha=alpha)
    return {
        "lora": variant_config("lora", e, L, alpha=alpha),
        "pure_sharing": variant_config("pure_sharing", e, L, alpha=alpha),
        "random_scaling": variant_config("random_scaling", e, L, alpha=alpha),
        "subset_selection": variant_config("subset_selection", e, L,
                                           rank=subset_rank if subset_rank else rank, alpha=alpha),
        "mos": mos,
        "mos-sp": mos.replace(private_rank=0),
        "mos-vs": mos.replace(shards_per_vector=1),
        "mos-pd": mos.replace(dissociate=False),
    }


@dataclass
class VariantResult:
    name: str
    param_count: int
    final_losses: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.final_losses))

    @property
    def std(self) -> float:
        return float(np.std(self.final_losses, ddof=1)) if len(self.final_losses) > 1 else 0.0

    @property
    def sem(self) -> float:
        return self.std / math.sqrt(len(self.final_losses))


@dataclass(frozen=True)
class OrderingCheck:
    """``better`` should reach a mean loss no worse than ``worse`` beyond one pooled SE."""

    better: str
    worse: str
    gap: float
    pooled_se: float

    @property
    def passed(self) -> bool:
        return self.gap <= self.pooled_se

    def __str__(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return (f"[{mark}] mean({self.better}) <= mean({self.worse}): "
                f"gap={self.gap:+.3e}, pooled SE={self.pooled_se:.3e}")


@dataclass
class AblationReport:
    results: dict[str, VariantResult]
    orderings: list[OrderingCheck]
    seeds: list[int]

    @property
    def budgets_match(self) -> bool:
        return len({r.param_count for r in self.results.values()}) == 1

    @property
    def ok(self) -> bool:
        return self.budgets_match and all(o.passed for o in self.orderings)

    def lines(self) -> list[str]:
        out = [f"{'variant':<18}{'params':>8}{'mean':>14}{'std':>14}"]
        for r in self.results.values():
            out.append(f"{r.name:<18}{r.param_count:>8}{r.mean:>14.6e}{r.std:>14.6e}")
        out.extend(str(o) for o in self.orderings)
        return out

    def to_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "budgets_match": self.budgets_match,
            "variants": {
                n: {"param_count": r.param_count, "mean": r.mean, "std": r.std,
                    "final_losses": r.final_losses}
                for n, r in self.results.items()
            },
            "orderings": [
                {"better": o.better, "worse": o.worse, "gap": o.gap,
                 "pooled_se": o.pooled_se, "passed": o.passed}
                for o in self.orderings
            ],
        }


TREND_PAIRS = (
    ("subset_selection", "pure_sharing"),
    ("mos", "mos-sp"),
    ("mos", "mos-vs"),
    ("mos", "mos-pd"),
)


def compare(a: VariantResult, b: VariantResult) -> OrderingCheck:
    se = math.sqrt(a.sem**2 + b.sem**2)
    return OrderingCheck(a.name, b.name, a.mean - b.mean, se)


def ablation_suite(
    task: ToyTask,
    equivalent_rank: int = 2,
    seeds: Sequence[int] = tuple(range(8)),
    steps: int = 1000,
    lr: float = 1e-3,
    optimizer: str = "adam",
    rank: int = 4,
    shards_per_vector: int = 2,
    private_rank: int = 1,
    subset_rank: int | None = None,
    variants: Sequence[str] = ABLATION_VARIANTS,
) -> AblationReport:
    """Train every variant at one shared parameter budget over several seeds."""
    if len(seeds) < 8:
        raise ConfigError("ablation_suite needs at least 8 seeds")
    cfgs = ablation_configs(equivalent_rank, task.num_blocks, rank, shards_per_vector,
                            private_rank, subset_rank)
    results: dict[str, VariantResult] = {}
    for name in variants:
        losses, count = [], None
        for s in seeds:
            run = train(TrainRun(cfgs[name], task, optimizer=optimizer, lr=lr, steps=steps, seed=s))
            losses.append(run.final_loss)
            count = run.state.param_count()
        results[name] = VariantResult(name, count, losses)
        log.info("%s: mean final loss %.4e over %d seeds", name, results[name].mean, len(seeds))
    orderings = [compare(results[a], results[b]) for a, b in TREND_PAIRS
                 if a in results and b in results]
    return AblationReport(results, orderings, list(seeds))
