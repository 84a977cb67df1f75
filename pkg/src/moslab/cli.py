"""``moslab`` command line.

Every subcommand prints line-oriented ``key: value`` text; ``--json`` or
``--summary`` additionally writes a machine-readable copy. All randomness
is seeded through ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import adapter_file
from .budget import (
    PRESET_ASSUMPTIONS,
    BudgetSpec,
    dims_preset,
    diversity,
    lora_param_count,
    solve_equivalent_rank,
)
from .composer import compose, delta_w, merge
from .errors import MosError
from .pool import VARIANTS, LayerTypeSpec, MosConfig, init_state, validate, variant_config
from .serving import simulate_serving
from .trainer import TASK_KINDS, TrainRun, ablation_suite, make_task, train

log = logging.getLogger("moslab")


def _millions(n: int) -> str:
    return f"{n:,} (~{n / 1e6:.2f}M)"


def _parse_layer(text: str) -> LayerTypeSpec:
    try:
        name, h, o, L = text.split(":")
        return LayerTypeSpec(name, int(h), int(o), int(L))
    except ValueError:
        raise argparse.ArgumentTypeError(f"layer must look like NAME:H:O:L, got {text!r}") from None


def _dims(args) -> list[LayerTypeSpec]:
    if args.dims_preset == "custom":
        if not args.layer:
            raise MosError("--dims-preset custom needs at least one --layer NAME:H:O:L")
        return list(args.layer)
    if args.dims_preset == "toy":
        return [LayerTypeSpec("proj", 16, 16, 4)]
    return dims_preset(args.dims_preset)


def _add_dims(p: argparse.ArgumentParser, default: str, choices=("toy", "7b", "70b-attn", "custom")):
    p.add_argument("--dims-preset", choices=choices, default=default)
    p.add_argument("--layer", action="append", type=_parse_layer, metavar="NAME:H:O:L",
                   help="layer type for --dims-preset custom (repeatable)")


def _add_cfg(p: argparse.ArgumentParser):
    p.add_argument("--variant", choices=VARIANTS, default="mos")
    p.add_argument("--rank", type=int, default=None, help="per-block rank r (mos, subset_selection)")
    p.add_argument("--e", type=int, default=2, help="equivalent LoRA rank (pool budget)")
    p.add_argument("--l", type=int, default=2, help="shards per vector (mos)")
    p.add_argument("--p", type=int, default=1, help="private rank (mos)")
    p.add_argument("--alpha", type=float, default=16.0)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--tied", action="store_true", help="tie A/B indices (disable pair dissociation)")
    p.add_argument("--seed", type=int, default=0)


def _cfg(args, num_blocks: int) -> MosConfig:
    kw = dict(alpha=args.alpha, dropout=args.dropout, seed=args.seed)
    if args.variant == "mos":
        rank = args.rank if args.rank is not None else 2 * args.e
        cfg = variant_config("mos", args.e, num_blocks, rank=rank, shards_per_vector=args.l,
                             private_rank=args.p, **kw)
        return cfg.replace(dissociate=not args.tied)
    return variant_config(args.variant, args.e, num_blocks, rank=args.rank, **kw)


def _emit(lines, payload, path):
    for line in lines:
        print(line)
    if path:
        Path(path).write_text(json.dumps(payload, indent=2))


def cmd_init(args) -> int:
    specs = _dims(args)
    blocks = {s.num_blocks for s in specs}
    if len(blocks) != 1:
        raise MosError("all layer types must share one block count")
    cfg = _cfg(args, blocks.pop())
    state = init_state(specs, cfg)
    adapter_file.save(state, args.out)
    print(f"wrote: {args.out}")
    print(f"variant: {cfg.variant}")
    print(f"trainable_params: {state.param_count()}")
    print(f"structure_hash: {state.structure_hash()}")
    return 0


def cmd_train(args) -> int:
    task = make_task(args.task, (args.width, args.blocks), seed=args.task_seed,
                     num_samples=args.samples, noise_std=args.noise, teacher_rank=args.teacher_rank)
    cfg = _cfg(args, args.blocks)
    run = train(TrainRun(cfg, task, optimizer=args.optimizer, lr=args.lr, steps=args.steps, seed=args.seed))
    every = max(1, args.log_every)
    for t, loss in enumerate(run.loss_trace):
        if t % every == 0 or t == len(run.loss_trace) - 1:
            print(f"step: {t} loss: {loss:.8e}")
    print(f"final_loss: {run.final_loss:.8e}")
    print(f"trainable_params: {run.state.param_count()}")
    if args.out:
        adapter_file.save(run.state, args.out)
        print(f"wrote: {args.out}")
    if args.summary:
        Path(args.summary).write_text(json.dumps({
            "variant": cfg.variant, "seed": args.seed, "steps": args.steps, "lr": args.lr,
            "optimizer": args.optimizer, "final_loss": run.final_loss,
            "trainable_params": run.state.param_count(), "loss_trace": run.loss_trace,
        }, indent=2))
    return 0


def cmd_ablate(args) -> int:
    task = make_task(args.task, (args.width, args.blocks), seed=args.task_seed,
                     num_samples=args.samples, noise_std=args.noise, teacher_rank=args.teacher_rank)
    rep = ablation_suite(task, equivalent_rank=args.e, seeds=list(range(args.seeds)), steps=args.steps,
                         lr=args.lr, optimizer=args.optimizer, rank=args.rank, shards_per_vector=args.l,
                         private_rank=args.p)
    _emit(rep.lines(), rep.to_dict(), args.summary)
    return 0 if rep.ok else 1


def cmd_compose(args) -> int:
    state = adapter_file.load(args.file)
    ls = state[args.layer_type]
    ad = compose(ls, args.block, state.cfg)
    dw = delta_w(ad)
    print(f"layer_type: {args.layer_type}")
    print(f"block: {args.block}")
    print(f"A_shape: {ad.A.shape[0]}x{ad.A.shape[1]}")
    print(f"B_shape: {ad.B.shape[0]}x{ad.B.shape[1]}")
    print(f"delta_w_fro: {np.linalg.norm(dw):.8e}")
    if args.out:
        np.savez(args.out, A=ad.A, B=ad.B, delta_w=dw)
        print(f"wrote: {args.out}")
    return 0


def cmd_merge(args) -> int:
    state = adapter_file.load(args.file)
    ls = state[args.layer_type]
    ad = compose(ls, args.block, state.cfg)
    if args.w0:
        W0 = np.load(args.w0)
    else:
        W0 = np.random.default_rng(args.w0_seed).standard_normal((ls.spec.out_dim, ls.spec.in_dim))
    merged = merge(ad, W0)
    print(f"merged_shape: {merged.shape[0]}x{merged.shape[1]}")
    print(f"max_abs_change: {np.max(np.abs(merged - W0)):.8e}")
    if args.out:
        np.save(args.out, merged)
        print(f"wrote: {args.out}")
    return 0


def cmd_budget(args) -> int:
    specs = _dims(args)
    bs = BudgetSpec(tuple(specs))
    lines, payload = [], {"dims_preset": args.dims_preset}
    if args.rank is not None:
        n = lora_param_count(bs, args.rank)
        lines.append(f"lora_params: {_millions(n)}")
        payload.update(rank=args.rank, lora_params=n)
    budget = args.budget if args.budget is not None else (
        lora_param_count(bs, args.rank) if args.rank is not None else None)
    if budget is not None:
        eq = solve_equivalent_rank(bs, budget)
        lines.append(f"equivalent_rank: {eq.e}")
        for name, pr in eq.pool_rank.items():
            lines.append(f"pool_rank[{name}]: {pr}")
        payload.update(budget=budget, equivalent_rank=eq.e, pool_rank=eq.pool_rank)
    if args.dims_preset in PRESET_ASSUMPTIONS:
        lines.append(f"assumption: {PRESET_ASSUMPTIONS[args.dims_preset]}")
    _emit(lines, payload, args.json)
    return 0


def cmd_diversity(args) -> int:
    rep = diversity(args.variant, args.L, args.e, args.r, args.l)
    lines = [
        f"variant: {rep.variant}",
        f"combinations: {rep.combinations}",
        f"formula: {rep.formula}",
        f"ordered_with_replacement: {rep.ordered_combinations}",
        f"ordered_formula: {rep.ordered_formula}",
    ]
    _emit(lines, {"variant": rep.variant, "combinations": str(rep.combinations), "formula": rep.formula,
                  "ordered_combinations": str(rep.ordered_combinations)}, args.json)
    return 0


def cmd_simulate(args) -> int:
    dims = _dims(args) if args.dims_preset == "custom" else args.dims_preset
    if args.rank is None and args.budget is None:
        raise MosError("simulate-serving needs --rank or --budget")
    rep = simulate_serving(args.tenants, args.method, rank=args.rank, budget=args.budget,
                           precision_bytes=args.precision_bytes, dims=dims)
    _emit(rep.lines(), rep.to_dict(), args.json)
    return 0


def cmd_validate(args) -> int:
    state = adapter_file.load(args.file)
    rep = validate(state)
    print(rep)
    print(f"valid: {rep.ok}")
    return 0 if rep.ok else 1


def cmd_export(args) -> int:
    adapter_file.export_json(adapter_file.load(args.file), args.out)
    print(f"wrote: {args.out}")
    return 0


def cmd_import(args) -> int:
    adapter_file.save(adapter_file.import_json(args.file), args.out)
    print(f"wrote: {args.out}")
    return 0


def _add_task(p: argparse.ArgumentParser):
    p.add_argument("--task", choices=TASK_KINDS, default="teacher_student_linear")
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--teacher-rank", type=int, default=4)
    p.add_argument("--task-seed", type=int, default=0)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--steps", type=int, default=1000)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moslab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="initialize an adapter state and save it")
    _add_dims(p, "toy")
    _add_cfg(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("train", help="train one variant on a toy task")
    _add_cfg(p)
    _add_task(p)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--out")
    p.add_argument("--summary")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="budget-matched ablation over all variants")
    _add_task(p)
    p.add_argument("--seeds", type=int, default=8)
    p.add_argument("--e", type=int, default=2)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--l", type=int, default=2)
    p.add_argument("--p", type=int, default=1)
    p.add_argument("--summary")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("compose", help="materialize one block's adapter from a file")
    p.add_argument("file")
    p.add_argument("--layer-type", default="proj")
    p.add_argument("--block", type=int, default=0)
    p.add_argument("--out", help="write A, B and delta_w to an .npz file")
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("merge", help="fold one block's adapter into a base weight")
    p.add_argument("file")
    p.add_argument("--layer-type", default="proj")
    p.add_argument("--block", type=int, default=0)
    p.add_argument("--w0", help=".npy base weight (o x h); random if omitted")
    p.add_argument("--w0-seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("budget", help="parameter counts and equivalent rank")
    _add_dims(p, "7b")
    p.add_argument("--rank", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--json")
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("diversity", help="combinational diversity of one matrix pair")
    p.add_argument("--variant", required=True,
                   choices=("pure", "subset", "dissociation", "sharding", "pure_sharing",
                            "subset_selection", "pair_dissociation", "vector_sharding", "mos"))
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--e", type=int, required=True)
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--l", type=int, default=1)
    p.add_argument("--json")
    p.set_defaults(func=cmd_diversity)

    p = sub.add_parser("simulate-serving", help="multi-tenant adapter memory report")
    p.add_argument("--tenants", type=int, required=True)
    p.add_argument("--method", choices=("lora", "mos"), default="lora")
    p.add_argument("--rank", type=int, help="LoRA rank, or equivalent rank e for mos")
    p.add_argument("--budget", type=int, help="per-tenant parameter budget (mos)")
    p.add_argument("--precision-bytes", type=int, choices=(2, 4), default=4)
    _add_dims(p, "70b-attn", choices=("7b", "70b-attn", "custom"))
    p.add_argument("--json")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("validate", help="check every invariant of an adapter file")
    p.add_argument("file")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("export", help="adapter file -> JSON")
    p.add_argument("file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("import", help="JSON -> adapter file")
    p.add_argument("file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_import)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MosError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
