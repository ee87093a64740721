"""Command-line experiment pipeline.

Subcommands: train-base, prune-learn, prune-baseline, finetune, distill,
eval, bench, sweep. Each reads a TOML config plus optional flag overrides and
writes content-addressed artifacts under the output directory.

Exit codes: 0 success, 2 missing checkpoint/artifact dependency, 3 invalid
config, 1 any other failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .config import ExperimentConfig, load_config, stage_hash
from .errors import ConfigError, DivergenceError, MissingArtifactError, \
    NonFiniteLossError
from .runtime import tune_allocator

SUBCOMMANDS = ("train-base", "prune-learn", "prune-baseline", "finetune",
               "distill", "eval", "bench", "sweep")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ditprune",
        description="Learnable depth pruning experiments on a toy diffusion "
                    "transformer.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML experiment config")
        p.add_argument("--out", default=None, help="override output_dir")
        p.add_argument("--seed", type=int, default=None, help="override stage seed")
        p.add_argument("--steps", type=int, default=None,
                       help="override the stage's step budget")
        p.add_argument("--force", action="store_true",
                       help="recompute even if cached artifacts exist")
        p.add_argument("--dry-run", action="store_true",
                       help="print resolved config and planned paths, write nothing")
        if name in ("prune-baseline",):
            p.add_argument("--method", default=None,
                           help="pruning method (oracle, sensitivity, ...)")
        if name in ("prune-learn", "prune-baseline"):
            p.add_argument("--scheme", default=None,
                           help="N:M scheme override, e.g. 1:2")
        if name in ("finetune", "distill"):
            p.add_argument("--method", default=None,
                           help="which prune stage feeds the student")
            p.add_argument("--decision", default=None,
                           help="explicit decision.json path")
            p.add_argument("--teacher", default=None,
                           help="teacher checkpoint (distill only)")
        if name == "eval":
            p.add_argument("--checkpoint", default=None,
                           help="checkpoint to evaluate")
            p.add_argument("--compare", nargs="*", default=None,
                           help="report.json paths to merge into a table")
            p.add_argument("--throughput", action="store_true",
                           help="include a throughput measurement")
        if name == "sweep":
            p.add_argument("--workers", type=int, default=None)
    return parser


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg = replace(cfg, seeds=replace(cfg.seeds, base=args.seed))
    if args.steps is not None:
        if args.command == "train-base":
            cfg = replace(cfg, train=replace(cfg.train, steps=args.steps))
        elif args.command in ("prune-learn", "prune-baseline"):
            cfg = replace(cfg, prune=replace(cfg.prune, steps=args.steps))
        elif args.command in ("finetune", "distill"):
            cfg = replace(cfg, recover=replace(cfg.recover, steps=args.steps))
    scheme = getattr(args, "scheme", None)
    if scheme is not None:
        try:
            n_str, m_str = scheme.split(":")
            n_keep, m_block = int(n_str), int(m_str)
        except ValueError as exc:
            raise ConfigError(f"bad --scheme {scheme!r}, expected N:M") from exc
        cfg = replace(cfg, prune=replace(cfg.prune, n_keep=n_keep,
                                         m_block=m_block))
    method = getattr(args, "method", None)
    if method is not None:
        cfg = replace(cfg, prune=replace(cfg.prune, method=method))
    return cfg


def _planned_paths(cfg: ExperimentConfig, args) -> list[str]:
    out = args.out if args.out is not None else cfg.output_dir
    seed = cfg.seeds.base
    base_hash = stage_hash(cfg, "train-base", seed)
    paths = [f"{out}/train-base/{base_hash[:16]}/base.tfck"]
    if args.command in ("prune-learn", "prune-baseline", "finetune", "distill"):
        method = ("learnable" if args.command == "prune-learn"
                  else cfg.prune.method)
        prune_hash = stage_hash(cfg, "prune", seed, parent=base_hash,
                                extra={"method": method})
        paths.append(f"{out}/prune/{prune_hash[:16]}/decision.json")
        if args.command in ("finetune", "distill"):
            mode = "finetune" if args.command == "finetune" else "distill"
            rec_hash = stage_hash(cfg, "recover", seed, parent=prune_hash,
                                  extra={"mode": mode})
            paths.append(f"{out}/recover/{rec_hash[:16]}/student.tfck")
    return paths


def _main(argv) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config)
    cfg = _apply_overrides(cfg, args)
    out = args.out
    seed = cfg.seeds.base

    if args.dry_run:
        print(json.dumps({"resolved_config": cfg.resolved(),
                          "output_dir": out if out else cfg.output_dir,
                          "planned": _planned_paths(cfg, args)},
                         sort_keys=True, indent=2))
        return 0

    if args.command == "train-base":
        path, digest = pipeline.ensure_base(
            cfg, out, force=args.force,
            log=lambda step, loss: print(f"step {step}: loss {loss:.4f}"))
        print(f"base checkpoint: {path} (hash {digest[:16]})")
    elif args.command == "prune-learn":
        path, digest = pipeline.run_prune(cfg, "learnable", seed, out,
                                          force=args.force)
        print(f"decision: {path} (hash {digest[:16]})")
    elif args.command == "prune-baseline":
        method = cfg.prune.method
        if method == "learnable":
            raise ConfigError("prune-baseline needs a non-learnable --method")
        path, digest = pipeline.run_prune(cfg, method, seed, out,
                                          force=args.force)
        print(f"decision: {path} (hash {digest[:16]})")
    elif args.command in ("finetune", "distill"):
        mode = args.command
        method = args.method if args.method else cfg.prune.method
        decision = Path(args.decision) if args.decision else None
        teacher = Path(args.teacher) if args.teacher else None
        path, digest = pipeline.run_recover(
            cfg, method, seed, mode, out, force=args.force,
            decision_path=decision, teacher_path=teacher)
        print(f"student checkpoint: {path} (hash {digest[:16]})")
    elif args.command == "eval":
        if args.compare is not None:
            out_path = Path(out if out else cfg.output_dir) / "comparison.csv"
            pipeline.compare_reports([Path(p) for p in args.compare], out_path)
            print(f"comparison table: {out_path}")
        else:
            if args.checkpoint is None:
                raise ConfigError("eval needs --checkpoint or --compare")
            path = pipeline.run_eval(cfg, Path(args.checkpoint), seed, out,
                                     force=args.force,
                                     with_throughput=args.throughput)
            print(f"report: {path}")
    elif args.command == "bench":
        path = pipeline.run_bench(cfg, out, force=args.force)
        print(f"benchmark: {path}")
    elif args.command == "sweep":
        path = pipeline.run_sweep(cfg, args.config, out, workers=args.workers)
        print(f"comparison table: {path}")
    return 0


def main(argv=None) -> int:
    tune_allocator()
    try:
        return _main(argv if argv is not None else sys.argv[1:])
    except MissingArtifactError as exc:
        print(f"error: missing required artifact: {exc}", file=sys.stderr)
        print("hint: run the upstream stage first (expected path above)",
              file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except (DivergenceError, NonFiniteLossError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())
