"""Config-driven experiment stages shared by the CLI and the sweep workers.

Every stage writes under <output_dir>/<stage>/<hash16>/ where the hash chains
all upstream inputs; an existing complete directory is reused unless forced,
which makes sweeps over shared prefixes cheap and reruns byte-stable.
"""

from __future__ import annotations

import hashlib
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import baselines, distill as distill_mod
from .artifacts import read_json, write_bytes_atomic, write_csv, write_json
from .checkpoint import Checkpoint, serialize
from .config import ExperimentConfig, load_config, stage_hash
from .errors import ConfigError, MissingArtifactError
from .evaluate import EvalReport, build_report, check_task_match, throughput_bench
from .model import ToyDiTModel
from .recover import PruneLearnConfig, apply_decision, learn_pruning
from .sampler import (NMScheme, PruneDecision, block_pattern_count,
                      decision_from_mask, global_search_space_size,
                      search_space_size)
from .task import DiffusionTask
from .train import TrainConfig, train_base

HASH_CHARS = 16


def make_task(cfg: ExperimentConfig) -> DiffusionTask:
    return DiffusionTask(seq_len=cfg.model.seq_len,
                         num_timesteps=cfg.model.num_timesteps,
                         train_size=cfg.task.train_size,
                         heldout_size=cfg.task.heldout_size,
                         seed=cfg.task.seed)


def _stage_dir(cfg: ExperimentConfig, out_dir: str | None, stage: str,
               digest: str) -> Path:
    root = Path(out_dir if out_dir is not None else cfg.output_dir)
    return root / stage / digest[:HASH_CHARS]


def _complete(paths: list[Path]) -> bool:
    return all(p.exists() for p in paths)


def ensure_base(cfg: ExperimentConfig, out_dir: str | None = None,
                force: bool = False, log=None) -> tuple[Path, str]:
    """Train (or reuse) the base checkpoint; returns (path, stage hash)."""
    digest = stage_hash(cfg, "train-base", cfg.seeds.base)
    stage = _stage_dir(cfg, out_dir, "train-base", digest)
    ckpt_path = stage / "base.tfck"
    if not force and _complete([ckpt_path]):
        return ckpt_path, digest
    task = make_task(cfg)
    tc = TrainConfig(batch_size=cfg.train.batch_size, lr=cfg.train.lr,
                     weight_decay=cfg.train.weight_decay,
                     grad_clip=cfg.train.grad_clip, ema_decay=cfg.train.ema_decay,
                     log_every=cfg.train.log_every)
    ckpt = train_base(cfg.model, task, cfg.train.steps, tc,
                      seed=cfg.seeds.base, log=log)
    ckpt.meta["config_hash"] = digest
    write_bytes_atomic(ckpt_path, serialize(ckpt))
    write_csv(stage / "train_log.csv", ckpt.meta.get("log", []))
    return ckpt_path, digest


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifactError(str(path))
    return path


def base_model_for(cfg: ExperimentConfig, base_path: Path) -> ToyDiTModel:
    """The working copy of the base model (EMA weights when enabled)."""
    ckpt = Checkpoint.load(_require(base_path))
    return ckpt.ema_model() if cfg.eval.use_ema else ckpt.model()


def _default_keep(cfg: ExperimentConfig) -> int:
    if cfg.prune.keep is not None:
        return cfg.prune.keep
    scheme = NMScheme(cfg.prune.n_keep, cfg.prune.m_block, cfg.model.depth)
    return scheme.n_keep * scheme.num_blocks


def run_prune(cfg: ExperimentConfig, method: str, seed: int,
              out_dir: str | None = None, force: bool = False) -> tuple[Path, str]:
    """Produce a pruning decision with the given method; returns (path, hash)."""
    base_path, base_hash = ensure_base(cfg, out_dir)
    digest = stage_hash(cfg, "prune", seed, parent=base_hash,
                        extra={"method": method})
    stage = _stage_dir(cfg, out_dir, "prune", digest)
    decision_path = stage / "decision.json"
    if not force and _complete([decision_path]):
        return decision_path, digest

    task = make_task(cfg)
    model = base_model_for(cfg, base_path)
    calib = task.calibration_set(cfg.prune.calib_size, cfg.prune.calib_seed)
    keep = _default_keep(cfg)
    p = cfg.prune
    extra_files: dict[str, object] = {}

    if method == "learnable":
        learn_cfg = PruneLearnConfig(
            n_keep=p.n_keep, m_block=p.m_block, update_strategy=p.update_strategy,
            lora_rank=p.lora_rank, lora_alpha=p.lora_alpha, steps=p.steps,
            batch_size=p.batch_size,
            lr=0.0 if p.update_strategy == "frozen" else p.lr,
            logit_lr=p.logit_lr, grad_clip=p.grad_clip, tau_start=p.tau_start,
            tau_end=p.tau_end, tau_decay=p.tau_decay, seed=seed)
        dist, decision, rows = learn_pruning(model, task, learn_cfg)
        write_csv(stage / "learn_log.csv", rows)
        dist_ckpt = Checkpoint(config=cfg.model.to_dict(), step=len(rows),
                               seed=seed, ema_decay=0.0, params={},
                               extra={"mask_logits": dist.logits},
                               meta={"kind": "mask_dist",
                                     "scheme": decision.to_json()["scheme"]})
        write_bytes_atomic(stage / "mask_dist.tfck", serialize(dist_ckpt))
    elif method == "oracle":
        decision = decision_from_mask(baselines.oracle_prune(cfg.model.depth, keep))
    elif method == "sensitivity":
        decision = decision_from_mask(
            baselines.sensitivity_prune(model, task, calib, keep))
    elif method == "similarity":
        decision = decision_from_mask(
            baselines.similarity_prune(model, task, calib, keep))
    elif method == "mse":
        decision = decision_from_mask(baselines.mse_prune(model, task, calib, keep))
    elif method in ("min-loss", "med-loss", "max-loss", "random"):
        rng = np.random.default_rng(seed)
        result = baselines.random_search(model, task, calib, p.search_samples,
                                         keep=keep, rng=rng)
        pick = {"min-loss": result.min_score, "med-loss": result.median_score,
                "max-loss": result.max_score, "random": result.median_score}[method]
        decision = decision_from_mask(pick.mask)
        write_csv(stage / "scores.csv", baselines.scores_to_rows(result.scores))
        write_json(stage / "histogram.json", baselines.loss_histogram(result.scores))
    else:
        raise ConfigError(f"unknown prune method {method!r}")

    scheme = NMScheme(p.n_keep, p.m_block, cfg.model.depth)
    payload = decision.to_json()
    payload.update({
        "method": method,
        "seed": seed,
        "config_hash": digest,
        "calibration_loss": baselines.calibration_loss(
            model, decision.mask(cfg.model.depth), task, calib),
        "search_space": {
            "blockwise": search_space_size(scheme),
            "block_patterns": block_pattern_count(scheme),
            "global": global_search_space_size(cfg.model.depth, keep),
        },
    })
    write_json(decision_path, payload)
    return decision_path, digest


def load_decision(path: Path) -> PruneDecision:
    return PruneDecision.from_json(read_json(_require(path)))


def run_recover(cfg: ExperimentConfig, method: str, seed: int, mode: str,
                out_dir: str | None = None, force: bool = False,
                decision_path: Path | None = None,
                teacher_path: Path | None = None) -> tuple[Path, str]:
    """Fine-tune or distill the pruned student; returns (ckpt path, hash)."""
    base_path, base_hash = ensure_base(cfg, out_dir)
    if decision_path is None:
        decision_path, prune_hash = run_prune(cfg, method, seed, out_dir)
    else:
        prune_hash = stage_hash(cfg, "prune", seed, parent=base_hash,
                                extra={"method": method,
                                       "decision": str(decision_path)})
    digest = stage_hash(cfg, "recover", seed, parent=prune_hash,
                        extra={"mode": mode})
    stage = _stage_dir(cfg, out_dir, "recover", digest)
    ckpt_path = stage / "student.tfck"
    if not force and _complete([ckpt_path]):
        return ckpt_path, digest

    task = make_task(cfg)
    decision = load_decision(decision_path)
    base = base_model_for(cfg, base_path)
    student = apply_decision(base, decision)
    r = cfg.recover
    dcfg = distill_mod.DistillConfig(
        alpha_kd=r.alpha_kd, alpha_diff=r.alpha_diff, beta0=r.beta,
        k_sigma=r.k_sigma, centered=r.centered, exclude=r.exclude,
        steps=r.steps, batch_size=r.batch_size, lr=r.lr,
        weight_decay=r.weight_decay, grad_clip=r.grad_clip,
        ema_decay=r.ema_decay, lr_halvings=r.lr_halvings, seed=seed,
        log_every=r.log_every)
    if mode == "finetune":
        ckpt, rows = distill_mod.finetune(student, task, dcfg)
    else:
        teacher = (base if teacher_path is None
                   else base_model_for(cfg, teacher_path))
        alignment = None
        if decision.scheme is not None:
            alignment = distill_mod.block_alignment(teacher.config.depth, decision)
        ckpt, rows = distill_mod.distill_finetune(student, teacher, task, dcfg,
                                                  alignment=alignment)
    ckpt.meta.update({"config_hash": digest, "method": method, "mode": mode,
                      "decision": read_json(decision_path)})
    write_bytes_atomic(ckpt_path, serialize(ckpt))
    write_csv(stage / "recover_log.csv", rows)
    return ckpt_path, digest


def run_eval(cfg: ExperimentConfig, ckpt_path: Path, seed: int,
             out_dir: str | None = None, force: bool = False,
             parent_hash: str | None = None,
             with_throughput: bool = False) -> Path:
    # identify the checkpoint by content, not by path, so replayed pipelines
    # in different output dirs produce byte-identical reports
    ckpt_path = _require(Path(ckpt_path))
    file_digest = hashlib.sha256(ckpt_path.read_bytes()).hexdigest()[:16]
    model_id = f"{ckpt_path.name}:{file_digest}"
    digest = stage_hash(cfg, "eval", seed, parent=parent_hash,
                        extra={"checkpoint": file_digest,
                               "throughput": with_throughput})
    stage = _stage_dir(cfg, out_dir, "eval", digest)
    report_path = stage / "report.json"
    if not force and _complete([report_path]):
        return report_path
    task = make_task(cfg)
    ckpt = Checkpoint.load(ckpt_path)
    report = build_report(
        ckpt, task, model_id=model_id, config_hash=digest, seed=seed,
        use_ema=cfg.eval.use_ema, sample_n=cfg.eval.sample_n,
        sample_steps=cfg.eval.sample_steps, with_throughput=with_throughput,
        with_samples=cfg.eval.with_samples, bench_batch=cfg.eval.bench_batch)
    write_json(report_path, report.to_json())
    return report_path


def compare_reports(paths: list[Path], out_path: Path) -> None:
    reports = []
    for p in paths:
        data = read_json(_require(Path(p)))
        reports.append(EvalReport(**data))
    check_task_match(reports)
    rows = [{"model_id": r.model_id, "depth": r.depth,
             "param_count": r.param_count, "heldout_loss": r.heldout_loss,
             "sw_distance": r.sw_distance, "config_hash": r.config_hash,
             "seed": r.seed} for r in reports]
    write_csv(out_path, rows)


def run_bench(cfg: ExperimentConfig, out_dir: str | None = None,
              force: bool = False) -> Path:
    digest = stage_hash(cfg, "bench", cfg.seeds.base)
    stage = _stage_dir(cfg, out_dir, "bench", digest)
    path = stage / "bench.json"
    if not force and _complete([path]):
        return path
    table = throughput_bench(cfg.eval.bench_depths, config=cfg.model,
                             batch=cfg.eval.bench_batch,
                             trials=cfg.eval.bench_trials)
    table["config_hash"] = digest
    write_json(path, table)
    rows = [{"depth": r["depth"], "iters_per_sec": r["iters_per_sec"],
             "speedup": r["speedup"]} for r in table["results"]]
    write_csv(stage / "bench.csv", rows)
    return path


def sweep_cell(config_path: str, out_dir: str | None, method: str,
               seed: int) -> dict:
    """One (method, seed) pipeline cell; importable so process pools can run it."""
    from .runtime import tune_allocator
    tune_allocator()
    cfg = load_config(config_path)
    ckpt_path, recover_hash = run_recover(cfg, method, seed, cfg.recover.mode,
                                          out_dir=out_dir)
    report_path = run_eval(cfg, ckpt_path, seed, out_dir=out_dir,
                           parent_hash=recover_hash)
    report = read_json(report_path)
    decision_path, _ = run_prune(cfg, method, seed, out_dir=out_dir)
    decision = read_json(decision_path)
    return {
        "method": method,
        "seed": seed,
        "retained_layers": " ".join(str(i) for i in decision["retained_layers"]),
        "calibration_loss": decision["calibration_loss"],
        "heldout_loss": report["heldout_loss"],
        "sw_distance": report["sw_distance"],
        "config_hash": report["config_hash"],
    }


def run_sweep(cfg: ExperimentConfig, config_path: str,
              out_dir: str | None = None, workers: int | None = None) -> Path:
    """All (method, seed) cells; deterministic row order regardless of workers."""
    methods = cfg.sweep.methods
    seeds = cfg.seeds.sweep
    cells = [(m, s) for m in methods for s in seeds]
    workers = workers if workers is not None else cfg.sweep.workers
    if workers > 1:
        # Base checkpoint is built once up front so workers share it.
        ensure_base(cfg, out_dir)
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            rows = list(pool.map(_sweep_cell_star,
                                 [(config_path, out_dir, m, s) for m, s in cells]))
    else:
        rows = [sweep_cell(config_path, out_dir, m, s) for m, s in cells]
    digest = stage_hash(cfg, "eval", cfg.seeds.base,
                        extra={"sweep": [list(c) for c in cells]})
    stage = _stage_dir(cfg, out_dir, "sweep", digest)
    out_path = stage / "comparison.csv"
    write_csv(out_path, rows)
    return out_path


def _sweep_cell_star(args) -> dict:
    return sweep_cell(*args)
