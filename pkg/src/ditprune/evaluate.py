"""Evaluation: held-out loss, sliced-Wasserstein sample quality, activation
statistics, and the forward-throughput benchmark."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .checkpoint import Checkpoint
from .errors import ConfigError
from .model import ToyDiTConfig, ToyDiTModel, forward, sample
from .task import DiffusionTask, sample_mixture

SW_PROJECTIONS = 64
SW_PROJECTION_SEED = 90210
BENCH_WARMUP = 2
BENCH_MIN_TRIAL_SECONDS = 0.05


def eval_loss(model: ToyDiTModel, task: DiffusionTask, batch_size: int = 1024) -> float:
    """Deterministic mean noise-prediction MSE on the frozen held-out pack."""
    batch = task.heldout_batch()
    n = len(batch.t)
    total = 0.0
    for lo in range(0, n, batch_size):
        pred = forward(model, batch.tokens[lo:lo + batch_size],
                       batch.t[lo:lo + batch_size]).data
        diff = pred - batch.eps[lo:lo + batch_size]
        total += float((diff * diff).mean()) * len(batch.t[lo:lo + batch_size])
    return total / n


def loss_from_predictions(pred: np.ndarray, eps: np.ndarray) -> float:
    diff = np.asarray(pred) - np.asarray(eps)
    return float((diff * diff).mean())


def sliced_wasserstein(a: np.ndarray, b: np.ndarray,
                       n_projections: int = SW_PROJECTIONS,
                       projection_seed: int = SW_PROJECTION_SEED) -> float:
    """SW-2 distance between two equal-size point clouds."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ConfigError("sliced_wasserstein expects two equal (n, d) clouds")
    rng = np.random.default_rng(projection_seed)
    dirs = rng.standard_normal((a.shape[1], n_projections))
    dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)
    pa = np.sort(a @ dirs, axis=0)
    pb = np.sort(b @ dirs, axis=0)
    return float(np.sqrt(np.mean((pa - pb) ** 2)))


def sample_quality(model: ToyDiTModel, n: int, seed: int,
                   sample_steps: int | None = None) -> float:
    """SW distance between n generated points and n fresh true-mixture draws."""
    if n < 100:
        raise ConfigError("need at least 100 samples for a stable estimate")
    steps = sample_steps if sample_steps is not None else model.config.num_timesteps
    points = sample(model, n, steps, seed)
    truth = sample_mixture(n, np.random.default_rng(seed + 1))
    return sliced_wasserstein(points, truth)


def activation_stats(model: ToyDiTModel, task: DiffusionTask,
                     batch_size: int = 256, seed: int = 424) -> list[dict]:
    """Per-layer output statistics (max |x-mean|/std, mean, std) over a batch."""
    rng = np.random.default_rng(seed)
    batch = task.sample_batch(rng, batch_size)
    _, hidden = forward(model, batch.tokens, batch.t, collect_hidden=True)
    stats = []
    for i in range(model.config.depth):
        arr = hidden[i + 1].data
        stats.append(tensor_outlier_stats(arr))
    return stats


def tensor_outlier_stats(arr: np.ndarray) -> dict:
    mu = float(arr.mean())
    sigma = float(arr.std())
    if sigma == 0.0:
        return {"max_ratio": math.inf, "mean": mu, "std": 0.0}
    with np.errstate(invalid="ignore", over="ignore"):
        ratio = float(np.abs(arr - mu).max() / sigma)
    return {"max_ratio": ratio, "mean": mu, "std": sigma}


def _cast_model(model: ToyDiTModel, dtype) -> ToyDiTModel:
    clone = model.clone()
    for p in clone.params.values():
        p.data = np.ascontiguousarray(p.data, dtype=dtype)
        p.requires_grad = False
    clone.t_table = clone.t_table.astype(dtype)
    return clone


def _thread_limit():
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=1)
    except ImportError:  # measure with whatever BLAS does by default
        from contextlib import nullcontext
        return nullcontext()


def throughput_bench(depths: list[int], config: ToyDiTConfig | None = None,
                     batch: int = 256, trials: int = 7, seed: int = 11,
                     dtype: str = "float64") -> dict:
    """Median forward iterations/second per depth, plus speedup vs max depth.

    Runs single-threaded with trials interleaved round-robin across depths so
    machine drift hits every depth equally. Forwards too fast for the clock
    trigger automatic batch doubling (noted in the report) plus per-trial
    repeats.
    """
    if trials < 5:
        raise ConfigError("need at least 5 trials after warmup")
    base_cfg = config or ToyDiTConfig()
    np_dtype = {"float64": np.float64, "float32": np.float32}[dtype]
    ref_depth = max(depths)
    notes = []
    cases = []
    with _thread_limit():
        for depth in depths:
            cfg = ToyDiTConfig(**{**base_cfg.to_dict(), "depth": depth})
            model = _cast_model(ToyDiTModel.init(cfg, seed=seed), np_dtype)
            rng = np.random.default_rng(seed + depth)
            this_batch = batch
            while True:
                tokens = rng.standard_normal(
                    (this_batch, cfg.seq_len, cfg.in_dim)).astype(np_dtype)
                t = rng.integers(0, cfg.num_timesteps, size=this_batch)
                start = time.perf_counter()
                forward(model, tokens, t)
                once = time.perf_counter() - start
                if once > 1e-4 or this_batch >= 16 * batch:
                    break
                this_batch *= 2
                notes.append(f"depth {depth}: batch doubled to {this_batch} "
                             "for timer resolution")
            repeats = max(1, int(math.ceil(
                BENCH_MIN_TRIAL_SECONDS / max(once, 1e-9))))
            cases.append({"depth": depth, "model": model, "tokens": tokens,
                          "t": t, "batch": this_batch, "repeats": repeats,
                          "times": []})
        for _ in range(BENCH_WARMUP):
            for case in cases:
                forward(case["model"], case["tokens"], case["t"])
        for _ in range(trials):
            for case in cases:
                start = time.perf_counter()
                for _ in range(case["repeats"]):
                    forward(case["model"], case["tokens"], case["t"])
                case["times"].append((time.perf_counter() - start)
                                     / case["repeats"])
    results = []
    for case in cases:
        median = float(np.median(case["times"]))
        results.append({"depth": case["depth"], "iters_per_sec": 1.0 / median,
                        "batch": case["batch"], "repeats": case["repeats"]})
    ref = next(r for r in results if r["depth"] == ref_depth)
    for r in results:
        r["speedup"] = r["iters_per_sec"] / ref["iters_per_sec"]
    return {"dtype": dtype, "reference_depth": ref_depth, "results": results,
            "notes": notes}


@dataclass
class EvalReport:
    model_id: str
    depth: int
    param_count: int
    heldout_loss: float
    sw_distance: float | None
    throughput: dict | None
    activation_stats: list[dict]
    config_hash: str
    seed: int
    task: dict
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def build_report(ckpt: Checkpoint, task: DiffusionTask, model_id: str,
                 config_hash: str, seed: int = 0, use_ema: bool = True,
                 sample_n: int = 2000, sample_steps: int | None = None,
                 with_throughput: bool = False, with_samples: bool = True,
                 bench_batch: int = 256) -> EvalReport:
    """Evaluate one checkpoint; pure function of its inputs except timing."""
    model = ckpt.ema_model() if use_ema else ckpt.model()
    flags = []
    heldout = eval_loss(model, task)
    if not math.isfinite(heldout):
        flags.append("heldout_loss_non_finite")
    sw = None
    if with_samples:
        sw = sample_quality(model, sample_n, seed=seed, sample_steps=sample_steps)
        if not math.isfinite(sw):
            flags.append("sw_distance_non_finite")
    bench = None
    if with_throughput:
        bench = throughput_bench([model.config.depth], config=model.config,
                                 batch=bench_batch)
    stats = activation_stats(model, task)
    if any(not math.isfinite(s["max_ratio"]) for s in stats):
        flags.append("activation_ratio_non_finite")
    return EvalReport(model_id=model_id, depth=model.config.depth,
                      param_count=ckpt.param_count(), heldout_loss=heldout,
                      sw_distance=sw, throughput=bench,
                      activation_stats=stats, config_hash=config_hash,
                      seed=seed, task=task.describe(), flags=flags)


def check_task_match(reports: list[EvalReport]) -> None:
    """Refuse to compare reports evaluated on different task definitions."""
    if not reports:
        return
    first = json.dumps(reports[0].task, sort_keys=True)
    for r in reports[1:]:
        if json.dumps(r.task, sort_keys=True) != first:
            raise ConfigError(
                f"task mismatch between {reports[0].model_id} and {r.model_id}")
