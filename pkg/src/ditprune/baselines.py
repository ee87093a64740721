"""Metric- and search-based depth-pruning baselines.

All methods score a frozen model on one shared calibration set and emit a
binary keep-mask. Unlike the learnable method they optimize (or proxy) the
loss right after pruning, not the loss after recovery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import ToyDiTModel, diffusion_loss, forward
from .sampler import NMScheme, enumerate_candidates
from .task import Batch, CalibrationSet, DiffusionTask

STAT_TIMESTEP_FRACTIONS = (0.25, 0.5, 0.75)


@dataclass
class MaskScore:
    mask: np.ndarray
    calibration_loss: float
    method: str

    def bitstring(self) -> str:
        return "".join("1" if v > 0.5 else "0" for v in self.mask)


@dataclass
class RandomSearchResult:
    scores: list[MaskScore]
    min_score: MaskScore
    median_score: MaskScore
    max_score: MaskScore


def calibration_loss(model: ToyDiTModel, mask, task: DiffusionTask,
                     calib: CalibrationSet, batch_size: int = 512) -> float:
    """Mean diffusion loss of the masked model on the calibration set.

    Non-finite results are returned as nan rather than raised, so search
    over masks can record unstable candidates.
    """
    batch = task.calibration_batch(calib)
    total = 0.0
    n = len(calib.points)
    try:
        for lo in range(0, n, batch_size):
            sub = Batch(tokens=batch.tokens[lo:lo + batch_size],
                        t=batch.t[lo:lo + batch_size],
                        eps=batch.eps[lo:lo + batch_size])
            total += diffusion_loss(model, sub, mask=mask).item() * len(sub.t)
        value = total / n
    except (FloatingPointError, RuntimeError):
        return math.nan
    return value if math.isfinite(value) else math.nan


def _uniform_mask(depth: int, keep: int, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros(depth)
    mask[rng.permutation(depth)[:keep]] = 1.0
    return mask


def _scheme_mask(scheme: NMScheme, rng: np.random.Generator) -> np.ndarray:
    candidates = enumerate_candidates(scheme.n_keep, scheme.m_block)
    rows = rng.integers(0, len(candidates), size=scheme.num_blocks)
    return candidates[rows].reshape(-1)


def random_search(model: ToyDiTModel, task: DiffusionTask, calib: CalibrationSet,
                  n_samples: int, keep: int | None = None,
                  scheme: NMScheme | None = None,
                  rng: np.random.Generator | None = None,
                  seed: int = 0) -> RandomSearchResult:
    """Score uniformly random masks; returns all scores plus min/median/max.

    Masks are global keep-of-depth subsets unless an N:M scheme is given.
    Non-finite losses rank as +inf, so "max" surfaces unstable masks the way
    a loss-ordered search would.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    if (keep is None) == (scheme is None):
        raise ConfigError("give exactly one of keep= or scheme=")
    rng = rng if rng is not None else np.random.default_rng(seed)
    depth = model.config.depth
    scores = []
    for i in range(n_samples):
        mask = (_uniform_mask(depth, keep, rng) if scheme is None
                else _scheme_mask(scheme, rng))
        loss = calibration_loss(model, mask, task, calib)
        scores.append(MaskScore(mask=mask, calibration_loss=loss, method="random"))

    def rank(s: MaskScore) -> float:
        return math.inf if math.isnan(s.calibration_loss) else s.calibration_loss

    order = sorted(range(n_samples), key=lambda i: (rank(scores[i]), i))
    return RandomSearchResult(
        scores=scores,
        min_score=scores[order[0]],
        median_score=scores[order[n_samples // 2]],
        max_score=scores[order[-1]],
    )


def _mask_keeping_all_but(depth: int, removed: int) -> np.ndarray:
    mask = np.ones(depth)
    mask[removed] = 0.0
    return mask


def sensitivity_scores(model: ToyDiTModel, task: DiffusionTask,
                       calib: CalibrationSet) -> np.ndarray:
    """Loss increase when each layer is removed alone (can be negative)."""
    base = calibration_loss(model, None, task, calib)
    depth = model.config.depth
    return np.array([
        calibration_loss(model, _mask_keeping_all_but(depth, i), task, calib) - base
        for i in range(depth)
    ])


def sensitivity_prune(model: ToyDiTModel, task: DiffusionTask,
                      calib: CalibrationSet, keep: int) -> np.ndarray:
    """Remove the depth-keep layers whose solo removal disturbs loss least."""
    depth = model.config.depth
    if not 0 < keep < depth:
        raise ConfigError("keep must be in (0, depth)")
    scores = sensitivity_scores(model, task, calib)
    removed = np.argsort(scores, kind="stable")[: depth - keep]
    mask = np.ones(depth)
    mask[removed] = 0.0
    return mask


def _stat_batches(model: ToyDiTModel, task: DiffusionTask,
                  calib: CalibrationSet) -> list[Batch]:
    """Calibration points noised at fixed mid-range timesteps for layer stats."""
    t_max = task.num_timesteps
    rng = np.random.default_rng(calib.seed + 1)
    batches = []
    for frac in STAT_TIMESTEP_FRACTIONS:
        t = np.full(len(calib.points), int(frac * t_max), dtype=np.int64)
        eps = rng.standard_normal((len(calib.points), task.seq_len, 2))
        batches.append(Batch(tokens=task.noise_tokens(calib.points, t, eps),
                             t=t, eps=eps))
    return batches


def _layer_io(model: ToyDiTModel, batch: Batch):
    _, hidden = forward(model, batch.tokens, batch.t, collect_hidden=True)
    return [h.data for h in hidden]


def similarity_scores(model: ToyDiTModel, task: DiffusionTask,
                      calib: CalibrationSet) -> np.ndarray:
    """Mean per-token cosine similarity between each layer's input and output.

    Zero-norm rows count as similarity 1 (a no-op layer is fully redundant).
    """
    depth = model.config.depth
    totals = np.zeros(depth)
    count = 0
    for batch in _stat_batches(model, task, calib):
        hidden = _layer_io(model, batch)
        for i in range(depth):
            x, y = hidden[i], hidden[i + 1]
            nx = np.linalg.norm(x, axis=1)
            ny = np.linalg.norm(y, axis=1)
            dot = (x * y).sum(axis=1)
            denom = nx * ny
            cos = np.where(denom > 0.0, dot / np.where(denom > 0, denom, 1.0), 1.0)
            totals[i] += cos.sum()
            if i == 0:
                count += len(cos)
    return totals / count


def similarity_prune(model: ToyDiTModel, task: DiffusionTask,
                     calib: CalibrationSet, keep: int) -> np.ndarray:
    """Prune the layers whose outputs stay most similar to their inputs."""
    depth = model.config.depth
    if not 0 < keep < depth:
        raise ConfigError("keep must be in (0, depth)")
    scores = similarity_scores(model, task, calib)
    removed = np.argsort(-scores, kind="stable")[: depth - keep]
    mask = np.ones(depth)
    mask[removed] = 0.0
    return mask


def mse_scores(model: ToyDiTModel, task: DiffusionTask,
               calib: CalibrationSet) -> np.ndarray:
    """Mean per-token squared L2 change each layer applies to its input."""
    depth = model.config.depth
    totals = np.zeros(depth)
    count = 0
    for batch in _stat_batches(model, task, calib):
        hidden = _layer_io(model, batch)
        for i in range(depth):
            diff = hidden[i + 1] - hidden[i]
            totals[i] += (diff * diff).sum(axis=1).sum()
            if i == 0:
                count += diff.shape[0]
    return totals / count


def mse_prune(model: ToyDiTModel, task: DiffusionTask,
              calib: CalibrationSet, keep: int) -> np.ndarray:
    """Prune the layers that change their input least in squared error."""
    depth = model.config.depth
    if not 0 < keep < depth:
        raise ConfigError("keep must be in (0, depth)")
    scores = mse_scores(model, task, calib)
    removed = np.argsort(scores, kind="stable")[: depth - keep]
    mask = np.ones(depth)
    mask[removed] = 0.0
    return mask


def oracle_prune(depth: int, keep: int) -> np.ndarray:
    """Keep first and last layers plus evenly spaced intermediates.

    Index rule: round(j * (depth-1) / (keep-1)) for j in 0..keep-1 with
    half-up rounding, deduplicated ascending.
    """
    if keep < 2:
        raise ConfigError("oracle pruning needs keep >= 2")
    if keep > depth:
        raise ConfigError("keep cannot exceed depth")
    idx = sorted({int(math.floor(j * (depth - 1) / (keep - 1) + 0.5))
                  for j in range(keep)})
    mask = np.zeros(depth)
    mask[idx] = 1.0
    return mask


def scores_to_rows(scores: list[MaskScore]) -> list[dict]:
    return [{"mask": s.bitstring(), "loss": s.calibration_loss, "method": s.method}
            for s in scores]


def loss_histogram(scores: list[MaskScore], bins: int = 40) -> dict:
    """Figure-style histogram export: bin edges and counts (finite losses)."""
    losses = np.array([s.calibration_loss for s in scores])
    finite = losses[np.isfinite(losses)]
    if len(finite) == 0:
        return {"bin_edges": [], "counts": [], "non_finite": int(len(losses))}
    counts, edges = np.histogram(finite, bins=bins)
    return {"bin_edges": [float(e) for e in edges],
            "counts": [int(c) for c in counts],
            "non_finite": int(len(losses) - len(finite))}
