"""N:M candidate enumeration and differentiable mask sampling.

Each block of M consecutive layers keeps exactly N of them. The C(M, N)
candidate masks of a block are enumerated once, and a categorical
distribution over them is sampled with Gumbel noise: the forward value is the
hard one-hot of argmax(g + log p), while gradients flow through the relaxed
softmax((g + log p) / tau) (straight-through). The temperature only shapes
gradients; it never changes which candidate the forward pass picks.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import (Tensor, add, log_softmax, matmul, reshape, scale,
                     softmax, stop_grad, sub, element)

GUMBEL_EPS = 1e-20
MAX_BLOCK = 20


@dataclass(frozen=True)
class NMScheme:
    n_keep: int
    m_block: int
    depth: int

    def __post_init__(self):
        if not (0 < self.n_keep < self.m_block):
            raise ConfigError(f"need 0 < N < M, got {self.n_keep}:{self.m_block}")
        if self.m_block > MAX_BLOCK:
            raise ConfigError(f"block size {self.m_block} exceeds {MAX_BLOCK}")
        if self.depth % self.m_block != 0:
            raise ConfigError(
                f"depth {self.depth} not divisible by block size {self.m_block}")

    @property
    def num_blocks(self) -> int:
        return self.depth // self.m_block

    @property
    def num_candidates(self) -> int:
        return math.comb(self.m_block, self.n_keep)

    def label(self) -> str:
        return f"{self.n_keep}:{self.m_block}"


def enumerate_candidates(n_keep: int, m_block: int) -> np.ndarray:
    """All C(M, N) binary masks with N ones, in descending lexicographic order."""
    if not (0 < n_keep < m_block):
        raise ConfigError(f"need 0 < N < M, got {n_keep}:{m_block}")
    if m_block > MAX_BLOCK:
        raise ConfigError(f"block size {m_block} exceeds {MAX_BLOCK}")
    rows = np.zeros((math.comb(m_block, n_keep), m_block))
    for r, ones in enumerate(itertools.combinations(range(m_block), n_keep)):
        rows[r, list(ones)] = 1.0
    return rows


def search_space_size(scheme: NMScheme) -> int:
    """Number of distinct full masks under independent per-block choices."""
    return scheme.num_candidates ** scheme.num_blocks


def block_pattern_count(scheme: NMScheme) -> int:
    """Number of (block, local pattern) pairs: C(M, N) * K."""
    return scheme.num_candidates * scheme.num_blocks


def global_search_space_size(depth: int, keep: int) -> int:
    """Number of unconstrained masks keeping `keep` of `depth` layers."""
    return math.comb(depth, keep)


@dataclass
class TemperatureSchedule:
    tau_start: float = 4.0
    tau_end: float = 0.1
    total_steps: int = 1000
    decay: str = "linear"

    def __post_init__(self):
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ConfigError("temperatures must be positive")
        if self.tau_end > self.tau_start:
            raise ConfigError("tau_end must not exceed tau_start")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.decay not in ("linear", "exponential"):
            raise ConfigError(f"unknown decay {self.decay!r}")

    def value(self, step: int) -> float:
        if step < 0:
            raise ConfigError("step must be >= 0")
        frac = min(1.0, step / self.total_steps)
        if self.decay == "linear":
            return self.tau_start + (self.tau_end - self.tau_start) * frac
        return self.tau_start * (self.tau_end / self.tau_start) ** frac


def temperature(schedule: TemperatureSchedule, step: int) -> float:
    return schedule.value(step)


@dataclass
class MaskDistribution:
    """Per-block categorical logits over the block's candidate masks."""

    scheme: NMScheme
    logits: np.ndarray = None  # (K, C), zeros = uniform

    def __post_init__(self):
        if self.logits is None:
            self.logits = np.zeros((self.scheme.num_blocks, self.scheme.num_candidates))
        self.logits = np.asarray(self.logits, dtype=np.float64)
        expected = (self.scheme.num_blocks, self.scheme.num_candidates)
        if self.logits.shape != expected:
            raise ConfigError(f"logits shape {self.logits.shape} != {expected}")

    def probabilities(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def entropies(self) -> np.ndarray:
        p = self.probabilities()
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0.0, p * np.log(p), 0.0)
        return -terms.sum(axis=1)


@dataclass
class PruneDecision:
    scheme: NMScheme | None
    per_block_choice: list[int]
    retained_layers: list[int]
    confidences: list[float]
    global_depth: int | None = None   # set for scheme-less (global) decisions

    def source_depth(self) -> int:
        if self.scheme is not None:
            return self.scheme.depth
        if self.global_depth is None:
            raise ConfigError("decision has neither a scheme nor a source depth")
        return self.global_depth

    def mask(self, depth: int) -> np.ndarray:
        m = np.zeros(depth)
        m[self.retained_layers] = 1.0
        return m

    def to_json(self) -> dict:
        return {
            "scheme": None if self.scheme is None else {
                "N": self.scheme.n_keep, "M": self.scheme.m_block,
                "K": self.scheme.num_blocks, "depth": self.scheme.depth,
            },
            "per_block_choice": list(self.per_block_choice),
            "retained_layers": [int(i) for i in self.retained_layers],
            "confidences": [float(c) for c in self.confidences],
            "global_depth": self.global_depth,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PruneDecision":
        scheme = None
        if d.get("scheme"):
            s = d["scheme"]
            scheme = NMScheme(s["N"], s["M"], s["depth"])
        return cls(scheme=scheme, per_block_choice=list(d["per_block_choice"]),
                   retained_layers=list(d["retained_layers"]),
                   confidences=list(d["confidences"]),
                   global_depth=d.get("global_depth"))


def decision_from_mask(mask: np.ndarray, scheme: NMScheme | None = None) -> PruneDecision:
    """Wrap an arbitrary binary mask as a decision (global, no scheme)."""
    mask = np.asarray(mask)
    retained = [int(i) for i in np.flatnonzero(mask > 0.5)]
    return PruneDecision(scheme=scheme, per_block_choice=[],
                         retained_layers=retained, confidences=[],
                         global_depth=None if scheme is not None else len(mask))


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(u + GUMBEL_EPS) + GUMBEL_EPS)


def sample_block(logits, candidates: np.ndarray, tau: float,
                 rng: np.random.Generator):
    """Draw one block mask; returns (one_hot, mask).

    With plain-array logits both returns are numpy arrays. With Tensor logits
    the one-hot carries straight-through gradients: hard argmax forward,
    relaxed softmax((g + log p)/tau) backward, and mask = y^T candidates.
    """
    if tau <= 0.0:
        raise ConfigError("tau must be positive")
    raw = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if not np.all(np.isfinite(raw)):
        raise ConfigError("logits must be finite")
    g = gumbel_noise(rng, raw.shape)
    log_p = raw - np.log(np.exp(raw - raw.max()).sum()) - raw.max()
    winner = int(np.argmax(g + log_p))

    if not isinstance(logits, Tensor):
        hard = np.zeros_like(raw)
        hard[winner] = 1.0
        return hard, candidates[winner].copy()

    perturbed = add(log_softmax(logits), Tensor(g))
    relaxed = softmax(scale(perturbed, 1.0 / tau))
    hard = np.zeros_like(raw)
    hard[winner] = 1.0
    y = add(relaxed, stop_grad(sub(Tensor(hard), relaxed)))
    mask = reshape(matmul(reshape(y, (1, -1)), Tensor(candidates)), (-1,))
    return y, mask


def sample_full(dist: MaskDistribution, tau: float, rng: np.random.Generator,
                logit_tensors: list[Tensor] | None = None):
    """Sample every block independently; returns (gates, per_block_winner).

    `logit_tensors` holds the K learnable (C,) logit vectors, or None for a
    plain draw from `dist.logits`. Gates come back as a flat list of L
    per-layer scalar gates (Tensors when learnable, floats otherwise), with
    exactly N ones per block.
    """
    scheme = dist.scheme
    candidates = enumerate_candidates(scheme.n_keep, scheme.m_block)
    gates = []
    winners = []
    for k in range(scheme.num_blocks):
        if logit_tensors is None:
            hard, mask = sample_block(dist.logits[k], candidates, tau, rng)
            winners.append(int(np.argmax(hard)))
            gates.extend(float(v) for v in mask)
        else:
            y, mask = sample_block(logit_tensors[k], candidates, tau, rng)
            winners.append(int(np.argmax(y.data)))
            gates.extend(element(mask, j) for j in range(scheme.m_block))
    return gates, winners


def sample_many(logits: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorized Gumbel-max draws: n winner indices for one logit row."""
    logits = np.asarray(logits, dtype=np.float64)
    g = gumbel_noise(rng, (n, logits.size))
    return np.argmax(g + logits[None, :], axis=1)


def sample_gates_many(dist: MaskDistribution, n: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Vectorized full-mask draws, shape (n, depth)."""
    scheme = dist.scheme
    candidates = enumerate_candidates(scheme.n_keep, scheme.m_block)
    out = np.empty((n, scheme.depth))
    for k in range(scheme.num_blocks):
        g = gumbel_noise(rng, (n, scheme.num_candidates))
        log_p = dist.logits[k] - dist.logits[k].max()
        log_p = log_p - np.log(np.exp(log_p).sum())
        idx = np.argmax(g + log_p[None, :], axis=1)
        out[:, k * scheme.m_block:(k + 1) * scheme.m_block] = candidates[idx]
    return out


def decide(dist: MaskDistribution) -> PruneDecision:
    """Per-block argmax over logits; ties break to the lowest candidate index."""
    scheme = dist.scheme
    candidates = enumerate_candidates(scheme.n_keep, scheme.m_block)
    probs = dist.probabilities()
    choices = [int(np.argmax(dist.logits[k])) for k in range(scheme.num_blocks)]
    retained = []
    confidences = []
    for k, c in enumerate(choices):
        confidences.append(float(probs[k, c]))
        for j in range(scheme.m_block):
            if candidates[c, j] > 0.5:
                retained.append(k * scheme.m_block + j)
    return PruneDecision(scheme=scheme, per_block_choice=choices,
                         retained_layers=retained, confidences=confidences)
