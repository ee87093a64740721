"""Synthetic diffusion task: 2-D Gaussian mixture, linear noise schedule, batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

MIXTURE_MODES = 8
MIXTURE_RADIUS = 1.0
MIXTURE_SIGMA = 0.05


def mixture_centers() -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(MIXTURE_MODES) / MIXTURE_MODES
    return MIXTURE_RADIUS * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def sample_mixture(n: int, rng: np.random.Generator) -> np.ndarray:
    centers = mixture_centers()
    modes = rng.integers(0, MIXTURE_MODES, size=n)
    return centers[modes] + MIXTURE_SIGMA * rng.standard_normal((n, 2))


def linear_beta_schedule(num_timesteps: int, beta_start: float = 1e-4,
                         beta_end: float = 2e-2) -> np.ndarray:
    return np.linspace(beta_start, beta_end, num_timesteps)


@dataclass
class Batch:
    """One training batch: noised token sequences, timesteps, and the true noise."""

    tokens: np.ndarray   # (B, T, in_dim), x_t
    t: np.ndarray        # (B,) int timestep indices
    eps: np.ndarray      # (B, T, in_dim) noise target
    labels: np.ndarray | None = None


@dataclass
class CalibrationSet:
    """Fixed examples with pre-sampled timesteps and noise, shared across methods."""

    points: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    seed: int


class DiffusionTask:
    """Fixed dataset of mixture points plus the forward-noising machinery.

    A data point p in R^2 becomes a sequence of `seq_len` copies of p; the
    forward process noises every token independently, and the model learns to
    predict the per-token noise.
    """

    def __init__(self, seq_len: int = 16, num_timesteps: int = 100,
                 train_size: int = 50_000, heldout_size: int = 4096,
                 seed: int = 0):
        if num_timesteps < 1:
            raise ConfigError("num_timesteps must be >= 1")
        self.seq_len = seq_len
        self.num_timesteps = num_timesteps
        self.seed = seed
        self.betas = linear_beta_schedule(num_timesteps)
        self.alpha_bar = np.cumprod(1.0 - self.betas)

        ss = np.random.SeedSequence(seed)
        train_ss, heldout_ss, eval_ss = ss.spawn(3)
        self.train_points = sample_mixture(train_size, np.random.default_rng(train_ss))
        self.heldout_points = sample_mixture(heldout_size, np.random.default_rng(heldout_ss))
        # Held-out evaluation uses frozen (t, eps) so the metric is deterministic.
        eval_rng = np.random.default_rng(eval_ss)
        self._heldout_t = eval_rng.integers(0, num_timesteps, size=heldout_size)
        self._heldout_eps = eval_rng.standard_normal((heldout_size, seq_len, 2))

    @property
    def train_size(self) -> int:
        return len(self.train_points)

    def tokenize(self, points: np.ndarray) -> np.ndarray:
        return np.repeat(points[:, None, :], self.seq_len, axis=1)

    def noise_tokens(self, points: np.ndarray, t: np.ndarray,
                     eps: np.ndarray) -> np.ndarray:
        ab = self.alpha_bar[t][:, None, None]
        return np.sqrt(ab) * self.tokenize(points) + np.sqrt(1.0 - ab) * eps

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> Batch:
        idx = rng.integers(0, len(self.train_points), size=batch_size)
        points = self.train_points[idx]
        t = rng.integers(0, self.num_timesteps, size=batch_size)
        eps = rng.standard_normal((batch_size, self.seq_len, 2))
        return Batch(tokens=self.noise_tokens(points, t, eps), t=t, eps=eps)

    def heldout_batch(self) -> Batch:
        tokens = self.noise_tokens(self.heldout_points, self._heldout_t, self._heldout_eps)
        return Batch(tokens=tokens, t=self._heldout_t, eps=self._heldout_eps)

    def calibration_set(self, size: int = 512, seed: int = 7151) -> CalibrationSet:
        rng = np.random.default_rng(seed)
        points = sample_mixture(size, rng)
        t = rng.integers(0, self.num_timesteps, size=size)
        eps = rng.standard_normal((size, self.seq_len, 2))
        return CalibrationSet(points=points, t=t, eps=eps, seed=seed)

    def calibration_batch(self, calib: CalibrationSet) -> Batch:
        tokens = self.noise_tokens(calib.points, calib.t, calib.eps)
        return Batch(tokens=tokens, t=calib.t, eps=calib.eps)

    def describe(self) -> dict:
        """Task identity (used to refuse comparisons across different tasks)."""
        return {
            "modes": MIXTURE_MODES,
            "radius": MIXTURE_RADIUS,
            "sigma": MIXTURE_SIGMA,
            "seq_len": self.seq_len,
            "num_timesteps": self.num_timesteps,
            "train_size": len(self.train_points),
            "heldout_size": len(self.heldout_points),
            "seed": self.seed,
        }
