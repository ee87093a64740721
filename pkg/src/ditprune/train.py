"""Base-model training loop with EMA and a divergence guard."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt_mod
from .errors import ConfigError, DivergenceError
from .model import ToyDiTConfig, ToyDiTModel, diffusion_loss
from .optim import EMA, Adam, clip_grad_groups
from .task import DiffusionTask
from .tensor import ComputationTape

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 100


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 2e-4
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    ema_decay: float = 0.999
    log_every: int = 100

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


class DivergenceGuard:
    """Aborts once the loss exceeds a multiple of its initial value for too long."""

    def __init__(self, factor: float = DIVERGENCE_FACTOR,
                 patience: int = DIVERGENCE_PATIENCE):
        self.factor = factor
        self.patience = patience
        self.init_loss: float | None = None
        self.bad_streak = 0

    def check(self, step: int, loss: float) -> None:
        if self.init_loss is None:
            self.init_loss = loss
            return
        if loss > self.factor * self.init_loss:
            self.bad_streak += 1
        else:
            self.bad_streak = 0
        if self.bad_streak >= self.patience:
            raise DivergenceError(
                f"loss {loss:.4g} exceeded {self.factor}x initial loss "
                f"{self.init_loss:.4g} for {self.patience} consecutive steps "
                f"(at step {step})")


def train_base(config: ToyDiTConfig, task: DiffusionTask, steps: int,
               train_cfg: TrainConfig | None = None, seed: int = 0,
               log=None) -> ckpt_mod.Checkpoint:
    """Train a fresh model on the task; returns a checkpoint with EMA weights."""
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    train_cfg = train_cfg or TrainConfig()
    init_ss, data_ss = np.random.SeedSequence(seed).spawn(2)
    model = ToyDiTModel.init(config, seed=init_ss)
    rng = np.random.default_rng(data_ss)

    named = model.named_parameters()
    opt = Adam([p for _, p in named], lr=train_cfg.lr,
               weight_decay=train_cfg.weight_decay)
    ema = EMA(named, decay=train_cfg.ema_decay)
    guard = DivergenceGuard()

    rows = []
    for step in range(steps):
        batch = task.sample_batch(rng, train_cfg.batch_size)
        with ComputationTape() as tape:
            loss = diffusion_loss(model, batch)
        tape.backward(loss)
        clip_grad_groups([opt], train_cfg.grad_clip)
        opt.step()
        opt.zero_grad()
        ema.update(named)
        value = loss.item()
        guard.check(step, value)
        if step % train_cfg.log_every == 0 or step == steps - 1:
            rows.append({"step": step, "loss": value})
            if log is not None:
                log(step, value)

    return ckpt_mod.from_model(model, step=steps, seed=seed,
                               ema_decay=train_cfg.ema_decay, ema=ema.shadow,
                               meta={"kind": "base", "log": rows})
