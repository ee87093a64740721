"""Recovery fine-tuning: plain, logits-matching, and masked hidden-state KD.

The combined objective per step is

    total = a_kd * MSE(student_out, teacher_out)
          + a_diff * MSE(student_out, true_noise)
          + beta(step) * sum_over_aligned_pairs masked_hidden_loss

where beta decays linearly to exactly zero at the last step. The hidden-state
term excludes "massive activation" outliers from both teacher and student
before averaging, which keeps the loss finite when rare huge values appear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt_mod
from .errors import ConfigError, NonFiniteLossError
from .model import ToyDiTModel, forward, loss_from_prediction
from .optim import EMA, Adam, clip_grad_groups, halving_lr
from .sampler import PruneDecision
from .task import DiffusionTask
from .tensor import ComputationTape, Tensor, add, masked_sq_mean, mse, scale
from .train import DivergenceGuard


@dataclass
class DistillConfig:
    alpha_kd: float = 0.9
    alpha_diff: float = 0.1
    beta0: float = 1e-2          # hidden-state weight, decays linearly to 0
    k_sigma: float = 2.0         # outlier threshold multiplier
    centered: bool = True        # threshold on |x - mean| (False: on |x|)
    exclude: str = "union"       # union | teacher
    steps: int = 5000
    batch_size: int = 128
    lr: float = 2e-4
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    ema_decay: float = 0.999
    lr_halvings: int = 4
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.alpha_kd + self.alpha_diff <= 0.0:
            raise ConfigError("alpha_kd + alpha_diff must be positive")
        if self.k_sigma <= 0.0:
            raise ConfigError("k_sigma must be positive")
        if self.exclude not in ("union", "teacher"):
            raise ConfigError(f"unknown exclude mode {self.exclude!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")

    def beta(self, step: int) -> float:
        if self.steps <= 1:
            return 0.0
        return self.beta0 * max(0.0, 1.0 - step / (self.steps - 1))


@dataclass
class BlockAlignment:
    """Pairs (student layer index, teacher layer index) of aligned states.

    "After layer i" semantics: the pair (s, t) matches the student hidden
    state after student layer s with the teacher hidden state after teacher
    layer t (a block boundary).
    """

    pairs: list[tuple[int, int]]


def block_alignment(teacher_depth: int, decision: PruneDecision) -> BlockAlignment:
    """Align each block's last surviving student layer to the block-end state."""
    scheme = decision.scheme
    if scheme is None:
        raise ConfigError(
            "global decisions have no block structure; hidden-state distillation "
            "is unavailable (use logits distillation only)")
    if scheme.depth != teacher_depth:
        raise ConfigError(
            f"decision is for depth {scheme.depth}, teacher has {teacher_depth}")
    n, m = scheme.n_keep, scheme.m_block
    pairs = [((k + 1) * n - 1, k * m + m - 1) for k in range(scheme.num_blocks)]
    return BlockAlignment(pairs=pairs)


def outlier_keep_mask(arr: np.ndarray, k: float, centered: bool = True) -> np.ndarray:
    """Boolean mask of positions within k standard deviations (kept)."""
    sigma = float(arr.std())
    center = float(arr.mean()) if centered else 0.0
    if sigma == 0.0:
        return np.ones(arr.shape, dtype=bool)
    return np.abs(arr - center) <= k * sigma


def masked_repkd_loss(h_student, h_teacher, k: float, centered: bool = True,
                      exclude: str = "union"):
    """MSE over positions that are not massive activations in either model.

    Statistics (mean, std) are computed per tensor over all elements; a
    position is excluded when it exceeds k sigma in the teacher or (under
    "union") in the student. Returns a float for array inputs or a scalar
    Tensor (differentiable wrt the student) for Tensor input.
    """
    s_arr = h_student.data if isinstance(h_student, Tensor) else np.asarray(h_student)
    t_arr = h_teacher.data if isinstance(h_teacher, Tensor) else np.asarray(h_teacher)
    if s_arr.shape != t_arr.shape:
        raise ConfigError(f"hidden shapes differ: {s_arr.shape} vs {t_arr.shape}")
    keep = outlier_keep_mask(t_arr, k, centered)
    if exclude == "union":
        keep &= outlier_keep_mask(s_arr, k, centered)
    if isinstance(h_student, Tensor):
        return masked_sq_mean(h_student, Tensor(t_arr), keep)
    if not keep.any():
        return 0.0
    diff = (s_arr - t_arr)[keep]
    return float((diff * diff).mean())


def excluded_fraction(h_student: np.ndarray, h_teacher: np.ndarray, k: float,
                      centered: bool = True, exclude: str = "union") -> float:
    keep = outlier_keep_mask(h_teacher, k, centered)
    if exclude == "union":
        keep &= outlier_keep_mask(h_student, k, centered)
    return 1.0 - float(keep.mean())


def _teacher_forward(teacher: ToyDiTModel, batch, need_hidden: bool):
    was = [(p, p.requires_grad) for p in teacher.parameters()]
    for p, _ in was:
        p.requires_grad = False
    try:
        if need_hidden:
            pred, hidden = forward(teacher, batch.tokens, batch.t,
                                   labels=batch.labels, collect_hidden=True)
            return pred.data, [h.data for h in hidden]
        pred = forward(teacher, batch.tokens, batch.t, labels=batch.labels)
        return pred.data, None
    finally:
        for p, flag in was:
            p.requires_grad = flag


def _recovery_loop(student: ToyDiTModel, teacher: ToyDiTModel | None,
                   task: DiffusionTask, cfg: DistillConfig,
                   alignment: BlockAlignment | None,
                   rng: np.random.Generator | None, kind: str):
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    data_rng = rng.spawn(1)[0]
    named = student.named_parameters()
    opt = Adam([p for _, p in named], lr=cfg.lr, weight_decay=cfg.weight_decay)
    ema = EMA(named, decay=cfg.ema_decay)
    guard = DivergenceGuard()
    use_kd = teacher is not None and cfg.alpha_kd != 0.0
    use_rep = (teacher is not None and alignment is not None
               and cfg.beta0 != 0.0)

    rows = []
    for step in range(cfg.steps):
        lr = halving_lr(cfg.lr, step, cfg.steps, cfg.lr_halvings)
        opt.lr = lr
        beta = cfg.beta(step)
        batch = task.sample_batch(data_rng, cfg.batch_size)

        t_pred = t_hidden = None
        if use_kd or use_rep:
            t_pred, t_hidden = _teacher_forward(teacher, batch, use_rep)

        with ComputationTape() as tape:
            s_pred, s_hidden = forward(student, batch.tokens, batch.t,
                                       labels=batch.labels, collect_hidden=True)
            l_diff = loss_from_prediction(s_pred, batch.eps)
            terms = [scale(l_diff, cfg.alpha_diff)]
            l_kd_val = 0.0
            l_rep_val = 0.0
            excl = []
            if use_kd:
                l_kd = mse(s_pred, Tensor(t_pred))
                l_kd_val = l_kd.item()
                terms.append(scale(l_kd, cfg.alpha_kd))
            if use_rep:
                rep_terms = []
                for s_i, t_i in alignment.pairs:
                    hs = s_hidden[s_i + 1]
                    ht = t_hidden[t_i + 1]
                    rep_terms.append(masked_repkd_loss(
                        hs, ht, cfg.k_sigma, cfg.centered, cfg.exclude))
                    excl.append(excluded_fraction(
                        hs.data, ht, cfg.k_sigma, cfg.centered, cfg.exclude))
                l_rep = rep_terms[0]
                for extra in rep_terms[1:]:
                    l_rep = add(l_rep, extra)
                l_rep_val = l_rep.item()
                if beta != 0.0:
                    terms.append(scale(l_rep, beta))
            total = terms[0]
            for extra in terms[1:]:
                total = add(total, extra)
        total_val = total.item()
        if not math.isfinite(total_val):
            raise NonFiniteLossError(
                f"non-finite total loss at step {step}: "
                f"kd={l_kd_val:.4g} diff={l_diff.item():.4g} rep={l_rep_val:.4g}")
        tape.backward(total)
        clip_grad_groups([opt], cfg.grad_clip)
        opt.step()
        opt.zero_grad()
        ema.update(named)
        guard.check(step, total_val)

        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            row = {"step": step, "total": total_val, "loss_kd": l_kd_val,
                   "loss_diff": l_diff.item(), "loss_rep": l_rep_val,
                   "beta": beta, "lr": lr}
            for j, frac in enumerate(excl):
                row[f"excluded_frac_{j}"] = frac
            rows.append(row)

    ckpt = ckpt_mod.from_model(student, step=cfg.steps, seed=cfg.seed,
                               ema_decay=cfg.ema_decay, ema=ema.shadow,
                               meta={"kind": kind})
    return ckpt, rows


def distill_finetune(student: ToyDiTModel, teacher: ToyDiTModel,
                     task: DiffusionTask, cfg: DistillConfig,
                     alignment: BlockAlignment | None = None,
                     rng: np.random.Generator | None = None):
    """Teacher-supervised recovery; returns (checkpoint, metric log rows)."""
    return _recovery_loop(student, teacher, task, cfg, alignment, rng, "distill")


def finetune(student: ToyDiTModel, task: DiffusionTask, cfg: DistillConfig,
             rng: np.random.Generator | None = None):
    """Plain diffusion-loss recovery (no teacher); same loop and schedules."""
    plain = DistillConfig(**{**cfg.__dict__, "alpha_kd": 0.0, "alpha_diff": 1.0,
                             "beta0": 0.0})
    return _recovery_loop(student, None, task, plain, None, rng, "finetune")
