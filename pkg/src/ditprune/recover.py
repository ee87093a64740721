"""Joint optimization of mask logits and a low-rank weight update.

Per step: sample hard gates with straight-through gradients, run the gated
model with W + alpha*B@A on every linear map, backprop the diffusion loss
into the logits and into the update (LoRA, full weights, or nothing), and
step both parameter groups. The weight update only estimates how well each
candidate recovers under fine-tuning; it is discarded at decision time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import ToyDiTModel, diffusion_loss, extract_submodel
from .optim import Adam, clip_grad_groups
from .sampler import (MaskDistribution, NMScheme, PruneDecision,
                      TemperatureSchedule, decide, sample_full)
from .task import DiffusionTask
from .tensor import ComputationTape, Tensor

LORA_MAPS = ("wq", "wk", "wv", "wo", "w_up", "w_down")


class LoRAAdapter:
    """Per-layer low-rank deltas A (r x d_in), B (d_out x r) for each linear map.

    B starts at zero so the update contributes nothing until trained; A is
    Gaussian with variance 1/r.
    """

    def __init__(self, model: ToyDiTModel, rank: int, alpha: float,
                 rng: np.random.Generator):
        if rank < 1:
            raise ConfigError("LoRA rank must be >= 1")
        self.rank = rank
        self.alpha = alpha
        self.tensors: dict[tuple[int, str], tuple[Tensor, Tensor]] = {}
        std = 1.0 / np.sqrt(rank)
        for i in range(model.config.depth):
            for name in LORA_MAPS:
                w = model.layer_param(i, name)
                d_in, d_out = w.shape
                a_mat = Tensor(rng.normal(0.0, std, size=(rank, d_in)),
                               requires_grad=True)
                b_mat = Tensor(np.zeros((d_out, rank)), requires_grad=True)
                self.tensors[(i, name)] = (a_mat, b_mat)

    def entry(self, layer: int, name: str):
        pair = self.tensors.get((layer, name))
        if pair is None:
            return None
        return pair[0], pair[1], self.alpha

    def parameters(self) -> list[Tensor]:
        out = []
        for a_mat, b_mat in self.tensors.values():
            out.append(a_mat)
            out.append(b_mat)
        return out


@dataclass
class PruneLearnConfig:
    n_keep: int = 1
    m_block: int = 2
    update_strategy: str = "lora"       # lora | full | frozen
    lora_rank: int = 8
    lora_alpha: float | None = None     # defaults to 16 / rank
    steps: int | None = None            # defaults to one pass over the dataset
    batch_size: int = 128
    lr: float = 2e-4                    # weight group (LoRA or full weights)
    logit_lr: float = 1e-2
    grad_clip: float = 1.0
    tau_start: float = 4.0
    tau_end: float = 0.1
    tau_decay: str = "linear"
    seed: int = 0

    def __post_init__(self):
        if self.update_strategy not in ("lora", "full", "frozen"):
            raise ConfigError(f"unknown update_strategy {self.update_strategy!r}")
        if self.update_strategy == "frozen" and self.lr != 0.0:
            raise ConfigError("frozen strategy forbids weight updates; set lr=0")

    def resolved_alpha(self) -> float:
        return self.lora_alpha if self.lora_alpha is not None else 16.0 / self.lora_rank

    def resolved_steps(self, task: DiffusionTask) -> int:
        if self.steps is not None:
            return self.steps
        return max(1, task.train_size // self.batch_size)


def learn_pruning(model: ToyDiTModel, task: DiffusionTask, cfg: PruneLearnConfig,
                  rng: np.random.Generator | None = None):
    """Learn a mask distribution on `model`; returns (dist, decision, log rows).

    The model's weights are modified in place only under the "full" strategy;
    "lora" keeps them frozen and trains the adapter, "frozen" trains logits
    only. Deterministic given cfg.seed (or the supplied generator).
    """
    scheme = NMScheme(cfg.n_keep, cfg.m_block, model.config.depth)
    steps = cfg.resolved_steps(task)
    schedule = TemperatureSchedule(cfg.tau_start, cfg.tau_end,
                                   max(1, steps), cfg.tau_decay)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    data_rng, gumbel_rng, lora_rng = rng.spawn(3)

    logit_tensors = [Tensor(np.zeros(scheme.num_candidates), requires_grad=True)
                     for _ in range(scheme.num_blocks)]
    opt_logits = Adam(logit_tensors, lr=cfg.logit_lr)

    adapter = None
    weight_params: list[Tensor] = []
    if cfg.update_strategy == "lora":
        model.set_trainable(False)
        adapter = LoRAAdapter(model, cfg.lora_rank, cfg.resolved_alpha(), lora_rng)
        weight_params = adapter.parameters()
    elif cfg.update_strategy == "full":
        model.set_trainable(True)
        weight_params = model.parameters()
    else:
        model.set_trainable(False)
    opt_weights = Adam(weight_params, lr=cfg.lr) if weight_params else None

    def snapshot() -> MaskDistribution:
        return MaskDistribution(scheme, np.stack([t.data.copy() for t in logit_tensors]))

    rows = []
    for step in range(steps):
        tau = schedule.value(step)
        batch = task.sample_batch(data_rng, cfg.batch_size)
        with ComputationTape() as tape:
            gates, winners = sample_full(snapshot(), tau, gumbel_rng,
                                         logit_tensors=logit_tensors)
            loss = diffusion_loss(model, batch, mask=gates, lora=adapter)
        tape.backward(loss)
        groups = [opt_logits] if opt_weights is None else [opt_logits, opt_weights]
        clip_grad_groups(groups, cfg.grad_clip)
        for opt in groups:
            opt.step()
            opt.zero_grad()

        dist_now = snapshot()
        row = {"step": step, "loss": loss.item(), "tau": tau}
        for k, (h, c) in enumerate(zip(dist_now.entropies(),
                                       [int(np.argmax(t.data)) for t in logit_tensors])):
            row[f"entropy_{k}"] = float(h)
            row[f"argmax_{k}"] = c
        rows.append(row)

    model.set_trainable(True)
    dist = snapshot()
    return dist, decide(dist), rows


def apply_decision(model: ToyDiTModel, decision: PruneDecision) -> ToyDiTModel:
    """Physically remove pruned layers; keeps base weights only (no deltas)."""
    source_depth = decision.source_depth()
    if source_depth != model.config.depth:
        raise ConfigError(
            f"decision was made for depth {source_depth}, model has depth "
            f"{model.config.depth}")
    if any(i >= model.config.depth for i in decision.retained_layers):
        raise ConfigError("decision retains a layer index outside the model")
    return extract_submodel(model, list(decision.retained_layers))
