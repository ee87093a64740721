"""Recover a pruned model: plain fine-tuning vs masked knowledge distillation.

Uses the decision from demo 02 and the base checkpoint from demo 01. The
distillation loss combines teacher-output matching, the ground-truth
diffusion loss, and a hidden-state term that skips massive activations
(|x - mean| > k sigma in either model).
"""

import json

import numpy as np

from ditprune.runtime import tune_allocator
from ditprune.checkpoint import Checkpoint
from ditprune.distill import (DistillConfig, block_alignment, distill_finetune,
                              finetune, masked_repkd_loss)
from ditprune.evaluate import eval_loss
from ditprune.recover import apply_decision
from ditprune.sampler import PruneDecision
from ditprune.task import DiffusionTask

tune_allocator()

ckpt = Checkpoint.load("out-demo/base.tfck")
teacher = ckpt.ema_model()
with open("out-demo/decision.json") as f:
    decision = PruneDecision.from_json(json.load(f))
task = DiffusionTask(seq_len=teacher.config.seq_len,
                     num_timesteps=teacher.config.num_timesteps,
                     train_size=20_000, heldout_size=2048, seed=0)

# the masked hidden-state loss shrugs off planted massive activations
rng = np.random.default_rng(0)
h_t = rng.standard_normal((256, 32))
h_s = h_t + 0.1 * rng.standard_normal((256, 32))
h_t_spiked = h_t.copy()
h_t_spiked[3, 3] = 100.0 * h_t.std()
print("hidden-state loss with a planted 100-sigma outlier:")
print(f"  unmasked: {masked_repkd_loss(h_s, h_t_spiked, k=1e12):.4f}")
print(f"  k=2 mask: {masked_repkd_loss(h_s, h_t_spiked, k=2.0):.4f}")

align = block_alignment(teacher.config.depth, decision)
print(f"\nstudent->teacher hidden-state alignment: {align.pairs}")

steps = 2000
cfg = DistillConfig(steps=steps, batch_size=32, seed=0, log_every=500)
student = apply_decision(teacher, decision)
plain_ck, _ = finetune(student, task, cfg)
student = apply_decision(teacher, decision)
distill_ck, rows = distill_finetune(student, teacher, task, cfg, alignment=align)

print(f"\nafter {steps} recovery steps:")
print(f"  teacher held-out loss:   {eval_loss(teacher, task):.4f}")
print(f"  plain fine-tune:         {eval_loss(plain_ck.ema_model(), task):.4f}")
print(f"  masked distillation:     {eval_loss(distill_ck.ema_model(), task):.4f}")
print("\ndistillation loss components over training:")
for row in rows:
    print(f"  step {row['step']:5d}  total {row['total']:.4f}  "
          f"kd {row['loss_kd']:.4f}  diff {row['loss_diff']:.4f}  "
          f"rep {row['loss_rep']:.4f}  beta {row['beta']:.4g}")
