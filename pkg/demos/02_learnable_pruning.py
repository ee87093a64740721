"""Learn which layers to prune by sampling masks differentiably.

Loads the checkpoint from demo 01 (run that first), then jointly optimizes
per-block mask logits and a LoRA update. The distribution starts uniform;
watch the per-block entropy collapse as the sampler grows confident.
"""

from ditprune.runtime import tune_allocator
from ditprune.checkpoint import Checkpoint
from ditprune.recover import PruneLearnConfig, apply_decision, learn_pruning
from ditprune.sampler import NMScheme, search_space_size, block_pattern_count
from ditprune.task import DiffusionTask
from ditprune.evaluate import eval_loss

tune_allocator()

ckpt = Checkpoint.load("out-demo/base.tfck")
model = ckpt.ema_model()
task = DiffusionTask(seq_len=model.config.seq_len,
                     num_timesteps=model.config.num_timesteps,
                     train_size=20_000, heldout_size=2048, seed=0)

scheme = NMScheme(1, 2, model.config.depth)
print(f"1:2 scheme over depth {model.config.depth}: "
      f"{search_space_size(scheme)} joint masks, "
      f"{block_pattern_count(scheme)} block-level patterns")

cfg = PruneLearnConfig(n_keep=1, m_block=2, steps=1500, batch_size=32, seed=0)
dist, decision, log = learn_pruning(model, task, cfg)

print("\nper-block entropy over training (nats):")
for row in log[:: max(1, len(log) // 8)]:
    ent = [row[f"entropy_{k}"] for k in range(scheme.num_blocks)]
    print(f"  step {row['step']:5d}  tau {row['tau']:.2f}  " +
          "  ".join(f"{e:.3f}" for e in ent))

print(f"\ndecision: retain layers {decision.retained_layers}")
print(f"confidences: {[f'{c:.3f}' for c in decision.confidences]}")

pruned = apply_decision(model, decision)
print(f"\npruned model depth {pruned.config.depth}, "
      f"params {pruned.param_count()} (base {model.param_count()})")
print(f"held-out loss before recovery: {eval_loss(pruned, task):.4f} "
      f"(base {eval_loss(model, task):.4f})")

import json
with open("out-demo/decision.json", "w") as f:
    json.dump(decision.to_json(), f, indent=2)
print("\ndecision written to out-demo/decision.json")
