"""Score the classic pruning criteria against each other on one calibration set.

Reproduces the shape of the calibration-loss analysis: random search over
masks, sensitivity analysis, input-output similarity, MSE scoring, and the
first/last-keeping uniform heuristic. Low calibration loss does not order the
methods the way post-recovery quality does; demo 04 closes that loop.
"""

import numpy as np

from ditprune.runtime import tune_allocator
from ditprune import baselines
from ditprune.checkpoint import Checkpoint
from ditprune.task import DiffusionTask

tune_allocator()

ckpt = Checkpoint.load("out-demo/base.tfck")
model = ckpt.ema_model()
task = DiffusionTask(seq_len=model.config.seq_len,
                     num_timesteps=model.config.num_timesteps,
                     train_size=20_000, heldout_size=2048, seed=0)
calib = task.calibration_set(512, seed=7151)
keep = model.config.depth // 2

print("random search over 2000 masks (50% pruning)...")
result = baselines.random_search(model, task, calib, 2000, keep=keep, seed=1)
print(f"  min  {result.min_score.calibration_loss:.4f}  mask {result.min_score.bitstring()}")
print(f"  med  {result.median_score.calibration_loss:.4f}  mask {result.median_score.bitstring()}")
print(f"  max  {result.max_score.calibration_loss:.4f}  mask {result.max_score.bitstring()}")

hist = baselines.loss_histogram(result.scores, bins=20)
peak = max(hist["counts"])
print("\ncalibration-loss histogram:")
for lo, hi, c in zip(hist["bin_edges"], hist["bin_edges"][1:], hist["counts"]):
    print(f"  {lo:6.3f}-{hi:6.3f} {'#' * int(40 * c / peak)}")

print("\nmetric-based masks:")
for name, fn in (("sensitivity", baselines.sensitivity_prune),
                 ("similarity", baselines.similarity_prune),
                 ("mse", baselines.mse_prune)):
    mask = fn(model, task, calib, keep)
    loss = baselines.calibration_loss(model, mask, task, calib)
    kept = list(np.flatnonzero(mask))
    print(f"  {name:12s} keeps {kept}  calib loss {loss:.4f}")

oracle = baselines.oracle_prune(model.config.depth, keep)
print(f"  {'oracle':12s} keeps {list(np.flatnonzero(oracle))}  calib loss "
      f"{baselines.calibration_loss(model, oracle, task, calib):.4f}")
