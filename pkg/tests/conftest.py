import numpy as np
import pytest

from ditprune.runtime import tune_allocator
from ditprune.model import ToyDiTConfig
from ditprune.task import DiffusionTask
from ditprune.train import TrainConfig, train_base

tune_allocator()

# Experiment scale shared by the heavy unit tests and the acceptance suite.
# Narrow layers (d=16) make depth genuinely matter on this task, and 400
# diffusion steps push the terminal signal level low enough that the reverse
# loop can start from white noise. Training runs in minutes on 2 CPUs; the
# session fixtures below are built once and reused everywhere.
SMALL = dict(depth=8, hidden_dim=16, heads=4, mlp_ratio=4.0, seq_len=8,
             in_dim=2, num_timesteps=400)
TINY = dict(depth=4, hidden_dim=16, heads=4, mlp_ratio=2.0, seq_len=4,
            in_dim=2, num_timesteps=20)

EXP_TASK_KW = dict(seq_len=8, num_timesteps=400, train_size=20_000,
                   heldout_size=2048, seed=0)
BASE_TRAIN_STEPS = 12_000
BASE_BATCH = 64
EXP_BATCH = 32          # recovery / mask-learning batch size
EXP_LEARN_STEPS = 2000  # mask-learning budget
EXP_RECOVER_STEPS = 5000


@pytest.fixture(scope="session")
def small_cfg():
    return ToyDiTConfig(**SMALL)


@pytest.fixture(scope="session")
def small_task():
    return DiffusionTask(**EXP_TASK_KW)


@pytest.fixture(scope="session")
def tiny_cfg():
    return ToyDiTConfig(**TINY)


@pytest.fixture(scope="session")
def tiny_task():
    return DiffusionTask(seq_len=TINY["seq_len"], num_timesteps=TINY["num_timesteps"],
                         train_size=2000, heldout_size=256, seed=0)


@pytest.fixture(scope="session")
def base_small(small_cfg, small_task):
    """Well-trained small base model checkpoint, shared across the session."""
    return train_base(small_cfg, small_task, BASE_TRAIN_STEPS,
                      TrainConfig(batch_size=BASE_BATCH), seed=0)


@pytest.fixture(scope="session")
def base_tiny(tiny_cfg, tiny_task):
    return train_base(tiny_cfg, tiny_task, 300, TrainConfig(batch_size=32), seed=0)


def randomize_model(model, seed=0, std=0.25):
    """Overwrite every parameter with Gaussian noise (zero-inits included)."""
    rng = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        p.data = rng.normal(0.0, std, size=p.shape)
    return model
