"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest -s tests/test_acceptance.py` to see the per-criterion lines.
The heavy experiments (planted convergence, trend reproduction, distillation
benefit) share the session-scoped trained base model from conftest and spread
their independent runs over a small process pool.
"""

import math
import time

import numpy as np
import pytest

import acceptance_helpers as ah
from conftest import EXP_BATCH, EXP_LEARN_STEPS, EXP_RECOVER_STEPS, EXP_TASK_KW
from ditprune import baselines
from ditprune.checkpoint import serialize
from ditprune.distill import DistillConfig, block_alignment, distill_finetune, \
    masked_repkd_loss
from ditprune.evaluate import throughput_bench
from ditprune.model import ToyDiTConfig, ToyDiTModel, diffusion_loss, forward, \
    extract_submodel
from ditprune.recover import apply_decision
from ditprune.sampler import (MaskDistribution, NMScheme, decide,
                              enumerate_candidates, global_search_space_size,
                              sample_gates_many, sample_many)
from ditprune.task import DiffusionTask
from ditprune.tensor import grad_check
from test_tensor import OP_CASES

WORKERS = 2


def _report(criterion: str, ok: bool, detail: str) -> None:
    print(f"\n[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
    assert ok, f"{criterion}: {detail}"


@pytest.fixture(scope="module")
def base_bytes(base_small):
    return serialize(base_small)


@pytest.fixture(scope="module")
def exp_results(base_bytes, base_small, small_task):
    """Trend + distillation experiment shared by criteria 7 and 9.

    Per seed: learn a mask (1:2), recover it with plain fine-tuning and with
    masked distillation, and recover the oracle and min-calibration-loss masks
    with plain fine-tuning at the same budget.
    """
    teacher = base_small.ema_model()
    calib = small_task.calibration_set(512, seed=7151)
    search = baselines.random_search(teacher, small_task, calib, 2000,
                                     keep=teacher.config.depth // 2, seed=1)
    min_mask = search.min_score.mask
    oracle_mask = baselines.oracle_prune(teacher.config.depth,
                                         teacher.config.depth // 2)
    jobs = []
    for seed in (0, 1, 2):
        for method, mask in (("learnable", None), ("oracle", oracle_mask),
                             ("min-loss", min_mask)):
            jobs.append((base_bytes, EXP_TASK_KW, method, seed,
                         None if mask is None else list(mask),
                         EXP_LEARN_STEPS, EXP_RECOVER_STEPS, EXP_BATCH))
    rows = ah.run_pool(ah.trend_cell, jobs, workers=WORKERS)
    out = {}
    for row in rows:
        out[(row["method"], row["seed"])] = row
    out["min_mask"] = min_mask
    out["oracle_mask"] = oracle_mask
    return out


class TestCriterion01GradientCorrectness:
    def test_gradient_correctness(self):
        start = time.time()
        worst_name, worst = "", 0.0
        for name, case in sorted(OP_CASES.items()):
            rng = np.random.default_rng(abs(hash(name)) % (2 ** 32))
            for _ in range(10):
                f, point = case(rng)
                err = grad_check(f, point)
                if err > worst:
                    worst_name, worst = name, err

        cfg = ToyDiTConfig(depth=2, hidden_dim=16, heads=4, mlp_ratio=2.0,
                           seq_len=4, num_timesteps=10)
        task = DiffusionTask(seq_len=4, num_timesteps=10, train_size=64,
                             heldout_size=16, seed=0)
        model = ToyDiTModel.init(cfg, seed=1)
        rng = np.random.default_rng(2)
        for _, p in model.named_parameters():
            p.data = rng.normal(0.0, 0.25, size=p.shape)
        batch = task.sample_batch(rng, 4)
        for pname in ("layers.0.wq", "layers.1.w_down", "w_out"):
            target = model.params[pname]

            def f(t, pname=pname):
                model.params[pname] = t
                return diffusion_loss(model, batch)

            err = grad_check(f, target.data.copy())
            model.params[pname] = target
            if err > worst:
                worst_name, worst = f"diffusion_loss/{pname}", err
        elapsed = time.time() - start
        ok = worst < 1e-5 and elapsed < 120.0
        _report("criterion 1 (gradient correctness)", ok,
                f"max rel err {worst:.2e} at {worst_name}, {elapsed:.0f}s")


class TestCriterion02MaskValidity:
    def test_mask_validity(self):
        violations = 0
        for n, m in ((1, 2), (2, 4)):
            scheme = NMScheme(n, m, 8)
            dist = MaskDistribution(scheme,
                                    np.random.default_rng(3).normal(size=(
                                        scheme.num_blocks, scheme.num_candidates)))
            gates = sample_gates_many(dist, 100_000, np.random.default_rng(n))
            blocks = gates.reshape(100_000, scheme.num_blocks, m)
            violations += int((blocks.sum(axis=2) != n).sum())
        _report("criterion 2 (mask validity)", violations == 0,
                f"{violations} violations over 2x100k draws")


class TestCriterion03GumbelFidelity:
    def test_gumbel_fidelity(self):
        logits = np.array([1.0, 0.0, -1.0])
        idx = sample_many(logits, 100_000, np.random.default_rng(5))
        emp = np.bincount(idx, minlength=3) / 100_000
        probs = np.exp(logits) / np.exp(logits).sum()
        tv = 0.5 * float(np.abs(emp - probs).sum())
        _report("criterion 3 (Gumbel-max fidelity)", tv < 0.01,
                f"total-variation distance {tv:.4f} over 1e5 draws")


class TestCriterion04CandidateEnumeration:
    def test_candidate_enumeration(self):
        m23 = enumerate_candidates(2, 3)
        ref = np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
        ok = (np.array_equal(m23, ref)
              and len(enumerate_candidates(7, 14)) == 3432
              and global_search_space_size(28, 14) == 40_116_600)
        _report("criterion 4 (candidate enumeration)", ok,
                "2:3 matrix, C(14,7)=3432, C(28,14)=40116600")


class TestCriterion05MaskedForwardExactness:
    def test_masked_equals_shrunken(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for trial in range(20):
            cfg = ToyDiTConfig(depth=int(rng.integers(2, 7)), hidden_dim=16,
                               heads=4, mlp_ratio=2.0, seq_len=4,
                               num_timesteps=10)
            model = ToyDiTModel.init(cfg, seed=trial)
            for _, p in model.named_parameters():
                p.data = rng.normal(0.0, 0.3, size=p.shape)
            keep = 1 + int(rng.integers(0, cfg.depth))
            retained = sorted(rng.permutation(cfg.depth)[:keep].tolist())
            mask = np.zeros(cfg.depth)
            mask[retained] = 1.0
            tokens = rng.standard_normal((3, 4, 2))
            t = rng.integers(0, 10, size=3)
            a = forward(model, tokens, t, mask=mask).data
            b = forward(extract_submodel(model, retained), tokens, t).data
            worst = max(worst, float(np.abs(a - b).max()))
        _report("criterion 5 (gated forward exactness)", worst <= 1e-12,
                f"max |masked - shrunken| = {worst:.2e} over 20 pairs")


class TestCriterion06PlantedRedundancy:
    def test_planted_redundancy_convergence(self, base_bytes):
        start = time.time()
        jobs = [(base_bytes, EXP_TASK_KW, seed, 2000, EXP_BATCH)
                for seed in (0, 1, 2)]
        rows = ah.run_pool(ah.planted_convergence_cell, jobs, workers=WORKERS)
        good = 0
        details = []
        for row in rows:
            correct = row["pruned"] == row["planted"]
            confident = min(row["confidences"]) >= 0.9
            good += int(correct and confident)
            details.append(f"seed {row['seed']}: pruned {row['pruned']} "
                           f"min conf {min(row['confidences']):.3f}")
        elapsed = time.time() - start
        ok = good == 3 and elapsed < 600.0
        _report("criterion 6 (planted-redundancy convergence)", ok,
                f"{good}/3 seeds in {elapsed:.0f}s; " + "; ".join(details))


class TestCriterion07TrendReproduction:
    def test_recovery_ordering(self, exp_results):
        good = 0
        details = []
        for seed in (0, 1, 2):
            l = exp_results[("learnable", seed)]["finetune_loss"]
            o = exp_results[("oracle", seed)]["finetune_loss"]
            m = exp_results[("min-loss", seed)]["finetune_loss"]
            holds = l <= o <= m
            good += int(holds)
            details.append(f"seed {seed}: learnable {l:.4f} <= oracle {o:.4f} "
                           f"<= min-loss {m:.4f}: {holds}")
        ok = good >= 2
        _report("criterion 7 (recovery-ordering trend)", ok,
                f"{good}/3 seeds; " + "; ".join(details))


class TestCriterion08MaskedKDRobustness:
    def test_outlier_ratio_and_stability(self, base_small, small_task):
        rng = np.random.default_rng(21)
        teacher_h = rng.standard_normal((128, 32))
        student_h = teacher_h + 0.05 * rng.standard_normal((128, 32))
        spiked = teacher_h.copy()
        spiked[7, 7] = 100.0 * spiked.std()
        unmasked = masked_repkd_loss(student_h, spiked, k=1e12)
        masked = masked_repkd_loss(student_h, spiked, k=2.0)
        ratio = unmasked / masked

        teacher = base_small.ema_model()
        decision = decide(MaskDistribution(NMScheme(1, 2, teacher.config.depth)))
        student = apply_decision(teacher, decision)
        cfg = DistillConfig(steps=1000, batch_size=EXP_BATCH, k_sigma=2.0,
                            seed=0, log_every=50)
        task = ah.make_task(EXP_TASK_KW)
        _, rows = distill_finetune(student, teacher, task, cfg,
                                   alignment=block_alignment(
                                       teacher.config.depth, decision))
        finite = all(math.isfinite(r["total"]) and math.isfinite(r["loss_rep"])
                     for r in rows)
        ok = ratio >= 10.0 and finite and len(rows) > 0
        _report("criterion 8 (masked KD robustness)", ok,
                f"unmasked/masked ratio {ratio:.1f}, "
                f"1k-step distill all finite: {finite}")


class TestCriterion09DistillationBenefit:
    def test_distill_beats_finetune(self, exp_results):
        good = 0
        details = []
        for seed in (0, 1, 2):
            row = exp_results[("learnable", seed)]
            wins = row["distill_loss"] < row["finetune_loss"]
            good += int(wins)
            details.append(f"seed {seed}: distill {row['distill_loss']:.4f} "
                           f"vs plain {row['finetune_loss']:.4f}")
        ok = good >= 2
        _report("criterion 9 (distillation benefit)", ok,
                f"{good}/3 seeds; " + "; ".join(details))


class TestCriterion10DepthSpeedup:
    def test_halving_depth_speedup(self):
        start = time.time()
        cfg = ToyDiTConfig(depth=8, hidden_dim=64, heads=4, seq_len=16,
                           num_timesteps=100)
        table = throughput_bench([8, 4, 2], config=cfg, batch=256, trials=7)
        by_depth = {r["depth"]: r for r in table["results"]}
        speedup = by_depth[4]["speedup"]
        mono = by_depth[2]["speedup"] >= by_depth[4]["speedup"] >= 1.0
        elapsed = time.time() - start
        ok = 1.8 <= speedup <= 2.2 and mono and elapsed < 300.0
        _report("criterion 10 (depth-speedup linearity)", ok,
                f"L8->L4 speedup {speedup:.2f}, L8->L2 "
                f"{by_depth[2]['speedup']:.2f}, {elapsed:.0f}s")


class TestCriterion11Reproducibility:
    def test_pipeline_byte_identical(self, tmp_path):
        from ditprune.cli import main
        cfg_text = """\
output_dir = "UNUSED"

[model]
depth = 8
hidden_dim = 16
heads = 4
mlp_ratio = 2.0
seq_len = 4
num_timesteps = 20

[task]
train_size = 1500
heldout_size = 128

[train]
steps = 80
batch_size = 16

[prune]
steps = 50
batch_size = 16
calib_size = 32
search_samples = 20

[recover]
steps = 60
batch_size = 16

[eval]
sample_n = 200
sample_steps = 10
"""
        cfg_file = tmp_path / "repro.toml"
        cfg_file.write_text(cfg_text)
        digests = []
        for name in ("one", "two"):
            out = tmp_path / name
            for cmd in (["train-base"], ["prune-learn"],
                        ["distill", "--method", "learnable"]):
                assert main(cmd + ["--config", str(cfg_file),
                                   "--out", str(out)]) == 0
            student = next(out.glob("recover/*/student.tfck"))
            assert main(["eval", "--config", str(cfg_file), "--out", str(out),
                         "--checkpoint", str(student)]) == 0
            blobs = {}
            for p in sorted(out.rglob("*")):
                if p.is_file():
                    blobs[str(p.relative_to(out))] = p.read_bytes()
            digests.append(blobs)
        same_names = sorted(digests[0]) == sorted(digests[1])
        diff = [k for k in digests[0]
                if digests[0][k] != digests[1].get(k)]
        ok = same_names and not diff
        _report("criterion 11 (pipeline reproducibility)", ok,
                f"{len(digests[0])} artifacts byte-identical" if ok
                else f"differing artifacts: {diff}")
