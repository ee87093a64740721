import json
import math

import numpy as np
import pytest

from ditprune import evaluate
from ditprune.checkpoint import from_model
from ditprune.errors import ConfigError
from ditprune.evaluate import (EvalReport, activation_stats, build_report,
                               check_task_match, eval_loss,
                               loss_from_predictions, sample_quality,
                               sliced_wasserstein, tensor_outlier_stats,
                               throughput_bench)
from ditprune.model import ToyDiTConfig, ToyDiTModel
from ditprune.task import sample_mixture


class TestEvalLoss:
    def test_deterministic(self, base_tiny, tiny_task):
        model = base_tiny.ema_model()
        assert eval_loss(model, tiny_task) == eval_loss(model, tiny_task)

    def test_perfect_predictor_stub_is_zero(self):
        eps = np.random.default_rng(0).standard_normal((16, 4, 2))
        assert loss_from_predictions(eps.copy(), eps) == 0.0

    def test_teacher_beats_unrecovered_pruned_student(self, base_tiny, tiny_task):
        from ditprune.recover import apply_decision
        from ditprune.sampler import decision_from_mask
        teacher = base_tiny.ema_model()
        student = apply_decision(teacher,
                                 decision_from_mask(np.array([0.0, 1, 0, 1])))
        assert eval_loss(teacher, tiny_task) < eval_loss(student, tiny_task)


class TestSlicedWasserstein:
    def test_self_distance_small(self):
        a = sample_mixture(10_000, np.random.default_rng(1))
        b = sample_mixture(10_000, np.random.default_rng(2))
        assert sliced_wasserstein(a, b) < 0.05

    def test_point_mass_matches_quantile_brute_force(self):
        rng = np.random.default_rng(3)
        n = 4000
        mix = sample_mixture(n, rng)
        origin = np.zeros((n, 2))
        got = sliced_wasserstein(origin, mix)

        # independent recomputation: per-projection quantile differences
        prng = np.random.default_rng(evaluate.SW_PROJECTION_SEED)
        dirs = prng.standard_normal((2, evaluate.SW_PROJECTIONS))
        dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)
        qs = (np.arange(n) + 0.5) / n
        total = 0.0
        for j in range(evaluate.SW_PROJECTIONS):
            proj = np.sort(mix @ dirs[:, j])
            quantiles = np.quantile(proj, qs)
            total += float((quantiles ** 2).mean())
        brute = math.sqrt(total / evaluate.SW_PROJECTIONS)
        assert abs(got - brute) / brute < 0.10

    def test_deterministic_given_seeds(self, base_tiny):
        model = base_tiny.ema_model()
        a = sample_quality(model, 200, seed=4, sample_steps=10)
        b = sample_quality(model, 200, seed=4, sample_steps=10)
        assert a == b

    def test_minimum_sample_count(self, base_tiny):
        with pytest.raises(ConfigError):
            sample_quality(base_tiny.model(), 50, seed=0)

    def test_shape_guard(self):
        with pytest.raises(ConfigError):
            sliced_wasserstein(np.zeros((5, 2)), np.zeros((6, 2)))


class TestActivationStats:
    def test_constant_layer_gets_inf_sentinel(self):
        stats = tensor_outlier_stats(np.full((8, 4), 2.5))
        assert stats["std"] == 0.0
        assert math.isinf(stats["max_ratio"])

    def test_planted_outlier_ratio(self):
        rng = np.random.default_rng(5)
        arr = rng.standard_normal(2000)
        arr[77] = 50.0 * arr.std()
        stats = tensor_outlier_stats(arr)
        assert stats["max_ratio"] >= 20.0

    def test_matches_independent_recomputation(self, base_tiny, tiny_task):
        from ditprune.model import forward
        model = base_tiny.ema_model()
        stats = activation_stats(model, tiny_task, batch_size=64, seed=9)
        rng = np.random.default_rng(9)
        batch = tiny_task.sample_batch(rng, 64)
        _, hidden = forward(model, batch.tokens, batch.t, collect_hidden=True)
        for i, s in enumerate(stats):
            arr = hidden[i + 1].data
            mu = arr.mean()
            sd = arr.std()
            assert abs(s["mean"] - mu) <= 1e-10
            assert abs(s["std"] - sd) <= 1e-10
            assert abs(s["max_ratio"] - np.abs(arr - mu).max() / sd) <= 1e-10


class TestThroughput:
    def test_same_depth_speedup_is_one(self):
        cfg = ToyDiTConfig(depth=2, hidden_dim=16, heads=4, seq_len=4,
                           num_timesteps=10)
        table = throughput_bench([2], config=cfg, batch=8, trials=5)
        assert table["results"][0]["speedup"] == 1.0

    def test_trials_guard(self):
        with pytest.raises(ConfigError):
            throughput_bench([2], trials=3)

    def test_float32_mode(self):
        cfg = ToyDiTConfig(depth=2, hidden_dim=16, heads=4, seq_len=4,
                           num_timesteps=10)
        table = throughput_bench([2, 1], config=cfg, batch=8, trials=5,
                                 dtype="float32")
        assert table["dtype"] == "float32"
        assert len(table["results"]) == 2


class TestReports:
    def test_pure_function_of_inputs(self, base_tiny, tiny_task, tmp_path):
        reports = []
        for _ in range(2):
            r = build_report(base_tiny, tiny_task, model_id="m", config_hash="h",
                             seed=3, sample_n=200, sample_steps=10)
            reports.append(json.dumps(r.to_json(), sort_keys=True))
        assert reports[0] == reports[1]

    def test_param_count_equals_blob_sum(self, base_tiny):
        total = sum(arr.size for arr in base_tiny.params.values())
        assert base_tiny.param_count() == total

    def test_depth_pruning_param_share(self, base_tiny):
        """Halving transformer depth removes exactly the per-layer share."""
        from ditprune.recover import apply_decision
        from ditprune.sampler import decision_from_mask
        model = base_tiny.model()
        pruned = apply_decision(model, decision_from_mask(np.array([1.0, 0, 1, 0])))
        layer_params = sum(p.size for name, p in model.named_parameters()
                           if name.startswith("layers."))
        expected = model.param_count() - layer_params // 2
        assert pruned.param_count() == expected

    def test_task_mismatch_refused(self, base_tiny, tiny_task, small_task):
        r1 = build_report(base_tiny, tiny_task, "a", "h", sample_n=0,
                          with_samples=False)
        r2 = build_report(base_tiny, tiny_task, "b", "h", sample_n=0,
                          with_samples=False)
        check_task_match([r1, r2])
        r3 = EvalReport(**{**r2.to_json(), "task": small_task.describe()})
        with pytest.raises(ConfigError):
            check_task_match([r1, r3])

    def test_flags_on_non_finite(self, tiny_cfg, tiny_task):
        model = ToyDiTModel.init(tiny_cfg, seed=0)
        model.layer_param(0, "w_up").data[:] = 1e200
        model.layer_param(0, "w_down").data[:] = 1e200
        ck = from_model(model, step=0, seed=0, ema_decay=0.999)
        report = build_report(ck, tiny_task, "broken", "h", with_samples=False)
        assert "heldout_loss_non_finite" in report.flags
