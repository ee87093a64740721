import math

import numpy as np
import pytest

from ditprune import baselines
from ditprune.errors import ConfigError
from ditprune.model import forward, plant_identity_layer
from ditprune.sampler import NMScheme


@pytest.fixture(scope="module")
def calib(tiny_task):
    return tiny_task.calibration_set(size=96, seed=11)


@pytest.fixture(scope="module")
def trained(base_tiny):
    return base_tiny.ema_model()


class TestCalibrationLoss:
    def test_all_ones_matches_unpruned(self, trained, tiny_task, calib):
        a = baselines.calibration_loss(trained, None, tiny_task, calib)
        b = baselines.calibration_loss(trained, np.ones(4), tiny_task, calib)
        assert a == b

    def test_all_zeros_is_layerless_pass(self, trained, tiny_task, calib):
        loss = baselines.calibration_loss(trained, np.zeros(4), tiny_task, calib)
        assert math.isfinite(loss)
        full = baselines.calibration_loss(trained, None, tiny_task, calib)
        assert loss > full  # trained layers help

    def test_non_finite_flagged_not_raised(self, trained, tiny_task, calib):
        broken = trained.clone()
        broken.layer_param(0, "w_up").data[:] = 1e200
        broken.layer_param(0, "w_down").data[:] = 1e200
        loss = baselines.calibration_loss(broken, None, tiny_task, calib)
        assert math.isnan(loss)

    def test_min_under_median_over_random_masks(self, trained, tiny_task, calib):
        result = baselines.random_search(trained, tiny_task, calib, 64,
                                         keep=2, seed=3)
        assert (result.min_score.calibration_loss
                < result.median_score.calibration_loss)


class TestRandomSearch:
    def test_single_sample_is_all_three(self, trained, tiny_task, calib):
        result = baselines.random_search(trained, tiny_task, calib, 1,
                                         keep=2, seed=0)
        assert result.min_score is result.median_score is result.max_score

    def test_positive_loss_range_at_desk_scale(self, base_small, small_task):
        calib = small_task.calibration_set(size=128, seed=5)
        result = baselines.random_search(base_small.ema_model(), small_task,
                                         calib, 200, keep=4, seed=1)
        spread = (result.max_score.calibration_loss
                  - result.min_score.calibration_loss)
        assert spread > 0.0

    def test_seed_reproducibility(self, trained, tiny_task, calib):
        a = baselines.random_search(trained, tiny_task, calib, 16, keep=2, seed=9)
        b = baselines.random_search(trained, tiny_task, calib, 16, keep=2, seed=9)
        for sa, sb in zip(a.scores, b.scores):
            np.testing.assert_array_equal(sa.mask, sb.mask)
            assert sa.calibration_loss == sb.calibration_loss

    def test_scheme_masks_are_blockwise(self, trained, tiny_task, calib):
        scheme = NMScheme(1, 2, 4)
        result = baselines.random_search(trained, tiny_task, calib, 32,
                                         scheme=scheme, seed=2)
        for s in result.scores:
            blocks = s.mask.reshape(2, 2)
            assert np.all(blocks.sum(axis=1) == 1)

    def test_exactly_one_of_keep_or_scheme(self, trained, tiny_task, calib):
        with pytest.raises(ConfigError):
            baselines.random_search(trained, tiny_task, calib, 4, seed=0)


class TestSensitivity:
    def test_planted_identity_removed_first(self, base_tiny, tiny_task, calib):
        model = base_tiny.ema_model()
        plant_identity_layer(model, 2)
        scores = baselines.sensitivity_scores(model, tiny_task, calib)
        assert scores[2] == 0.0
        mask = baselines.sensitivity_prune(model, tiny_task, calib, keep=3)
        assert mask[2] == 0.0

    def test_exact_keep_count(self, trained, tiny_task, calib):
        for keep in (1, 2, 3):
            assert baselines.sensitivity_prune(trained, tiny_task, calib,
                                               keep).sum() == keep

    def test_scores_match_brute_force(self, trained, tiny_task, calib):
        scores = baselines.sensitivity_scores(trained, tiny_task, calib)
        base = baselines.calibration_loss(trained, None, tiny_task, calib)
        for i in range(4):
            mask = np.ones(4)
            mask[i] = 0.0
            brute = baselines.calibration_loss(trained, mask, tiny_task, calib) - base
            assert abs(scores[i] - brute) <= 1e-10


class TestSimilarity:
    def test_planted_identity_has_similarity_one(self, base_tiny, tiny_task, calib):
        model = base_tiny.ema_model()
        plant_identity_layer(model, 1)
        scores = baselines.similarity_scores(model, tiny_task, calib)
        assert scores[1] == pytest.approx(1.0, abs=1e-12)
        mask = baselines.similarity_prune(model, tiny_task, calib, keep=3)
        assert mask[1] == 0.0

    def test_range(self, trained, tiny_task, calib):
        scores = baselines.similarity_scores(trained, tiny_task, calib)
        assert np.all(scores >= -1.0 - 1e-12) and np.all(scores <= 1.0 + 1e-12)

    def test_matches_independent_cosine(self, trained, tiny_task, calib):
        scores = baselines.similarity_scores(trained, tiny_task, calib)
        totals = np.zeros(4)
        count = 0
        for batch in baselines._stat_batches(trained, tiny_task, calib):
            _, hidden = forward(trained, batch.tokens, batch.t,
                                collect_hidden=True)
            arrs = [h.data for h in hidden]
            for i in range(4):
                for x, y in zip(arrs[i], arrs[i + 1]):
                    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
                    totals[i] += (x @ y) / (nx * ny) if nx * ny > 0 else 1.0
            count += len(arrs[0])
        np.testing.assert_allclose(scores, totals / count, atol=1e-10)


class TestMse:
    def test_planted_identity_has_zero_mse(self, base_tiny, tiny_task, calib):
        model = base_tiny.ema_model()
        plant_identity_layer(model, 3)
        scores = baselines.mse_scores(model, tiny_task, calib)
        assert scores[3] == 0.0
        mask = baselines.mse_prune(model, tiny_task, calib, keep=3)
        assert mask[3] == 0.0

    def test_scores_non_negative(self, trained, tiny_task, calib):
        assert np.all(baselines.mse_scores(trained, tiny_task, calib) >= 0.0)

    def test_matches_brute_force(self, trained, tiny_task, calib):
        scores = baselines.mse_scores(trained, tiny_task, calib)
        totals = np.zeros(4)
        count = 0
        for batch in baselines._stat_batches(trained, tiny_task, calib):
            _, hidden = forward(trained, batch.tokens, batch.t,
                                collect_hidden=True)
            arrs = [h.data for h in hidden]
            for i in range(4):
                totals[i] += sum(float((y - x) @ (y - x))
                                 for x, y in zip(arrs[i], arrs[i + 1]))
            count += len(arrs[0])
        np.testing.assert_allclose(scores, totals / count, atol=1e-10)


class TestOracle:
    def test_reference_28_to_14(self):
        mask = baselines.oracle_prune(28, 14)
        kept = sorted(np.flatnonzero(mask))
        assert kept == [0, 2, 4, 6, 8, 10, 12, 15, 17, 19, 21, 23, 25, 27]

    def test_8_to_4(self):
        assert sorted(np.flatnonzero(baselines.oracle_prune(8, 4))) == [0, 2, 5, 7]

    def test_4_to_2(self):
        assert sorted(np.flatnonzero(baselines.oracle_prune(4, 2))) == [0, 3]

    def test_keep_below_two_rejected(self):
        with pytest.raises(ConfigError):
            baselines.oracle_prune(8, 1)


class TestSanityOrdering:
    def test_min_random_vs_metric_masks(self, trained, tiny_task, calib):
        """The best random mask should beat (or tie) metric-picked masks on
        calibration loss; any exception is surfaced, not hidden."""
        result = baselines.random_search(trained, tiny_task, calib, 400,
                                         keep=2, seed=4)
        best = result.min_score.calibration_loss
        discrepancies = []
        for name, fn in (("sensitivity", baselines.sensitivity_prune),
                         ("similarity", baselines.similarity_prune),
                         ("mse", baselines.mse_prune)):
            mask = fn(trained, tiny_task, calib, keep=2)
            loss = baselines.calibration_loss(trained, mask, tiny_task, calib)
            if best > loss + 1e-12:
                discrepancies.append((name, best, loss))
        # keep=2 of depth 4 has only C(4,2)=6 masks; 400 draws cover them all
        assert discrepancies == []


class TestExports:
    def test_rows_and_histogram(self, trained, tiny_task, calib):
        result = baselines.random_search(trained, tiny_task, calib, 32,
                                         keep=2, seed=6)
        rows = baselines.scores_to_rows(result.scores)
        assert len(rows) == 32
        assert set(rows[0]) == {"mask", "loss", "method"}
        assert all(len(r["mask"]) == 4 for r in rows)
        hist = baselines.loss_histogram(result.scores, bins=8)
        assert sum(hist["counts"]) + hist["non_finite"] == 32
        assert len(hist["bin_edges"]) == len(hist["counts"]) + 1
