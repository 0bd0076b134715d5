import math

import numpy as np
import pytest

from fogsim.errors import ConfigError, DataError
from fogsim.models import (
    Dataset,
    centralized_train,
    compute_gradient,
    compute_loss,
    distribution_similarity,
    evaluate,
    generate_partitions,
    init_model,
    local_update,
)

from conftest import make_dataset, random_dataset


class TestInitModel:
    def test_zero_vector_binary(self):
        params = init_model(2, 2)
        assert params.shape == (4,)
        assert np.all(params == 0.0)

    def test_length_is_feature_dim_times_classes(self):
        assert init_model(3, 4).shape == (12,)

    def test_rejects_single_class(self):
        with pytest.raises(ConfigError):
            init_model(3, 1)

    def test_initial_loss_is_log_class_count(self, rng):
        data = random_dataset(rng, 40, 4, 3)
        report = evaluate(init_model(4, 3), data)
        assert report.loss == pytest.approx(math.log(3), rel=1e-12)


class TestComputeGradient:
    def test_zero_weights_single_sample(self):
        # softmax at w=0 is uniform, so the true-class block is (p-1)*x
        data = make_dataset([[1.0, 2.0]], [1])
        grad = compute_gradient(np.zeros(4), data)
        assert grad == pytest.approx([0.5, 1.0, -0.5, -1.0], abs=1e-15)

    def test_matches_central_finite_differences(self, rng):
        for _ in range(100):
            d = int(rng.integers(2, 6))
            c = int(rng.integers(2, 5))
            n = int(rng.integers(1, 12))
            data = random_dataset(rng, n, d, c)
            params = rng.normal(scale=0.8, size=d * c)
            grad = compute_gradient(params, data)
            fd = np.empty_like(grad)
            h = 1e-5
            for j in range(params.size):
                up = params.copy()
                up[j] += h
                down = params.copy()
                down[j] -= h
                fd[j] = (compute_loss(up, data) - compute_loss(down, data)) / (2 * h)
            assert np.allclose(grad, fd, rtol=1e-4, atol=1e-6)

    def test_vanishes_at_descent_minimizer(self):
        # overlapping classes keep the minimizer finite; long-run descent finds it
        data = make_dataset(
            [[1.0, 0.0], [1.0, 0.0], [1.0, 0.5], [0.0, 1.0], [0.2, 1.0], [0.0, 1.0]],
            [0, 1, 0, 1, 0, 1],
        )
        params = local_update(np.zeros(4), data, steps=60000, lr=1.0)
        assert np.linalg.norm(compute_gradient(params, data)) < 1e-8

    def test_empty_batch_rejected(self):
        with pytest.raises(DataError):
            compute_gradient(np.zeros(4), Dataset.empty(2))


class TestLocalUpdate:
    def test_zero_steps_identity(self, rng):
        data = random_dataset(rng, 10, 3, 2)
        params = rng.normal(size=6)
        out = local_update(params, data, 0, 0.1)
        assert np.array_equal(out, params)
        assert out is not params

    def test_quadratic_surrogate_step(self):
        # the same rule w' = w - lr * grad on loss 0.5*(w-1)^2 from w=0
        w = 0.0
        w = w - 0.1 * (w - 1.0)
        assert w == pytest.approx(0.1)

    def test_single_step_is_one_gradient_move(self, rng):
        data = random_dataset(rng, 15, 4, 3)
        params = rng.normal(size=12)
        expected = params - 0.2 * compute_gradient(params, data)
        assert np.array_equal(local_update(params, data, 1, 0.2), expected)

    def test_two_steps_compose(self, rng):
        data = random_dataset(rng, 15, 4, 3)
        params = rng.normal(size=12)
        once_twice = local_update(local_update(params, data, 1, 0.1), data, 1, 0.1)
        assert np.array_equal(local_update(params, data, 2, 0.1), once_twice)

    def test_empty_dataset_returns_params_unchanged(self):
        params = np.arange(4.0)
        out = local_update(params, Dataset.empty(2), 5, 0.1)
        assert np.array_equal(out, params)


class TestEvaluate:
    def test_uniform_prediction_loss(self, rng):
        data = random_dataset(rng, 30, 5, 3)
        assert evaluate(np.zeros(15), data).loss == pytest.approx(math.log(3), rel=1e-12)

    def test_separable_data_reaches_full_accuracy(self, rng):
        feats = np.concatenate([
            rng.normal(loc=(-3.0, 0.0), scale=0.3, size=(30, 2)),
            rng.normal(loc=(3.0, 0.0), scale=0.3, size=(30, 2)),
        ])
        labels = np.array([0] * 30 + [1] * 30)
        data = make_dataset(feats, labels)
        params = local_update(np.zeros(4), data, steps=500, lr=0.5)
        assert evaluate(params, data).accuracy == 1.0

    def test_accuracy_in_unit_interval(self, rng):
        for _ in range(20):
            data = random_dataset(rng, 8, 3, 4)
            params = rng.normal(size=12)
            assert 0.0 <= evaluate(params, data).accuracy <= 1.0

    def test_argmax_ties_break_to_lowest_class(self):
        # zero params tie every class; the lowest class index wins
        data = make_dataset([[1.0], [2.0], [3.0]], [0, 1, 2])
        assert evaluate(np.zeros(3), data).accuracy == pytest.approx(1 / 3)

    def test_empty_dataset_rejected(self):
        with pytest.raises(DataError):
            evaluate(np.zeros(4), Dataset.empty(2))


class TestCentralizedTrain:
    def test_equals_local_update_on_pooled_data(self, rng):
        data = random_dataset(rng, 60, 4, 3)
        direct = local_update(init_model(4, 3), data, 3 * 5, 0.05)
        assert np.array_equal(centralized_train(data, 3, 5, 0.05, class_count=3), direct)

    def test_loss_non_increasing_with_small_lr(self, rng):
        feats = rng.normal(size=(80, 6))
        feats = (feats - feats.mean(axis=0)) / feats.std(axis=0)
        data = make_dataset(feats, rng.integers(0, 3, size=80))
        params = init_model(6, 3)
        losses = [compute_loss(params, data)]
        for _ in range(200):
            params = local_update(params, data, 1, 0.05)
            losses.append(compute_loss(params, data))
        diffs = np.diff(losses)
        assert np.all(diffs <= 1e-12)

    def test_deterministic_under_seed(self):
        a = generate_partitions(5, 30, 4, 3, 0.7, seed=42)
        b = generate_partitions(5, 30, 4, 3, 0.7, seed=42)
        pooled_a = Dataset.concatenate(a.device_data)
        pooled_b = Dataset.concatenate(b.device_data)
        assert np.array_equal(pooled_a.features, pooled_b.features)
        wa = centralized_train(pooled_a, 5, 2, 0.05, class_count=3)
        wb = centralized_train(pooled_b, 5, 2, 0.05, class_count=3)
        assert np.array_equal(wa, wb)


class TestGeneratePartitions:
    def test_total_sample_conservation(self):
        parts = generate_partitions(7, 33, 4, 3, 0.5, seed=0)
        assert sum(len(d) for d in parts.device_data) == 7 * 33

    def _mean_tv(self, alpha: float, seed: int) -> float:
        parts = generate_partitions(20, 200, 4, 5, alpha, seed=seed)
        pooled = Dataset.concatenate(parts.device_data)
        q = pooled.label_histogram(5)
        q /= q.sum()
        tvs = []
        for ds in parts.device_data:
            p = ds.label_histogram(5)
            p /= p.sum()
            tvs.append(0.5 * np.abs(p - q).sum())
        return float(np.mean(tvs))

    def test_high_alpha_is_nearly_iid(self):
        tv = np.mean([self._mean_tv(1000.0, seed) for seed in range(3)])
        assert tv < 0.05

    def test_low_alpha_is_heavily_skewed(self):
        tv = np.mean([self._mean_tv(0.1, seed) for seed in range(3)])
        assert tv > 0.4

    def test_deterministic_under_seed(self):
        a = generate_partitions(4, 25, 3, 3, 0.3, seed=9)
        b = generate_partitions(4, 25, 3, 3, 0.3, seed=9)
        for da, db in zip(a.device_data, b.device_data):
            assert np.array_equal(da.features, db.features)
            assert np.array_equal(da.labels, db.labels)
        assert np.array_equal(a.test_data.features, b.test_data.features)

    def test_rejects_nonpositive_alpha(self):
        with pytest.raises(ConfigError):
            generate_partitions(4, 25, 3, 3, 0.0, seed=0)


class TestDistributionSimilarity:
    def test_identical_histograms(self):
        a = make_dataset([[0.0]] * 4, [0, 0, 1, 1])
        b = make_dataset([[1.0]] * 8, [0, 1, 0, 1, 0, 0, 1, 1])
        assert distribution_similarity(a, b) == pytest.approx(1.0)

    def test_disjoint_supports(self):
        a = make_dataset([[0.0]] * 2, [0, 0])
        b = make_dataset([[0.0]] * 2, [1, 1])
        assert distribution_similarity(a, b) == pytest.approx(0.0)

    def test_half_overlap(self):
        local = make_dataset([[0.0]] * 2, [0, 1])
        global_ = make_dataset([[0.0]] * 1, [0])
        assert distribution_similarity(local, global_) == pytest.approx(0.5)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            distribution_similarity(Dataset.empty(1), make_dataset([[0.0]], [0]))
