import math

import numpy as np
import pytest

from tsrate.core import CriterionKind
from tsrate.features import ENCODER_VERSION
from tsrate.rater import (
    DEFAULT_ARCH,
    PairBatch,
    RaterWeights,
    TrainConfig,
    forward,
    forward_many,
    init_weights,
    pairwise_accuracy,
    pairwise_loss_and_grad,
    parameter_count,
    train_single,
)

RNG = np.random.default_rng(2024)


def random_batch(n, seed=0):
    rng = np.random.default_rng(seed)
    return PairBatch(
        rng.normal(0, 1, (n, 24)), rng.normal(0, 1, (n, 24)), rng.uniform(0, 1, n)
    )


class TestForward:
    def test_zero_weights_zero_score(self):
        weights = init_weights(0)
        weights.theta[:] = 0.0
        for _ in range(3):
            assert forward(weights, RNG.normal(0, 1, 24)) == 0.0

    def test_deterministic(self):
        weights = init_weights(7)
        x = RNG.normal(0, 1, 24)
        assert forward(weights, x) == forward(weights, x)
        again = init_weights(7)
        assert forward(again, x) == forward(weights, x)

    def test_dimension_mismatch(self):
        weights = init_weights(0)
        with pytest.raises(ValueError, match="feature vector"):
            forward(weights, np.zeros(10))

    def test_forward_many_matches_single(self):
        weights = init_weights(3)
        xs = RNG.normal(0, 1, (6, 24))
        stacked = forward_many(weights, xs)
        singles = np.array([forward(weights, x) for x in xs])
        np.testing.assert_allclose(stacked, singles, atol=1e-12)

    def test_parameter_count(self):
        f, h = 24, 256
        expected = (f * h + 3 * h) + (h * h + 3 * h) + (h + 1)
        assert parameter_count(DEFAULT_ARCH) == expected
        assert init_weights(0).theta.size == expected


class TestLoss:
    def test_identical_features_log2(self):
        weights = init_weights(1)
        x = RNG.normal(0, 1, (3, 24))
        batch = PairBatch(x, x.copy(), np.full(3, 0.7))
        loss, _ = pairwise_loss_and_grad(weights, batch)
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)

    def test_half_confidence_stationary_at_zero_delta(self):
        weights = init_weights(2)
        x = RNG.normal(0, 1, (4, 24))
        batch = PairBatch(x, x.copy(), np.full(4, 0.5))
        _, grad = pairwise_loss_and_grad(weights, batch)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    def test_confidence_bounds_checked(self):
        with pytest.raises(ValueError):
            PairBatch(np.zeros((1, 24)), np.zeros((1, 24)), np.array([1.5]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        weights = init_weights(60)
        weights.theta += rng.normal(0, 0.05, weights.theta.shape)
        batch = random_batch(4, seed=6)
        _, grad = pairwise_loss_and_grad(weights, batch)
        h = 1e-5
        coords = rng.choice(weights.theta.size, size=40, replace=False)
        for c in coords:
            theta = weights.theta.copy()
            theta[c] += h
            lp, _ = pairwise_loss_and_grad(RaterWeights(theta=theta), batch)
            theta[c] -= 2 * h
            lm, _ = pairwise_loss_and_grad(RaterWeights(theta=theta), batch)
            fd = (lp - lm) / (2 * h)
            rel = abs(fd - grad[c]) / max(abs(fd), abs(grad[c]), 1e-4)
            assert rel < 1e-4


class TestTraining:
    def test_zero_learning_rate_keeps_weights(self):
        batch = random_batch(20, seed=1)
        config = TrainConfig(learning_rate=0.0, epochs=3, batch_size=8, seed=9)
        trained, _ = train_single(batch, config)
        assert np.array_equal(trained.theta, init_weights(9).theta)

    def test_same_seed_bitwise_identical(self):
        batch = random_batch(30, seed=2)
        config = TrainConfig(learning_rate=0.01, epochs=5, batch_size=8, seed=4)
        w1, t1 = train_single(batch, config)
        w2, t2 = train_single(batch, config)
        assert np.array_equal(w1.theta, w2.theta)
        assert t1 == t2

    def test_loss_decreases_on_learnable_task(self):
        rng = np.random.default_rng(8)
        direction = rng.normal(0, 1, 24)
        xi = rng.normal(0, 1, (120, 24))
        xj = rng.normal(0, 1, (120, 24))
        p = (xi @ direction > xj @ direction).astype(float)
        batch = PairBatch(xi, xj, p)
        _, trace = train_single(batch, TrainConfig(learning_rate=0.01, epochs=20, seed=0))
        assert trace[-1] < trace[0]

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            PairBatch(np.zeros((0, 24)), np.zeros((0, 24)), np.zeros(0))


class TestAccuracy:
    def test_perfect_and_constant_raters(self):
        xi = RNG.normal(0, 1, (10, 24))
        xj = RNG.normal(0, 1, (10, 24))
        weights = init_weights(12)
        scores_i = forward_many(weights, xi)
        scores_j = forward_many(weights, xj)
        p = (scores_i > scores_j).astype(float)
        batch = PairBatch(xi, xj, p)
        assert pairwise_accuracy(weights, batch) == 1.0

        flat = init_weights(0)
        flat.theta[:] = 0.0
        assert pairwise_accuracy(flat, batch) == 0.0  # zero deltas count wrong

    def test_ties_excluded(self):
        xi = RNG.normal(0, 1, (4, 24))
        xj = RNG.normal(0, 1, (4, 24))
        p = np.array([0.5, 0.5, 1.0, 0.0])
        weights = init_weights(1)
        batch = PairBatch(xi, xj, p)
        sub = PairBatch(xi[2:], xj[2:], p[2:])
        assert pairwise_accuracy(weights, batch) == pairwise_accuracy(weights, sub)

    def test_all_ties_error(self):
        batch = PairBatch(np.zeros((2, 24)), np.ones((2, 24)), np.array([0.5, 0.5]))
        with pytest.raises(ValueError, match="non-tie"):
            pairwise_accuracy(init_weights(0), batch)

    def test_shift_equivariance(self):
        xi = RNG.normal(0, 1, (12, 24))
        xj = RNG.normal(0, 1, (12, 24))
        p = RNG.choice([0.0, 1.0], 12)
        weights = init_weights(3)
        batch = PairBatch(xi, xj, p)
        base = pairwise_accuracy(weights, batch)
        shifted = weights.copy()
        shifted.theta[-1] += 123.0  # output bias shifts every score equally
        assert pairwise_accuracy(shifted, batch) == base


class TestSerialization:
    def test_round_trip_bit_identical(self, tmp_path):
        weights = init_weights(42, criterion=CriterionKind.PATTERN)
        weights.theta += 0.01
        path = tmp_path / "weights.bin"
        weights.save(path)
        loaded = RaterWeights.load(path)
        assert np.array_equal(loaded.theta, weights.theta)
        assert loaded.criterion is CriterionKind.PATTERN
        assert loaded.encoder_version == ENCODER_VERSION
        x = RNG.normal(0, 1, 24)
        assert forward(loaded, x) == forward(weights, x)

    def test_loader_rejects_truncated_payload(self, tmp_path):
        weights = init_weights(0)
        path = tmp_path / "weights.bin"
        weights.save(path)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(ValueError, match="payload"):
            RaterWeights.load(path)

    def test_loader_rejects_wrong_encoder(self, tmp_path):
        import json

        weights = init_weights(0)
        path = tmp_path / "weights.bin"
        weights.save(path)
        with open(path, "rb") as fh:
            header = json.loads(fh.readline())
            payload = fh.read()
        header["encoder_version"] = "tsfeat-v999"
        with open(path, "wb") as fh:
            fh.write(json.dumps(header).encode() + b"\n" + payload)
        with pytest.raises(ValueError, match="encoder"):
            RaterWeights.load(path)

    def test_wrong_parameter_count_rejected(self):
        with pytest.raises(ValueError, match="parameter count"):
            RaterWeights(theta=np.zeros(100))
