import math

import numpy as np
import pytest

from uatformer.backprop import loss_and_grad
from uatformer.linalg import ShapeError
from uatformer.losses import Loss, cross_entropy, mse
from uatformer.optim import (
    AdamState, TrainConfig, adam_step, batch_loss_and_grad, gd_step, sgd_minibatch_grad, train_loop,
)
from uatformer.transformer import init_block_params


class TestLosses:
    def test_cross_entropy_examples(self):
        assert cross_entropy([0, 1, 0], [0.0, 1.0, 0.0]) == 0.0
        assert abs(cross_entropy([1, 0, 0, 0], [0.25] * 4) - 1.386294) < 1e-6
        assert abs(cross_entropy([1, 0, 0], [0.5, 0.25, 0.25]) - 0.693147) < 1e-6

    def test_cross_entropy_floor_and_mismatch(self):
        assert math.isfinite(cross_entropy([1, 0], [0.0, 1.0]))
        with pytest.raises(ShapeError):
            cross_entropy([1, 0], [0.5, 0.25, 0.25])

    def test_cross_entropy_nonnegative(self, rng):
        for _ in range(50):
            p = rng.dirichlet(np.ones(5))
            assert cross_entropy(np.eye(5)[rng.integers(5)], p) >= 0

    def test_mse_examples(self, rng):
        a = rng.normal(size=(2, 2))
        assert mse(a, a) == 0.0
        assert mse(a + 1.0, a) == pytest.approx(1.0, abs=1e-15)
        b = rng.normal(size=(2, 2))
        loop = sum((a[i, j] - b[i, j]) ** 2 for i in range(2) for j in range(2)) / 4
        assert mse(a, b) == pytest.approx(loop, abs=1e-15)
        with pytest.raises(ShapeError):
            mse(a, np.ones((2, 3)))

    def test_column_restricted_loss(self, rng):
        pred, target = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        value, grad = Loss("mse", columns=[1]).value_and_grad(pred, target)
        assert value == pytest.approx(mse(pred[:, 1], target[:, 1]))
        assert not np.any(grad[:, [0, 2, 3]])

    def test_xent_head_matches_scalar_definition(self, rng):
        logits = rng.normal(size=(3, 4))
        target = np.eye(4)[[0, 2, 3]]
        expected = 0.0
        for i in range(3):
            z = np.exp(logits[i] - logits[i].max())
            expected += cross_entropy(target[i], z / z.sum()) / 3
        assert Loss("xent").value(logits, target) == pytest.approx(expected, abs=1e-14)


def scalar_params(value):
    return {"theta": np.array([value])}


class TestGd:
    def test_examples(self):
        assert gd_step(scalar_params(1.0), {"theta": np.array([0.5])}, 0.1)["theta"][0] == pytest.approx(0.95)
        assert gd_step(scalar_params(1.0), {"theta": np.array([0.0])}, 0.1)["theta"][0] == 1.0

    def test_two_steps_equal_one_summed(self, rng):
        p = {"a": rng.normal(size=(2, 3))}
        g1, g2 = {"a": rng.normal(size=(2, 3))}, {"a": rng.normal(size=(2, 3))}
        two = gd_step(gd_step(p, g1, 0.1), g2, 0.1)
        one = gd_step(p, {"a": g1["a"] + g2["a"]}, 0.1)
        np.testing.assert_allclose(two["a"], one["a"], atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            gd_step(scalar_params(1.0), {"theta": np.zeros(2)}, 0.1)

    def test_permutation_equivariant(self, rng):
        p, g = rng.normal(size=6), rng.normal(size=6)
        perm = rng.permutation(6)
        a = gd_step({"x": p}, {"x": g}, 0.3)["x"][perm]
        b = gd_step({"x": p[perm]}, {"x": g[perm]}, 0.3)["x"]
        np.testing.assert_array_equal(a, b)

    def test_block_params_round_trip(self, rng):
        p = init_block_params(4, 2, 6, rng)
        zeros = {k: np.zeros_like(v) for k, v in p.named_arrays().items()}
        q = gd_step(p, zeros, 0.5)
        for k, v in p.named_arrays().items():
            np.testing.assert_array_equal(q.named_arrays()[k], v)


class TestAdam:
    cfg = TrainConfig(learning_rate=0.1)

    def test_zero_gradient_is_fixed_point(self, rng):
        p = {"w": rng.normal(size=(3, 2))}
        state = AdamState.zeros_like(p)
        q = p
        for _ in range(10):
            q, state = adam_step(q, {"w": np.zeros((3, 2))}, state, self.cfg)
        np.testing.assert_array_equal(q["w"], p["w"])
        assert state.t == 10

    def test_first_step_is_signed_learning_rate(self, rng):
        g = rng.normal(size=20)
        q, _ = adam_step({"w": np.zeros(20)}, {"w": g}, AdamState(), self.cfg)
        np.testing.assert_allclose(q["w"], -0.1 * np.sign(g), atol=0.1 * 1e-6)

    def test_three_step_scalar_trace(self):
        # reference trace stepped by hand with plain floats
        theta, m, v, trace = 1.0, 0.0, 0.0, []
        for t in range(1, 4):
            m = 0.9 * m + 0.1
            v = 0.999 * v + 0.001
            theta -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            trace.append(theta)
        assert trace == pytest.approx([0.900000001, 0.800000002, 0.700000003], abs=1e-12)
        p, state = scalar_params(1.0), AdamState()
        for expected in trace:
            p, state = adam_step(p, {"theta": np.array([1.0])}, state, self.cfg)
            assert p["theta"][0] == pytest.approx(expected, abs=1e-15)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            TrainConfig(beta1=1.0)
        with pytest.raises(ValueError):
            TrainConfig(optimizer="rmsprop")


def toy_dataset(rng, count=12, n=3, d=4):
    return rng.normal(size=(count, n, d)), rng.normal(size=(count, n, d))


class TestMinibatch:
    def test_single_example(self, rng):
        p = init_block_params(4, 2, 6, rng, random_biases=True)
        X, Y = toy_dataset(rng)
        loss = Loss("mse")
        g = sgd_minibatch_grad((X, Y), [5], p, loss)
        single = loss_and_grad(p, X[5], Y[5], loss)[1]
        for k in g:
            np.testing.assert_allclose(g[k], single[k], atol=1e-13)

    def test_duplicates_do_not_change_mean(self, rng):
        p = init_block_params(4, 2, 6, rng, random_biases=True)
        X, Y = toy_dataset(rng)
        once = sgd_minibatch_grad((X, Y), [3], p, Loss("mse"))
        twice = sgd_minibatch_grad((X, Y), [3, 3], p, Loss("mse"))
        for k in once:
            np.testing.assert_allclose(once[k], twice[k], atol=1e-13)

    def test_full_batch_is_mean_of_examples(self, rng):
        p = init_block_params(4, 2, 6, rng, random_biases=True)
        X, Y = toy_dataset(rng)
        loss = Loss("mse")
        full = sgd_minibatch_grad((X, Y), np.arange(len(X)), p, loss)
        per = [loss_and_grad(p, X[i], Y[i], loss)[1] for i in range(len(X))]
        for k in full:
            np.testing.assert_allclose(full[k], sum(g[k] for g in per) / len(X), atol=1e-13)

    def test_empty_batch(self, rng):
        X, Y = toy_dataset(rng)
        with pytest.raises(ValueError):
            sgd_minibatch_grad((X, Y), [], init_block_params(4, 2, 6, rng), Loss())


class TestTrainLoop:
    def test_zero_learning_rate_keeps_params(self, rng):
        p = init_block_params(4, 2, 6, rng)
        q, hist = train_loop(p, toy_dataset(rng), TrainConfig(learning_rate=0.0, steps=5, optimizer="sgd", batch_size=4))
        assert len(hist) == 5
        for k, v in p.named_arrays().items():
            np.testing.assert_array_equal(q.named_arrays()[k], v)

    def test_zero_steps(self, rng):
        p = init_block_params(4, 2, 6, rng)
        q, hist = train_loop(p, toy_dataset(rng), TrainConfig(steps=0))
        assert len(hist) == 0 and q is p

    def test_seeded_replay_is_bitwise(self, rng):
        p = init_block_params(4, 2, 6, rng)
        data = toy_dataset(rng)
        cfg = TrainConfig(learning_rate=1e-2, steps=30, batch_size=5, seed=7)
        _, h1 = train_loop(p, data, cfg)
        _, h2 = train_loop(p, data, cfg)
        assert h1.tobytes() == h2.tobytes()

    @pytest.mark.parametrize("optimizer", ["gd", "sgd", "adam"])
    def test_loss_decreases(self, rng, optimizer):
        p = init_block_params(4, 2, 8, rng)
        X, _ = toy_dataset(rng, count=16)
        Y = 0.5 * X
        cfg = TrainConfig(learning_rate=0.05 if optimizer != "adam" else 1e-2, steps=200, batch_size=8,
                          optimizer=optimizer)
        _, hist = train_loop(p, (X, Y), cfg)
        assert hist[-10:].mean() < 0.5 * hist[:10].mean()

    def test_empty_dataset(self, rng):
        with pytest.raises(ValueError):
            train_loop(init_block_params(4, 2, 6, rng), (np.zeros((0, 3, 4)), np.zeros((0, 3, 4))), TrainConfig())
