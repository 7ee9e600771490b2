import numpy as np
import pytest

from uatformer.backprop import (
    CacheError, backward, finite_diff_grad, forward_cached, grad_check, hidden_delta, loss_and_grad,
    reference_loss, replay,
)
from uatformer.linalg import InvalidValueError, relu_deriv
from uatformer.losses import Loss
from uatformer.transformer import BlockParams, FfnParams, MhaParams, identity_ffn, init_block_params, transformer_block


def random_problem(rng, n=4, d=8, h=2, d_ff=16, layernorm=False, kind="mse"):
    p = init_block_params(d, h, d_ff, rng, use_layernorm=layernorm, random_biases=True)
    x = rng.normal(size=(n, d))
    target = rng.normal(size=(n, d)) if kind == "mse" else np.eye(d)[rng.integers(0, d, n)]
    return p, x, target


@pytest.mark.parametrize("layernorm", [False, True])
def test_forward_cached_matches_block_bitwise(rng, layernorm):
    p, x, _ = random_problem(rng, layernorm=layernorm)
    y, cache = forward_cached(x, p)
    assert y.tobytes() == transformer_block(x, p).tobytes()
    for w in cache.attn:
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)
    assert replay(cache, p).tobytes() == y.tobytes()


def test_reference_loss_agrees_with_forward(rng):
    for layernorm in (False, True):
        for kind in ("mse", "xent"):
            p, x, t = random_problem(rng, layernorm=layernorm, kind=kind)
            loss = Loss(kind)
            assert abs(float(reference_loss(p, x, t, loss)) - loss.value(transformer_block(x, p), t)) < 1e-12


def test_linear_ffn_closed_form(rng):
    """FFN-only model with identity activation region: dL/dW = 2 X^T (pred - target) / count."""
    d, n = 3, 5
    w = rng.normal(size=(d, d))
    # attention contributes nothing (wo = 0); hidden ReLU sees only positive
    # pre-activations via a large bias, so the FFN is affine
    base = init_block_params(d, 1, d, rng, use_residual=False)
    p = BlockParams(MhaParams(base.mha.heads, np.zeros((base.mha.wo.shape[0], d))),
                    FfnParams(np.eye(d), np.full(d, 100.0), w, -100.0 * w.sum(axis=0)), use_residual=False)
    # attention output is zero, so the FFN input is zero; use the hidden layer
    # input directly: h1 = 100, pred = 100 * 1^T w - 100 * 1^T w = 0. Instead
    # check the w2 gradient, whose input is h1.
    x = rng.normal(size=(n, d))
    target = rng.normal(size=(n, d))
    y, cache = forward_cached(x, p)
    value, dLdY = Loss("mse").value_and_grad(y, target)
    grads = backward(cache, p, dLdY)
    expected = 2.0 * cache.h1.T @ (y - target) / y.size
    np.testing.assert_allclose(grads["ffn.w2"], expected, atol=1e-12)


def test_exact_fit_gives_zero_gradients(rng):
    p, x, _ = random_problem(rng)
    target = transformer_block(x, p)
    value, grads = loss_and_grad(p, x, target, Loss("mse"))
    assert value == 0.0
    for g in grads.values():
        assert not np.any(g)


def test_hidden_delta_is_the_layer_recursion(rng):
    w, delta, z = rng.normal(size=(6, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 6))
    literal = np.stack([(w @ delta[i]) * relu_deriv(z[i]) for i in range(3)])
    np.testing.assert_allclose(hidden_delta(w, delta, z), literal, atol=1e-14)


@pytest.mark.parametrize("layernorm", [False, True])
@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed, layernorm):
    rng = np.random.default_rng(seed)
    n, d, h, d_ff = rng.integers(1, 7), 2 * rng.integers(1, 9), 1, rng.integers(1, 33)
    h = int(rng.choice([k for k in (1, 2, 4) if d % k == 0]))
    p, x, _ = random_problem(rng, n, d, h, d_ff, layernorm)
    g_out = rng.normal(size=(n, d))
    y, cache = forward_cached(x, p)
    grads = backward(cache, p, g_out)

    def lossfn(q):
        return float((forward_cached(x, q)[0] * g_out).sum())

    numeric = finite_diff_grad(lossfn, p, 1e-5)
    for name in grads:
        np.testing.assert_allclose(grads[name], numeric[name], rtol=1e-5, atol=1e-7, err_msg=name)


def test_backward_is_linear_in_upstream_gradient(rng):
    p, x, _ = random_problem(rng, layernorm=True)
    _, cache = forward_cached(x, p)
    g1, g2 = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    a, b = 0.7, -1.3
    combined = backward(cache, p, a * g1 + b * g2)
    parts1, parts2 = backward(cache, p, g1), backward(cache, p, g2)
    for name in combined:
        np.testing.assert_allclose(combined[name], a * parts1[name] + b * parts2[name], atol=1e-9)


def test_batched_backward_is_sum_of_examples(rng):
    p = init_block_params(6, 2, 8, rng, random_biases=True)
    x, g = rng.normal(size=(3, 4, 6)), rng.normal(size=(3, 4, 6))
    _, cache = forward_cached(x, p)
    total = backward(cache, p, g)
    per = [backward(forward_cached(x[b], p)[1], p, g[b]) for b in range(3)]
    for name in total:
        np.testing.assert_allclose(total[name], sum(q[name] for q in per), atol=1e-12)


def test_finite_diff_quadratic():
    p = BlockParams(init_block_params(2, 1, 1, np.random.default_rng(0)).mha, identity_ffn(2))
    p.ffn.b2[0] = 3.0
    grads = finite_diff_grad(lambda q: q.ffn.b2[0] ** 2, p, 1e-5)
    assert abs(grads["ffn.b2"][0] - 6.0) < 1e-9
    assert all(not np.any(g) for k, g in grads.items() if k != "ffn.b2")


def test_finite_diff_constant_loss(rng):
    p, _, _ = random_problem(rng)
    grads = finite_diff_grad(lambda q: 1.5, p)
    assert all(not np.any(g) for g in grads.values())


def test_finite_diff_nonfinite_loss(rng):
    p, _, _ = random_problem(rng)
    with pytest.raises(InvalidValueError):
        finite_diff_grad(lambda q: float("nan"), p)


def test_missing_cache_field(rng):
    p, x, _ = random_problem(rng)
    _, cache = forward_cached(x, p)
    cache.h1 = None
    with pytest.raises(CacheError):
        backward(cache, p, np.zeros((4, 8)))


@pytest.mark.parametrize("kind", ["mse", "xent"])
def test_grad_check_passes(rng, kind):
    p, x, t = random_problem(rng, kind=kind)
    report = grad_check(x, t, p, Loss(kind), 1e-5, 1e-5)
    assert report.passed, report.summary()


def test_grad_check_reports_corrupted_group(rng):
    p, x, t = random_problem(rng)
    _, grads = loss_and_grad(p, x, t, Loss("mse"))
    grads["head1.wk"] = grads["head1.wk"].copy()
    grads["head1.wk"][2, 1] += 0.1
    report = grad_check(x, t, p, Loss("mse"), analytic=grads)
    assert not report.passed
    assert report.worst_group == "head1.wk"
    assert "head1.wk" in report.summary() and "FAIL" in report.summary()


def test_grad_check_needs_positive_tolerance(rng):
    p, x, t = random_problem(rng)
    with pytest.raises(ValueError):
        grad_check(x, t, p, Loss("mse"), tol=0.0)
