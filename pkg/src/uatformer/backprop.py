"""Analytic gradients of a scalar loss with respect to every block
parameter, and a central-difference checker.

The FFN path is the classic layer recursion: the error signal at a hidden
layer is ``(W^T delta) * phi'(z)`` and each weight gradient is the outer
product of that signal with the layer input. The attention path chains
through the value mix, the row softmax, the ``1/sqrt(scale_dim)`` factor and
the Q/K/V projections.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .linalg import (
    InvalidValueError, ShapeError, layer_norm, layer_norm_backward, matmul, relu,
    relu_deriv, softmax_backward,
)
from .losses import Loss
from .transformer import BlockParams, attention_weights

GradSet = Dict[str, np.ndarray]


class CacheError(ValueError):
    """The forward cache lacks a field the backward pass needs."""


@dataclass
class ForwardCache:
    x: np.ndarray
    q: List[np.ndarray]
    k: List[np.ndarray]
    v: List[np.ndarray]
    attn: List[np.ndarray]
    concat: np.ndarray
    a_pre: np.ndarray
    a: np.ndarray
    z1: np.ndarray
    h1: np.ndarray
    y_pre: np.ndarray
    y: np.ndarray
    ln1: Optional[tuple] = None
    ln2: Optional[tuple] = None
    batched: bool = field(default=False)


def forward_cached(x, p: BlockParams):
    """Same arithmetic as :func:`transformer_block`, keeping intermediates."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (2, 3) or x.shape[-1] != p.mha.d_in:
        raise ShapeError(f"token sequence of shape {x.shape} does not match model dimension {p.mha.d_in}")
    qs, ks, vs, ws, zs = [], [], [], [], []
    for hp in p.mha.heads:
        q, k, v = matmul(x, hp.wq), matmul(x, hp.wk), matmul(x, hp.wv)
        w = attention_weights(q, k, p.scale_dim)
        qs.append(q)
        ks.append(k)
        vs.append(v)
        ws.append(w)
        zs.append(matmul(w, v))
    concat = np.concatenate(zs, axis=-1)
    a_pre = matmul(concat, p.mha.wo)
    if p.use_residual:
        a_pre = a_pre + x
    ln1 = ln2 = None
    a = a_pre
    if p.use_layernorm:
        a, xhat, inv_std = layer_norm(a_pre, p.ln1_gain, p.ln1_bias, p.ln_eps)
        ln1 = (xhat, inv_std)
    z1 = matmul(a, p.ffn.w1) + p.ffn.b1
    h1 = relu(z1)
    y_pre = matmul(h1, p.ffn.w2) + p.ffn.b2
    if p.use_residual:
        y_pre = y_pre + a
    y = y_pre
    if p.use_layernorm:
        y, xhat, inv_std = layer_norm(y_pre, p.ln2_gain, p.ln2_bias, p.ln_eps)
        ln2 = (xhat, inv_std)
    cache = ForwardCache(x, qs, ks, vs, ws, concat, a_pre, a, z1, h1, y_pre, y, ln1, ln2, x.ndim == 3)
    return y, cache


def replay(cache: ForwardCache, p: BlockParams) -> np.ndarray:
    """Recompute the block output from cached attention weights and values."""
    concat = np.concatenate([matmul(w, v) for w, v in zip(cache.attn, cache.v)], axis=-1)
    a = matmul(concat, p.mha.wo)
    if p.use_residual:
        a = a + cache.x
    if p.use_layernorm:
        a = layer_norm(a, p.ln1_gain, p.ln1_bias, p.ln_eps)[0]
    y = matmul(relu(matmul(a, p.ffn.w1) + p.ffn.b1), p.ffn.w2) + p.ffn.b2
    if p.use_residual:
        y = y + a
    if p.use_layernorm:
        y = layer_norm(y, p.ln2_gain, p.ln2_bias, p.ln_eps)[0]
    return y


def _outer(inputs, delta):
    # sum over every leading (batch, position) axis of inputs^T delta
    return matmul(inputs.reshape(-1, inputs.shape[-1]).T, delta.reshape(-1, delta.shape[-1]))


def _rowsum(delta):
    return delta.reshape(-1, delta.shape[-1]).sum(axis=0)


def hidden_delta(w_next, delta_next, z_prev):
    """Error signal one layer down: ``(W^T delta) * phi'(z)``.

    Row-vector layout: activations are rows, so ``W^T delta`` becomes
    ``delta @ W.T``.
    """
    return matmul(delta_next, w_next.T) * relu_deriv(z_prev)


def backward(cache: ForwardCache, p: BlockParams, dLdY) -> GradSet:
    for name in ("x", "attn", "v", "q", "k", "concat", "a", "z1", "h1"):
        if getattr(cache, name, None) is None:
            raise CacheError(f"forward cache is missing {name!r}")
    if p.use_layernorm and (cache.ln1 is None or cache.ln2 is None):
        raise CacheError("forward cache is missing layernorm statistics")
    g = np.asarray(dLdY, dtype=np.float64)
    if g.shape != cache.y.shape:
        raise ShapeError(f"dLdY shape {g.shape} != output shape {cache.y.shape}")
    if not np.isfinite(g).all():
        raise InvalidValueError("dLdY contains non-finite values")

    grads: GradSet = {}
    if p.use_layernorm:
        g, grads["ln2.gain"], grads["ln2.bias"] = layer_norm_backward(g, *cache.ln2, p.ln2_gain)
    # FFN: output layer delta is g itself (no activation on the last layer)
    grads["ffn.w2"] = _outer(cache.h1, g)
    grads["ffn.b2"] = _rowsum(g)
    delta1 = hidden_delta(p.ffn.w2, g, cache.z1)
    grads["ffn.w1"] = _outer(cache.a, delta1)
    grads["ffn.b1"] = _rowsum(delta1)
    da = matmul(delta1, p.ffn.w1.T)
    if p.use_residual:
        da = da + g
    if p.use_layernorm:
        da, grads["ln1.gain"], grads["ln1.bias"] = layer_norm_backward(da, *cache.ln1, p.ln1_gain)

    grads["wo"] = _outer(cache.concat, da)
    dconcat = matmul(da, p.mha.wo.T)
    dv_width = p.mha.d_v
    inv_scale = 1.0 / np.sqrt(p.scale_dim)
    x = cache.x
    for j, hp in enumerate(p.mha.heads):
        dz = dconcat[..., j * dv_width:(j + 1) * dv_width]
        w = cache.attn[j]
        dw = matmul(dz, np.swapaxes(cache.v[j], -1, -2))
        dv = matmul(np.swapaxes(w, -1, -2), dz)
        ds = softmax_backward(w, dw) * inv_scale
        dq = matmul(ds, cache.k[j])
        dk = matmul(np.swapaxes(ds, -1, -2), cache.q[j])
        grads[f"head{j}.wq"] = _outer(x, dq)
        grads[f"head{j}.wk"] = _outer(x, dk)
        grads[f"head{j}.wv"] = _outer(x, dv)
    return {name: grads[name] for name in p.named_arrays()}


def loss_and_grad(p: BlockParams, x, target, loss: Loss):
    y, cache = forward_cached(x, p)
    value, dLdY = loss.value_and_grad(y, target)
    return value, backward(cache, p, dLdY)


def finite_diff_grad(lossfn: Callable[[BlockParams], float], p: BlockParams, h: float = 1e-5) -> GradSet:
    """Central differences ``(L(theta+h) - L(theta-h)) / 2h`` per scalar.

    The divisor is the step actually realized in float64, ``(t+h) - (t-h)``.
    ``lossfn`` may return an extended-precision scalar; the difference is
    taken in that precision before rounding the result to float64.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    work = p.copy()
    grads = {}
    for name, arr in work.named_arrays().items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = lossfn(work)
            hi = flat[i]
            flat[i] = orig - h
            down = lossfn(work)
            lo = flat[i]
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise InvalidValueError(f"non-finite loss while probing {name}[{i}]")
            gflat[i] = (up - down) / (np.longdouble(hi) - np.longdouble(lo))
        grads[name] = g
    return grads


def reference_loss(p: BlockParams, x, target, loss: Loss, dtype=np.longdouble):
    """Block loss evaluated from scratch in ``dtype`` (x87 extended on x86-64).

    Shares no code with :func:`forward_cached`. Used as the finite-difference
    oracle: at ``h = 1e-5`` the float64 rounding of a loss of order 1 already
    contributes ~1e-11 to each difference quotient, which swamps gradient
    entries below ~1e-6.
    """
    arr = {k: np.asarray(v, dtype=dtype) for k, v in p.named_arrays().items()}
    x = np.asarray(x, dtype=dtype)
    scale = np.sqrt(dtype(p.scale_dim))

    def norm(z, gain, bias):
        c = z - z.mean(axis=-1, keepdims=True)
        var = (c * c).mean(axis=-1, keepdims=True)
        return c / np.sqrt(var + dtype(p.ln_eps)) * gain + bias

    heads = []
    for j in range(p.n_heads):
        q = np.einsum("...ni,ik->...nk", x, arr[f"head{j}.wq"])
        k = np.einsum("...ni,ik->...nk", x, arr[f"head{j}.wk"])
        v = np.einsum("...ni,ik->...nk", x, arr[f"head{j}.wv"])
        s = np.einsum("...ik,...jk->...ij", q, k) / scale
        e = np.exp(s - s.max(axis=-1, keepdims=True))
        heads.append(np.einsum("...ij,...jk->...ik", e / e.sum(axis=-1, keepdims=True), v))
    a = np.einsum("...ni,io->...no", np.concatenate(heads, axis=-1), arr["wo"])
    if p.use_residual:
        a = a + x
    if p.use_layernorm:
        a = norm(a, arr["ln1.gain"], arr["ln1.bias"])
    hidden = np.maximum(np.einsum("...ni,ih->...nh", a, arr["ffn.w1"]) + arr["ffn.b1"], 0)
    y = np.einsum("...nh,ho->...no", hidden, arr["ffn.w2"]) + arr["ffn.b2"]
    if p.use_residual:
        y = y + a
    if p.use_layernorm:
        y = norm(y, arr["ln2.gain"], arr["ln2.bias"])

    t = np.asarray(target, dtype=dtype)
    if loss.columns is not None:
        cols = list(loss.columns)
        y, t = y[..., cols], t[..., cols]
    if loss.kind == "mse":
        return ((y - t) ** 2).mean()
    s = y - y.max(axis=-1, keepdims=True)
    log_probs = s - np.log(np.exp(s).sum(axis=-1, keepdims=True))
    return -(t * log_probs).sum() / (y.size // y.shape[-1])


@dataclass
class GradCheckReport:
    group_errors: Dict[str, float]
    tol: float
    passed: bool
    worst_group: str
    worst_error: float

    def rows(self):
        return [[name, err, err < self.tol] for name, err in self.group_errors.items()]

    def summary(self) -> str:
        lines = [f"{'group':<12} max_rel_err"]
        for name, err in self.group_errors.items():
            flag = "ok" if err < self.tol else "FAIL"
            lines.append(f"{name:<12} {err:.3e} {flag}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict}: worst {self.worst_group} {self.worst_error:.3e} (tol {self.tol:g})")
        return "\n".join(lines)


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(x, target, p: BlockParams, loss: Loss, h: float = 1e-5, tol: float = 1e-5,
               analytic: Optional[GradSet] = None) -> GradCheckReport:
    """Compare analytic gradients with central differences of
    :func:`reference_loss`.

    ``analytic`` overrides the backward pass result, which is how fault
    injection is tested. Failures are reported, never raised.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if analytic is None:
        analytic = loss_and_grad(p, x, target, loss)[1]
    numeric = finite_diff_grad(lambda q: reference_loss(q, x, target, loss), p, h)
    errors = {}
    for name in numeric:
        errors[name] = float(relative_error(analytic[name], numeric[name]).max())
    worst = max(errors, key=errors.get)
    return GradCheckReport(errors, tol, errors[worst] < tol, worst, errors[worst])
