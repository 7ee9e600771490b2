"""Dense float64 helpers shared by every other module.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. Most
functions also accept a leading batch axis, in which case they operate on
the last two axes.
"""

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class InvalidValueError(ValueError):
    """Raised when an input contains NaN or an out-of-range value."""


def as_mat(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim < 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return np.matmul(a, b)


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax along the last axis with max subtraction."""
    m = np.asarray(m, dtype=np.float64)
    if np.isnan(m).any():
        raise InvalidValueError("softmax_rows received NaN input")
    e = np.exp(m - m.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def relu(m) -> np.ndarray:
    return np.maximum(np.asarray(m, dtype=np.float64), 0.0)


def relu_deriv(m) -> np.ndarray:
    # subgradient at exactly 0 is taken to be 0
    return (np.asarray(m, dtype=np.float64) > 0.0).astype(np.float64)


def softmax_backward(weights: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of a row-wise softmax.

    ``weights`` is the softmax output, ``grad_out`` the upstream gradient
    with the same shape.
    """
    inner = (grad_out * weights).sum(axis=-1, keepdims=True)
    return weights * (grad_out - inner)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5):
    """Per-position normalization over the last axis.

    Returns ``(out, xhat, inv_std)``; the last two are needed for the
    backward pass.
    """
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return xhat * gain + bias, xhat, inv_std


def layer_norm_backward(grad_out, xhat, inv_std, gain):
    """Returns ``(grad_x, grad_gain, grad_bias)``; parameter grads are summed
    over every leading axis."""
    lead = tuple(range(grad_out.ndim - 1))
    grad_gain = (grad_out * xhat).sum(axis=lead)
    grad_bias = grad_out.sum(axis=lead)
    g = grad_out * gain
    d = g.shape[-1]
    grad_x = inv_std / d * (
        d * g - g.sum(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True)
    )
    return grad_x, grad_gain, grad_bias
