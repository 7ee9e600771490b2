"""Loss functions on block outputs.

A loss maps a prediction array (``(n, d)`` or ``(B, n, d)``) and a target of
the same shape to a scalar, and supplies the gradient with respect to the
prediction. ``columns`` restricts the loss to a subset of output features,
e.g. a single regression channel.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .linalg import ShapeError, softmax_rows

PROB_FLOOR = 1e-12


def cross_entropy(y_onehot, y_hat) -> float:
    y_onehot = np.asarray(y_onehot, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y_onehot.shape != y_hat.shape:
        raise ShapeError(f"length mismatch: {y_onehot.shape} vs {y_hat.shape}")
    # floor only guards log(0); it is not part of the loss definition
    p = np.clip(y_hat, PROB_FLOOR, 1.0)
    return float(-(y_onehot * np.log(p)).sum())


def mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float((diff * diff).mean())


@dataclass(frozen=True)
class Loss:
    """``kind`` is ``"mse"`` or ``"xent"``.

    For ``"xent"`` each token's selected features are treated as logits and
    the target holds one-hot rows; the loss is averaged over tokens.
    """

    kind: str = "mse"
    columns: Optional[Sequence[int]] = None

    def __post_init__(self):
        if self.kind not in ("mse", "xent"):
            raise ValueError(f"unknown loss kind {self.kind!r}")

    def _select(self, a):
        a = np.asarray(a, dtype=np.float64)
        return a if self.columns is None else a[..., list(self.columns)]

    def value(self, pred, target) -> float:
        return self.value_and_grad(pred, target)[0]

    def value_and_grad(self, pred, target):
        pred = np.asarray(pred, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        if pred.shape != target.shape:
            raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
        p, t = self._select(pred), self._select(target)
        if self.kind == "mse":
            diff = p - t
            value = float((diff * diff).mean())
            g = 2.0 * diff / diff.size
        else:
            probs = softmax_rows(p)
            count = probs.size // probs.shape[-1]
            value = float(-(t * np.log(np.clip(probs, PROB_FLOOR, 1.0))).sum() / count)
            g = (probs * t.sum(axis=-1, keepdims=True) - t) / count
        if self.columns is None:
            return value, g
        full = np.zeros_like(pred)
        full[..., list(self.columns)] = g
        return value, full
