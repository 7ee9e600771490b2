"""Update rules (gradient descent, mini-batch SGD, Adam) and a seeded
training loop for a single block.

A dataset is a pair ``(X, Y)`` of arrays shaped ``(N, n, d)``.
"""

import itertools
from dataclasses import dataclass, field
from typing import Dict, Tuple, Union

import numpy as np

from .backprop import GradSet, backward, forward_cached
from .linalg import ShapeError
from .losses import Loss, cross_entropy, mse  # noqa: F401  (re-exported)
from .transformer import BlockParams

Params = Union[BlockParams, Dict[str, np.ndarray]]


def _arrays(p: Params) -> Dict[str, np.ndarray]:
    return p.named_arrays() if isinstance(p, BlockParams) else p


def _rebuild(p: Params, arrays: Dict[str, np.ndarray]) -> Params:
    return p.with_arrays(arrays) if isinstance(p, BlockParams) else arrays


def _check_mirror(theta, grads):
    for name, arr in theta.items():
        if name not in grads or np.shape(grads[name]) != arr.shape:
            raise ShapeError(f"gradient for {name!r} does not mirror parameter shape {arr.shape}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    steps: int = 1000
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if self.optimizer not in ("gd", "sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1) or not self.eps > 0:
            raise ValueError("Adam needs 0 < beta1, beta2 < 1 and eps > 0")


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, p: Params) -> "AdamState":
        theta = _arrays(p)
        return cls({k: np.zeros_like(a) for k, a in theta.items()},
                   {k: np.zeros_like(a) for k, a in theta.items()}, 0)


def gd_step(p: Params, grads: GradSet, lr: float) -> Params:
    """theta <- theta - lr * grad, returning new parameters."""
    theta = _arrays(p)
    _check_mirror(theta, grads)
    return _rebuild(p, {k: a - lr * grads[k] for k, a in theta.items()})


def adam_step(p: Params, grads: GradSet, state: AdamState, cfg: TrainConfig) -> Tuple[Params, AdamState]:
    theta = _arrays(p)
    _check_mirror(theta, grads)
    if not state.m:
        state = AdamState.zeros_like(p)
    _check_mirror(theta, state.m)
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    m = {k: b1 * state.m[k] + (1 - b1) * grads[k] for k in theta}
    v = {k: b2 * state.v[k] + (1 - b2) * grads[k] * grads[k] for k in theta}
    bc1, bc2 = 1 - b1 ** t, 1 - b2 ** t
    new = {
        k: a - cfg.learning_rate * (m[k] / bc1) / (np.sqrt(v[k] / bc2) + cfg.eps)
        for k, a in theta.items()
    }
    return _rebuild(p, new), AdamState(m, v, t)


def batch_loss_and_grad(model: BlockParams, X, Y, loss: Loss):
    """Mean loss over a batch and the mean of per-example gradients."""
    y, cache = forward_cached(X, model)
    value, dLdY = loss.value_and_grad(y, Y)
    return value, backward(cache, model, dLdY)


def sgd_minibatch_grad(dataset, batch, model: BlockParams, loss: Loss) -> GradSet:
    idx = np.asarray(batch, dtype=np.intp)
    if idx.size == 0:
        raise ValueError("mini-batch is empty")
    X, Y = dataset
    return batch_loss_and_grad(model, np.asarray(X)[idx], np.asarray(Y)[idx], loss)[1]


def _batches(n_items: int, batch_size: int, rng: np.random.Generator):
    # shuffled epochs; the final partial batch of an epoch is kept
    while True:
        perm = rng.permutation(n_items)
        for start in range(0, n_items, batch_size):
            yield perm[start:start + batch_size]


def train_loop(model: BlockParams, dataset, cfg: TrainConfig, loss: Loss = Loss("mse")):
    """Run ``cfg.steps`` updates. Returns ``(model, history)`` where
    ``history[i]`` is the batch loss evaluated before update ``i``."""
    X, Y = (np.asarray(a, dtype=np.float64) for a in dataset)
    if len(X) == 0:
        raise ValueError("dataset is empty")
    if len(X) != len(Y):
        raise ShapeError(f"{len(X)} inputs but {len(Y)} targets")
    rng = np.random.default_rng(cfg.seed)
    if cfg.optimizer == "gd" or cfg.batch_size >= len(X):
        batches = itertools.repeat(np.arange(len(X)))
    else:
        batches = _batches(len(X), cfg.batch_size, rng)
    state = AdamState.zeros_like(model)
    history = []
    for _ in range(cfg.steps):
        idx = next(batches)
        value, grads = batch_loss_and_grad(model, X[idx], Y[idx], loss)
        history.append(value)
        if cfg.optimizer == "adam":
            model, state = adam_step(model, grads, state, cfg)
        else:
            model = gd_step(model, grads, cfg.learning_rate)
    return model, np.asarray(history)
