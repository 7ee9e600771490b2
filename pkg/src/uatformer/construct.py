"""Explicit single-block Transformer parameters that approximate a
continuous target on a box.

The recipe: tile the box with a uniform grid, sample the target at every
cell center, and build one attention layer whose query token scores every
cell center by ``-beta * ||u - c_i||^2``. With ``beta`` large enough the
softmax is a near-hard nearest-center lookup, the value vectors carry the
sampled outputs, and the FFN passes the result through unchanged.

Squared distances are linear in the augmented query features
``(u, ||u||^2, 1)``, which is what lets ordinary query/key projections
compute them::

    -||u - c||^2 = 2 u.c - ||u||^2 - ||c||^2
"""

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .linalg import InvalidValueError, ShapeError
from .transformer import (
    BlockParams, HeadParams, MhaParams, identity_ffn, query_attention, transformer_block_query,
)

SINGLE_HEAD = "single-head-memory"
PER_REGION = "per-region-heads"
MAX_PER_REGION_HEADS = 64
MAX_MODEL_WIDTH = 1 << 13
# extra nats on the self-key penalty: pushes the query token's own weight
# below float64 resolution so a lookup over one region is exact
SELF_GUARD = 37.0


class ConstructionError(ValueError):
    """Invalid construction request (bad mode, size, or precondition)."""


class InvalidTargetError(InvalidValueError):
    """The target function returned a non-finite value."""


@dataclass
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=np.float64))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=np.float64))
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ShapeError(f"box bounds {self.lower.shape} / {self.upper.shape} must be equal-length vectors")
        if not (np.isfinite(self.lower).all() and np.isfinite(self.upper).all()):
            raise InvalidValueError("box bounds must be finite")
        if not (self.lower < self.upper).all():
            raise ValueError("box needs lower < upper on every axis")

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def max_sq_distance(self, points) -> float:
        """Largest squared distance from any box point to any of ``points``."""
        pts = np.atleast_2d(points)
        far = np.maximum(pts - self.lower, self.upper - pts)
        return float((far * far).sum(axis=1).max())


@dataclass
class Partition:
    """Cells of a box and one center per cell.

    Grid partitions carry ``resolution`` and per-cell bounds. A point
    partition (``resolution is None``) has one region per given point: the
    regions are the nearest-point cells, which have no box description.
    """

    box: Box
    centroids: np.ndarray
    resolution: Optional[Tuple[int, ...]] = None
    cell_lower: Optional[np.ndarray] = None
    cell_upper: Optional[np.ndarray] = None

    @property
    def count(self) -> int:
        return len(self.centroids)

    @property
    def is_grid(self) -> bool:
        return self.resolution is not None

    @property
    def cell_sides(self) -> np.ndarray:
        self._need_grid()
        return (self.box.upper - self.box.lower) / np.asarray(self.resolution)

    @property
    def radius(self) -> float:
        """Half the cell diagonal."""
        return 0.5 * float(np.linalg.norm(self.cell_sides))

    @property
    def cells(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        self._need_grid()
        return list(zip(self.cell_lower, self.cell_upper))

    def _need_grid(self):
        if not self.is_grid:
            raise ConstructionError("operation needs a grid partition")

    def locate(self, points) -> np.ndarray:
        """Flat cell index of each point (C order over the grid axes)."""
        self._need_grid()
        pts = np.atleast_2d(points)
        res = np.asarray(self.resolution)
        idx = np.floor((pts - self.box.lower) / self.cell_sides).astype(np.intp)
        idx = np.clip(idx, 0, res - 1)
        return np.ravel_multi_index(tuple(idx.T), tuple(res))

    @classmethod
    def from_points(cls, box: Box, points) -> "Partition":
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if pts.shape[1] != box.dim:
            raise ShapeError(f"points have dimension {pts.shape[1]}, box has {box.dim}")
        return cls(box, pts)


def partition_domain(box: Box, resolution: Union[int, Sequence[int]]) -> Partition:
    """Uniform axis-aligned grid; cells and centers are in C order."""
    res = (resolution,) * box.dim if np.isscalar(resolution) else tuple(resolution)
    if len(res) != box.dim:
        raise ShapeError(f"{len(res)} resolutions given for a {box.dim}-dimensional box")
    if any(int(r) < 1 for r in res):
        raise ValueError(f"every resolution must be >= 1, got {res}")
    res = tuple(int(r) for r in res)
    edges = [np.linspace(lo, hi, r + 1) for lo, hi, r in zip(box.lower, box.upper, res)]
    lo = np.array(list(itertools.product(*[e[:-1] for e in edges])))
    hi = np.array(list(itertools.product(*[e[1:] for e in edges])))
    return Partition(box, 0.5 * (lo + hi), res, lo, hi)


@dataclass
class Representatives:
    """Sampled points and flattened target values, plus the output shape."""

    points: np.ndarray
    values: np.ndarray
    out_shape: Tuple[int, ...]

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(zip(self.points, self.values))

    @property
    def oscillation(self) -> float:
        """max_ij ||y_i - y_j||_inf."""
        return float((self.values.max(axis=0) - self.values.min(axis=0)).max())


def _eval_target(f, point, in_shape):
    y = np.asarray(f(point.reshape(in_shape)), dtype=np.float64)
    return y


def sample_representatives(part: Partition, f: Callable, in_shape=None) -> Representatives:
    """Evaluate ``f`` at every cell center.

    ``f`` receives one input of shape ``in_shape`` (default: the flat box
    vector) and may return an array of any fixed shape.
    """
    in_shape = in_shape or (part.box.dim,)
    values, out_shape = [], None
    for i, c in enumerate(part.centroids):
        y = _eval_target(f, c, in_shape)
        if not np.isfinite(y).all():
            raise InvalidTargetError(f"target is not finite at cell {i} (center {c.tolist()})")
        out_shape = out_shape or y.shape
        if y.shape != out_shape:
            raise ShapeError(f"target returned shape {y.shape} at cell {i}, expected {out_shape}")
        values.append(y.reshape(-1))
    return Representatives(part.centroids.copy(), np.array(values), tuple(out_shape))


def grid_margin(part: Partition, margin_fraction: float = 0.75) -> float:
    """Smallest gap between the nearest and runner-up center scores.

    Valid for points whose offset from their cell center is at most
    ``margin_fraction`` of the half side on every axis. For centers
    ``c_j - c_i = s * k`` the gap is ``s^2 (|k|^2 - rho |k|_1) >= s^2 (1 - rho)``
    per axis, minimized by a single-axis neighbour.
    """
    if not 0 <= margin_fraction < 1:
        raise ValueError("margin_fraction must lie in [0, 1)")
    return float((1.0 - margin_fraction) * (part.cell_sides ** 2).min())


def point_margin(points) -> float:
    """Score gap at the points themselves: min pairwise squared distance."""
    pts = np.atleast_2d(points)
    sq = (pts * pts).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * pts @ pts.T
    np.fill_diagonal(d2, np.inf)
    return float(d2.min())


def sharpness_for_margin(count: int, gamma: float, delta: float) -> float:
    """beta with (count - 1) * exp(-beta * gamma) <= delta."""
    if not 0 < delta < 1:
        raise ValueError(f"leakage target delta must lie in (0, 1), got {delta}")
    if count <= 1:
        return 1.0
    if not gamma > 0:
        raise ConstructionError("score margin must be positive (duplicate centers?)")
    return math.log((count - 1) / delta) / gamma


def select_sharpness(part: Partition, delta: float, margin_fraction: float = 0.75) -> float:
    if not 0 < delta < 1:
        raise ValueError(f"leakage target delta must lie in (0, 1), got {delta}")
    if part.count <= 1:
        return 1.0
    gamma = grid_margin(part, margin_fraction) if part.is_grid else point_margin(part.centroids)
    return sharpness_for_margin(part.count, gamma, delta)


@dataclass
class LookupSpec:
    centroids: np.ndarray
    outputs: np.ndarray
    beta: float
    self_penalty: float
    delta: float
    margin: float
    margin_fraction: float
    in_shape: Tuple[int, ...]
    out_shape: Tuple[int, ...]

    @property
    def count(self) -> int:
        return len(self.centroids)


@dataclass
class CertifiedModel:
    """A constructed block plus the fixed input encoding it expects.

    Inputs are encoded as one query token followed by ``count`` constant
    memory tokens (rows of ``memory``); the model output is the block output
    at the query position, reshaped to ``spec.out_shape``.
    """

    block: BlockParams
    memory: np.ndarray
    spec: LookupSpec
    mode: str = SINGLE_HEAD
    measured_sup_error: Optional[float] = None
    analytic_bound: Optional[float] = None
    trajectory: list = field(default_factory=list)
    resolution: Optional[Tuple[int, ...]] = None

    @property
    def in_dim(self) -> int:
        return self.spec.centroids.shape[1]

    def encode(self, u) -> np.ndarray:
        """Query-token embeddings ``(u, ||u||^2, 1, 0_M)`` for flat inputs."""
        u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        if u.shape[1] != self.in_dim:
            raise ShapeError(f"inputs of width {u.shape[1]}, model expects {self.in_dim}")
        tok = np.zeros((len(u), self.block.mha.d_in))
        tok[:, :self.in_dim] = u
        tok[:, self.in_dim] = (u * u).sum(axis=1)
        tok[:, self.in_dim + 1] = 1.0
        return tok

    def sequence(self, u) -> np.ndarray:
        """Full token sequence for a single flat input (1 + M rows)."""
        return np.vstack([self.encode(u), self.memory])

    def evaluate_flat(self, u, chunk: int = 2048) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        out = [transformer_block_query(self.encode(u[s:s + chunk]), self.memory, self.block)
               for s in range(0, len(u), chunk)]
        return np.vstack(out)

    def __call__(self, x) -> np.ndarray:
        """Model output for one input of shape ``spec.in_shape``."""
        u = np.asarray(x, dtype=np.float64).reshape(1, -1)
        return self.evaluate_flat(u)[0].reshape(self.spec.out_shape)

    def attention(self, u, chunk: int = 2048) -> np.ndarray:
        """Query-row attention weights ``(P, 1 + M)``; column 0 is the self token."""
        u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        head = self.block.mha.heads[0]
        return np.vstack([query_attention(self.encode(u[s:s + chunk]), self.memory, head, self.block.scale_dim)[0]
                          for s in range(0, len(u), chunk)])


def self_penalty(box: Box, centroids, beta: float, delta: float) -> float:
    """Score assigned to the query token's own key.

    ``beta * span`` (span = largest squared distance from the box to any
    center) dominates every memory score, and ``log(M / delta)`` plus a
    guard keeps the self weight below the leakage budget.
    """
    m = len(centroids)
    return beta * box.max_sq_distance(centroids) + math.log(m / delta) + SELF_GUARD


def build_lookup_transformer(part: Partition, reps: Representatives, beta: float,
                             mode: str = SINGLE_HEAD, delta: float = 1e-3,
                             margin_fraction: float = 0.75, in_shape=None) -> CertifiedModel:
    """Synthesize block parameters realizing the softmax lookup.

    Layout of a ``d_model = D_in + 2 + M`` token: ``[u | ||u||^2 | 1 | e_1..e_M]``.
    The query projection reads ``(u, ||u||^2, 1, 1)``; memory token ``i`` gets
    key ``beta * (2 c_i, -1, -||c_i||^2, 0)`` and the query token gets key
    ``(0, ..., 0, -C)``, so scores are ``-beta ||u - c_i||^2`` and ``-C``.
    Keys are pre-multiplied by ``sqrt(d_k)`` to cancel the attention scale.
    """
    if mode not in (SINGLE_HEAD, PER_REGION):
        raise ConstructionError(f"unknown construction mode {mode!r}")
    if len(reps) != part.count:
        raise ConstructionError(f"{len(reps)} representatives for {part.count} regions")
    m, d_in = reps.points.shape
    d_out = reps.values.shape[1]
    if mode == PER_REGION and m > MAX_PER_REGION_HEADS:
        raise ConstructionError(f"per-region-heads mode allows at most {MAX_PER_REGION_HEADS} regions, got {m}")
    d_model = d_in + 2 + m
    if d_model > MAX_MODEL_WIDTH:
        raise ConstructionError(f"model width {d_model} exceeds the limit {MAX_MODEL_WIDTH}")
    if not (beta > 0 and np.isfinite(beta)):
        raise ValueError("beta must be positive and finite")

    c = reps.points
    penalty = self_penalty(part.box, c, beta, delta)
    d_k = d_in + 3
    root = math.sqrt(d_k)
    u_sl, sq_col, one_col, mem = slice(0, d_in), d_in, d_in + 1, slice(d_in + 2, d_model)

    wq = np.zeros((d_model, d_k))
    wq[u_sl, :d_in] = np.eye(d_in)
    wq[sq_col, d_in] = 1.0
    wq[one_col, d_in + 1] = 1.0
    wq[one_col, d_in + 2] = 1.0

    wk = np.zeros((d_model, d_k))
    wk[mem, :d_in] = 2.0 * beta * c
    wk[mem, d_in] = -beta
    wk[mem, d_in + 1] = -beta * (c * c).sum(axis=1)
    wk[one_col, d_in + 2] = -penalty
    wk *= root

    if mode == SINGLE_HEAD:
        wv = np.zeros((d_model, d_out))
        wv[mem] = reps.values
        heads = [HeadParams(wq, wk, wv)]
        wo = np.eye(d_out)
    else:
        # head i only sees its own region's value; all other keys act as a
        # zero-valued sink, so head i emits w_i(x) * y_i and W^O sums heads
        heads = []
        for i in range(m):
            wv = np.zeros((d_model, d_out))
            wv[d_in + 2 + i] = reps.values[i]
            heads.append(HeadParams(wq.copy(), wk.copy(), wv))
        wo = np.vstack([np.eye(d_out)] * m)

    block = BlockParams(MhaParams(heads, wo), identity_ffn(d_out), use_residual=False,
                        use_layernorm=False, scale_dim=d_k)
    memory = np.zeros((m, d_model))
    memory[:, d_in + 2:] = np.eye(m)
    gamma = (grid_margin(part, margin_fraction) if part.is_grid else point_margin(c)) if m > 1 else math.inf
    spec = LookupSpec(c.copy(), reps.values.copy(), float(beta), float(penalty), float(delta),
                      float(gamma), float(margin_fraction), tuple(in_shape or (d_in,)), reps.out_shape)
    return CertifiedModel(block, memory, spec, mode, resolution=part.resolution)


def certification_grid(part: Partition, factor: int) -> np.ndarray:
    """Midpoints of a grid ``factor`` times finer than ``part`` on every axis."""
    res = np.asarray(part.resolution) * factor
    axes = [lo + (np.arange(r) + 0.5) * (hi - lo) / r
            for lo, hi, r in zip(part.box.lower, part.box.upper, res)]
    return np.array(list(itertools.product(*axes)))


@dataclass
class SupErrorReport:
    empirical_sup: float
    analytic_bound: float
    omega: float
    leakage_term: float
    self_term: float
    n_points: int


def estimate_sup_error(model: CertifiedModel, part: Partition, f: Callable,
                       test_factor: int = 4) -> SupErrorReport:
    """Empirical sup error on a certification grid, with the bound
    ``omega + delta * osc`` (+ the self-token term, which is ~0).

    ``omega`` is the largest observed ``|f(x) - f(center(x))|``. The bound
    holds at every test point because all of them sit within the margin
    zone the sharpness was chosen for.
    """
    if not part.is_grid:
        raise ConstructionError("certification needs a grid partition")
    if int(test_factor) != test_factor or test_factor < 4:
        raise ConstructionError(f"certification grid must be >= 4x denser per axis, got factor {test_factor}")
    spec = model.spec
    zone = (test_factor - 1) / test_factor
    if spec.count > 1 and zone > spec.margin_fraction + 1e-12:
        raise ConstructionError(
            f"test points reach {zone:.4f} of the half cell but beta only covers {spec.margin_fraction:.4f}"
        )
    pts = certification_grid(part, int(test_factor))
    fx = np.array([_eval_target(f, p, spec.in_shape).reshape(-1) for p in pts])
    if not np.isfinite(fx).all():
        raise InvalidTargetError("target is not finite on the certification grid")
    tx = model.evaluate_flat(pts)
    eps_hat = float(np.abs(tx - fx).max())
    omega = float(np.abs(fx - spec.outputs[part.locate(pts)]).max())
    osc = float((spec.outputs.max(axis=0) - spec.outputs.min(axis=0)).max())
    r2 = 0.25 * float((part.cell_sides ** 2).sum())
    self_weight = math.exp(min(0.0, -spec.self_penalty + spec.beta * r2))
    self_term = self_weight * float(np.abs(spec.outputs).max())
    bound = omega + spec.delta * osc + self_term
    model.measured_sup_error, model.analytic_bound = eps_hat, bound
    return SupErrorReport(eps_hat, bound, omega, spec.delta * osc, self_term, len(pts))


class CapacityExceeded(RuntimeError):
    """Refinement hit the resolution cap before reaching the tolerance."""

    def __init__(self, message, trajectory, best: Optional[CertifiedModel]):
        super().__init__(message)
        self.trajectory = trajectory
        self.best = best


def leakage_target(eps: float, osc: float, floor: float = 1e-12) -> float:
    """delta = eps / (4 osc), kept inside [floor, 1/2]."""
    if osc <= 0:
        return 0.5
    return min(max(eps / (4.0 * osc), floor), 0.5)


def construct_to_tolerance(f: Callable, box: Box, eps: float, initial_resolution=1,
                           max_resolution: int = 64, test_factor: int = 4,
                           mode: str = SINGLE_HEAD, in_shape=None) -> CertifiedModel:
    """Refine the grid (doubling every axis) until the empirical sup error
    drops below ``eps``. Raises :class:`CapacityExceeded` with the full
    trajectory when the cap is reached first."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    res = np.broadcast_to(np.asarray(initial_resolution, dtype=int), (box.dim,)).copy()
    rho = (test_factor - 1) / test_factor
    trajectory, best = [], None
    while True:
        part = partition_domain(box, tuple(res))
        reps = sample_representatives(part, f, in_shape)
        delta = leakage_target(eps, reps.oscillation)
        beta = select_sharpness(part, delta, rho)
        model = build_lookup_transformer(part, reps, beta, mode, delta, rho, in_shape)
        rep = estimate_sup_error(model, part, f, test_factor)
        trajectory.append(dict(
            resolution="x".join(map(str, res)), cells=part.count, delta=delta,
            margin=model.spec.margin, beta=beta, empirical_sup=rep.empirical_sup,
            analytic_bound=rep.analytic_bound,
        ))
        model.trajectory = list(trajectory)
        if best is None or rep.empirical_sup < best.measured_sup_error:
            best = model
        if rep.empirical_sup < eps:
            return model
        res = res * 2
        if res.max() > max_resolution:
            raise CapacityExceeded(
                f"no certified model below eps={eps} up to resolution {max_resolution} "
                f"(best empirical sup {best.measured_sup_error:.4g})", trajectory, best,
            )
