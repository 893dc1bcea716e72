"""Wasserstein-style alignment of embedding clouds.

Two solvers: an exact small-instance solver used as an oracle (exhaustive
matching for uniform equal-size clouds, a tiny LP otherwise) and a
log-domain entropic scaling solver for production. The per-class loss
differentiates the transport cost with the converged plan held fixed
(envelope approximation).
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError, ShapeError
from .tensor import FLOAT, Tensor, _make, as_tensor

log = logging.getLogger("grafuse.transport")

EXACT_SIZE_CAP = 64  # m*n above this: use sinkhorn_wr instead


@dataclass
class DiscreteCloud:
    """Weighted point set; weights are a probability vector."""

    points: Tensor
    weights: np.ndarray

    def __post_init__(self):
        self.points = as_tensor(self.points)
        self.weights = np.asarray(self.weights, dtype=FLOAT).reshape(-1)
        if self.weights.shape[0] != self.points.data.shape[0]:
            raise ShapeError(f"cloud: {self.weights.shape[0]} weights for "
                             f"{self.points.data.shape[0]} points")
        if np.any(self.weights < 0):
            raise ContractError("cloud: negative weight")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ContractError(f"cloud: weights sum to {self.weights.sum()!r}, not 1")

    @classmethod
    def uniform(cls, points) -> "DiscreteCloud":
        points = as_tensor(points)
        m = points.data.shape[0]
        return cls(points, np.full(m, 1.0 / m))

    @property
    def size(self) -> int:
        return self.points.data.shape[0]

    @property
    def dim(self) -> int:
        return self.points.data.shape[1]


@dataclass
class TransportPlan:
    coupling: np.ndarray
    cost: float              # plan cost <coupling, C>, before the 1/p root
    converged: bool
    iterations: int
    # dual potentials of the entropic solver (None for the exact solver)
    f: Optional[np.ndarray] = None
    g: Optional[np.ndarray] = None


def cost_matrix(a: DiscreteCloud, b: DiscreteCloud, p: float = 2.0) -> np.ndarray:
    """C[i][j] = ||x_i - y_j||_2^p."""
    if a.dim != b.dim:
        raise ShapeError(f"cost_matrix: dims {a.dim} vs {b.dim}")
    x, y = a.points.data, b.points.data
    # direct differences (not the Gram expansion): identical points must
    # yield an exact zero, which the 1/p root would otherwise amplify
    diff = x[:, None, :] - y[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    return np.sqrt(sq) ** p


def _uniform_equal(a: DiscreteCloud, b: DiscreteCloud) -> bool:
    return (a.size == b.size
            and np.allclose(a.weights, 1.0 / a.size, atol=1e-12)
            and np.allclose(b.weights, 1.0 / b.size, atol=1e-12))


def _exact_matching(c: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimum-cost perfect matching by exhaustion (uniform equal-size case)."""
    n = c.shape[0]
    best_cost, best_perm = np.inf, None
    for perm in itertools.permutations(range(n)):
        total = c[np.arange(n), perm].sum()
        if total < best_cost:
            best_cost, best_perm = total, perm
    coupling = np.zeros((n, n))
    coupling[np.arange(n), best_perm] = 1.0 / n
    return coupling, best_cost / n


def _exact_lp(c: np.ndarray, wa: np.ndarray, wb: np.ndarray) -> tuple[np.ndarray, float]:
    """Transport LP over the polytope's marginal constraints (general case)."""
    from scipy.optimize import linprog
    m, n = c.shape
    a_eq = np.zeros((m + n, m * n))
    for i in range(m):
        a_eq[i, i * n:(i + 1) * n] = 1.0
    for j in range(n):
        a_eq[m + j, j::n] = 1.0
    # drop one redundant constraint so the system has full row rank
    res = linprog(c.reshape(-1), A_eq=a_eq[:-1],
                  b_eq=np.concatenate([wa, wb])[:-1],
                  bounds=(0, None), method="highs")
    if not res.success:
        raise NumericError(f"exact_wr: LP failed: {res.message}")
    return res.x.reshape(m, n), float(res.fun)


def exact_wr(a: DiscreteCloud, b: DiscreteCloud, p: float = 2.0):
    """Exact W_p on small instances: (distance, TransportPlan).

    Uniform equal-size clouds reduce to a minimum-cost perfect matching,
    found exhaustively; general weights fall back to the transport LP.
    """
    if a.size * b.size > EXACT_SIZE_CAP:
        raise ContractError(
            f"exact_wr: {a.size}x{b.size} exceeds the {EXACT_SIZE_CAP}-cell "
            "oracle cap; use sinkhorn_wr")
    c = cost_matrix(a, b, p)
    if _uniform_equal(a, b):
        coupling, plan_cost = _exact_matching(c)
    else:
        coupling, plan_cost = _exact_lp(c, a.weights, b.weights)
    distance = max(plan_cost, 0.0) ** (1.0 / p)
    return distance, TransportPlan(coupling, plan_cost, True, 1)


def sinkhorn_wr(a: DiscreteCloud, b: DiscreteCloud, p: float = 2.0,
                epsilon: Optional[float] = None, max_iters: int = 200,
                tol: float = 1e-6):
    """Entropic alternating scaling in the log domain.

    Returns (distance, plan) where distance = <plan, C>^{1/p}: the sharp
    plan cost, with the entropy term excluded, so the value approaches
    exact_wr as epsilon shrinks.
    """
    c = cost_matrix(a, b, p)
    if not np.all(np.isfinite(c)):
        raise NumericError("sinkhorn_wr: non-finite cost entries")
    if c.max() == 0.0:
        # all points coincide; every feasible plan has zero cost
        return 0.0, TransportPlan(np.outer(a.weights, b.weights), 0.0, True, 0)
    if epsilon is None:
        # median cost sets the scale; fall back to the mean when most
        # pairs coincide and the median degenerates to zero
        scale = float(np.median(c)) or float(np.mean(c))
        epsilon = 0.05 * scale
    if epsilon <= 0.0:
        raise ContractError(f"sinkhorn_wr: epsilon must be positive, got {epsilon}")

    with np.errstate(divide="ignore"):
        log_a = np.log(a.weights)
        log_b = np.log(b.weights)
    scaled = -c / epsilon
    converged = False
    it = 0
    f = np.zeros(a.size)
    g = np.zeros(b.size)
    for it in range(1, max_iters + 1):
        f = epsilon * (log_a - _lse_rows(scaled + (g / epsilon)[None, :]))
        f[~np.isfinite(log_a)] = -np.inf
        g = epsilon * (log_b - _lse_rows(scaled.T + (f / epsilon)[None, :]))
        g[~np.isfinite(log_b)] = -np.inf
        coupling = np.exp((f[:, None] + g[None, :]) / epsilon + scaled)
        err = max(np.abs(coupling.sum(axis=1) - a.weights).sum(),
                  np.abs(coupling.sum(axis=0) - b.weights).sum())
        if err <= tol:
            converged = True
            break
    coupling = np.exp((f[:, None] + g[None, :]) / epsilon + scaled)
    plan_cost = float(np.sum(coupling * c))
    return max(plan_cost, 0.0) ** (1.0 / p), TransportPlan(coupling, plan_cost,
                                                           converged, it, f, g)


def _lse_rows(m: np.ndarray) -> np.ndarray:
    mx = np.max(m, axis=1)
    safe = np.where(np.isfinite(mx), mx, 0.0)
    return safe + np.log(np.exp(m - safe[:, None]).sum(axis=1))


@dataclass
class TransportConfig:
    p: float = 2.0
    epsilon: Optional[float] = None   # default 0.05 * median(C)
    max_iters: int = 200
    tol: float = 1e-6
    sample_size: int = 128
    seed: int = 0
    epoch: int = 0


def _fixed_plan_distance(x: Tensor, y: Tensor, coupling: np.ndarray, p: float) -> Tensor:
    """Differentiable W_p with the coupling treated as a constant."""
    x, y = as_tensor(x), as_tensor(y)
    diff = x.data[:, None, :] - y.data[None, :, :]
    r = np.sqrt(np.maximum((diff * diff).sum(axis=2), 0.0))
    s = float(np.sum(coupling * r ** p))
    dist = s ** (1.0 / p) if s > 0 else 0.0
    out = np.array([[dist]], dtype=FLOAT)

    def backward(gout):
        if s <= 1e-30:
            return np.zeros_like(x.data), np.zeros_like(y.data)
        scale = float(gout.reshape(-1)[0]) * s ** (1.0 / p - 1.0)
        rp2 = np.where(r > 1e-12, r ** (p - 2.0), 0.0)
        w = coupling * rp2
        gx = scale * (w[:, :, None] * diff).sum(axis=1)
        gy = -scale * (w[:, :, None] * diff).sum(axis=0)
        return gx, gy

    return _make(out, "fixed_plan_distance", (x, y), backward)


def class_wr_loss(gnn_embed: Tensor, gat_embed: Tensor, labels, train_idx,
                  class_id: int, cfg: TransportConfig) -> Tensor:
    """Transport distance between the two models' embeddings of one class.

    Samples up to cfg.sample_size train nodes of the class (deterministic in
    seed/epoch/class), solves sinkhorn on detached data, and returns the
    plan cost as a loss whose gradient flows to both embeddings through the
    fixed converged plan.
    """
    labels = np.asarray(labels)
    train_idx = np.asarray(train_idx)
    nodes = train_idx[labels[train_idx] == class_id]
    if nodes.size < 2:
        log.warning("class_wr_loss: class %d has %d sampled nodes; loss is 0",
                    class_id, nodes.size)
        return Tensor(np.zeros((1, 1)))
    if nodes.size > cfg.sample_size:
        rng = np.random.Generator(np.random.Philox(
            np.random.SeedSequence([cfg.seed, cfg.epoch, class_id])))
        nodes = np.sort(rng.choice(nodes, size=cfg.sample_size, replace=False))
    x = T.gather_rows(gnn_embed, nodes)
    y = T.gather_rows(gat_embed, nodes)
    _, plan = sinkhorn_wr(DiscreteCloud.uniform(x.detach()),
                          DiscreteCloud.uniform(y.detach()),
                          p=cfg.p, epsilon=cfg.epsilon,
                          max_iters=cfg.max_iters, tol=cfg.tol)
    return _fixed_plan_distance(x, y, plan.coupling, cfg.p)
