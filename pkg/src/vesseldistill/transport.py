"""Entropic optimal transport between point clouds with uniform weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

MAX_POINTS = 2000


@dataclass
class TransportResult:
    cost: float
    converged: bool
    iterations: int
    marginal_error: float


def subsample(points: np.ndarray, limit: int = MAX_POINTS) -> np.ndarray:
    """Keep every k-th point so at most ``limit`` remain."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) <= limit:
        return pts
    stride = -(-len(pts) // limit)
    return pts[::stride]


def _as_points(cloud) -> np.ndarray:
    return np.asarray(getattr(cloud, "points", cloud), dtype=np.float64).reshape(-1, 3)


def sinkhorn(cost: np.ndarray, eps: float, max_iter: int = 500, tol: float = 1e-6,
             eps_scaling: bool = True) -> TransportResult:
    """Log-domain Sinkhorn on a cost matrix with uniform marginals.

    With ``eps_scaling`` the regulariser starts at the largest cost and is
    halved down to ``eps``, warm-starting the dual potentials; ``max_iter``
    bounds the iterations spent at each level. Convergence is judged at the
    final level by the L1 violation of the row marginal.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    C = np.asarray(cost, dtype=np.float64)
    n, m = C.shape
    if n == 0 or m == 0:
        raise ValueError("transport needs non-empty point sets")
    log_a = np.full(n, -np.log(n))
    log_b = np.full(m, -np.log(m))
    f = np.zeros(n)
    g = np.zeros(m)
    schedule = [eps]
    if eps_scaling:
        e = max(float(C.max()), eps)
        schedule = []
        while e > eps:
            schedule.append(e)
            e /= 2.0
        schedule.append(eps)
    it = 0
    err = np.inf
    for e in schedule:
        for it in range(1, max_iter + 1):
            f = e * log_a - e * logsumexp((g[None, :] - C) / e, axis=1)
            g = e * log_b - e * logsumexp((f[:, None] - C) / e, axis=0)
            log_p = (f[:, None] + g[None, :] - C) / e
            err = float(np.abs(np.exp(logsumexp(log_p, axis=1)) - np.exp(log_a)).sum())
            if err < tol:
                break
    plan = np.exp((f[:, None] + g[None, :] - C) / eps)
    return TransportResult(float((plan * C).sum()), err < tol, it, err)


def squared_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def sinkhorn_smd(a, b, eps: float = 1.0, max_iter: int = 500, tol: float = 1e-6,
                 return_result: bool = False):
    """Skeleton matching distance: entropic OT cost with squared Euclidean ground cost.

    ``a`` and ``b`` are point arrays of shape (n, 3) or objects with a
    ``points`` attribute. Clouds above 2,000 points are strided down first.
    """
    pa, pb = subsample(_as_points(a)), subsample(_as_points(b))
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("sinkhorn_smd needs two non-empty point clouds")
    res = sinkhorn(squared_cost(pa, pb), eps, max_iter, tol)
    return res if return_result else res.cost
