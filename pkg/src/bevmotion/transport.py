"""Entropic optimal transport between two 2D point sets.

The solver runs Sinkhorn scaling on a kernel expressed relative to dual
potentials ``(f, g)``.  Whenever the scalings ``u, v`` leave ``[1/tau, tau]``
they are absorbed into the potentials and the kernel is rebuilt; if a scaling
step would divide by an underflowed kernel sum the iteration falls back to an
exact log-domain update.  This keeps the inner loop at two mat-vec products
while staying stable for very small ``epsilon``.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import EmptyInputError, ShapeError, SolverError, UnsupportedError

log = logging.getLogger(__name__)

_ABSORB_TAU = 1e30
_ABSORB_LO = 1.0 / _ABSORB_TAU
# Scaling iterations between underflow / convergence checks.
_CHECK_EVERY = 10


@dataclass(frozen=True)
class CostMatrix:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeError("cost matrix must be 2D")
        object.__setattr__(self, "values", v)

    @property
    def src_count(self) -> int:
        return self.values.shape[0]

    @property
    def tgt_count(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class TransportConfig:
    """Solver settings.

    ``epsilon=None`` selects ``relative_epsilon * median(C)`` per problem.
    """

    epsilon: float | None = None
    relative_epsilon: float = 0.03
    max_iters: int = 1000
    marginal_tol: float = 1e-6

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.relative_epsilon > 0:
            raise ValueError("relative_epsilon must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.marginal_tol > 0:
            raise ValueError("marginal_tol must be positive")

    def resolve_epsilon(self, C: np.ndarray) -> float:
        if self.epsilon is not None:
            return float(self.epsilon)
        scale = float(np.median(C)) if C.size else 0.0
        if scale <= 0:
            scale = float(np.mean(C)) if C.size else 0.0
        if scale <= 0:
            # All-zero cost: every feasible plan is optimal.
            scale = 1.0
        return self.relative_epsilon * scale


@dataclass(frozen=True)
class TransportPlan:
    soft: np.ndarray
    hard: np.ndarray
    converged: bool
    iterations_used: int
    epsilon: float
    residual: float


def cost_matrix(src, tgt) -> CostMatrix:
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    tgt = np.asarray(tgt, dtype=np.float64).reshape(-1, 2)
    if len(src) == 0 or len(tgt) == 0:
        raise EmptyInputError(f"cannot match {len(src)} source against {len(tgt)} target points")
    diff = src[:, None, :] - tgt[None, :, :]
    return CostMatrix(np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)))


def prewarp(src, predicted_motion) -> np.ndarray:
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    motion = np.asarray(predicted_motion, dtype=np.float64).reshape(-1, 2)
    if src.shape != motion.shape:
        raise ShapeError(f"prewarp: {len(src)} points but {len(motion)} displacements")
    return src + motion


def harden(soft) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest column index."""
    soft = np.asarray(soft, dtype=np.float64)
    return np.argmax(np.where(np.isnan(soft), -np.inf, soft), axis=1)


def marginal_residual(plan: np.ndarray) -> float:
    n, m = plan.shape
    rows = np.abs(plan.sum(axis=1) - 1.0 / n).max()
    cols = np.abs(plan.sum(axis=0) - 1.0 / m).max()
    return float(max(rows, cols))


def _usable(x: np.ndarray) -> bool:
    # min > 0 rejects zeros and NaN; a finite sum rejects inf.
    return bool(x.min() > 0.0) and bool(np.isfinite(x.sum()))


def sinkhorn(C, cfg: TransportConfig | None = None) -> TransportPlan:
    """Solve the entropic OT problem with uniform marginals ``1/N_t`` and ``1/N_{t+1}``."""
    cfg = cfg or TransportConfig()
    C = C.values if isinstance(C, CostMatrix) else np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or 0 in C.shape:
        raise EmptyInputError("sinkhorn needs a nonempty 2D cost matrix")
    if not np.all(np.isfinite(C)):
        raise SolverError("cost matrix has non-finite entries")
    n, m = C.shape
    eps = cfg.resolve_epsilon(C)
    a = np.full(n, 1.0 / n)
    b = np.full(m, 1.0 / m)
    log_a, log_b = np.log(a), np.log(b)

    f = np.zeros(n)
    g = np.zeros(m)

    def log_step(f, g):
        f = eps * (log_a - logsumexp((g[None, :] - C) / eps, axis=1))
        g = eps * (log_b - logsumexp((f[:, None] - C) / eps, axis=0))
        return f, g

    def kernel(f, g):
        return np.exp((f[:, None] + g[None, :] - C) / eps)

    f, g = log_step(f, g)
    K = kernel(f, g)
    KT = np.ascontiguousarray(K.T)
    u = np.ones(n)
    v = np.ones(m)
    it = 0
    with np.errstate(divide="ignore", over="ignore", invalid="ignore", under="ignore"):
        while it < cfg.max_iters:
            u0, v0 = u, v
            block = min(_CHECK_EVERY, cfg.max_iters - it)
            for _ in range(block):
                u = a / (K @ v)
                v = b / (KT @ u)
            it += block
            if not (_usable(u) and _usable(v)):
                # Underflow inside the block: restart it from exact log-domain updates.
                f, g = log_step(f + eps * np.log(u0), g + eps * np.log(v0))
                K = kernel(f, g)
                KT = np.ascontiguousarray(K.T)
                u, v = np.ones(n), np.ones(m)
                continue
            # Columns are exact after the v update; the row error is what remains.
            if float(np.abs(u * (K @ v) - a).max()) < cfg.marginal_tol:
                break
            if not (_ABSORB_LO < u.min() and u.max() < _ABSORB_TAU and _ABSORB_LO < v.min() and v.max() < _ABSORB_TAU):
                f, g = f + eps * np.log(u), g + eps * np.log(v)
                K = kernel(f, g)
                KT = np.ascontiguousarray(K.T)
                u, v = np.ones(n), np.ones(m)

    soft = u[:, None] * K * v[None, :]
    if not np.all(np.isfinite(soft)):
        raise SolverError(f"sinkhorn produced non-finite plan (eps={eps:g})")
    residual = marginal_residual(soft)
    converged = residual < cfg.marginal_tol
    if not converged:
        log.debug("sinkhorn: not converged after %d iterations (residual %.3g)", it, residual)
    return TransportPlan(soft, harden(soft), converged, it, eps, residual)


def transport_cost(C, plan: TransportPlan) -> float:
    C = C.values if isinstance(C, CostMatrix) else np.asarray(C)
    return float(np.sum(C * plan.soft))


def exact_assignment_oracle(C) -> np.ndarray:
    """Minimum-cost permutation by exhaustive enumeration (test oracle, N <= 10)."""
    C = C.values if isinstance(C, CostMatrix) else np.asarray(C, dtype=np.float64)
    n, m = C.shape
    if n != m or n > 10:
        raise UnsupportedError(f"oracle supports square instances up to 10x10, got {n}x{m}")
    best_cost, best = np.inf, None
    rows = np.arange(n)
    for perm in itertools.permutations(range(n)):
        cost = C[rows, perm].sum()
        if cost < best_cost:
            best_cost, best = cost, perm
    return np.array(best, dtype=np.int64)
