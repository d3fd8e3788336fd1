"""Training losses with analytic gradients w.r.t. the network outputs.

Motion residual penalties use smooth-L1 summed over the two components of a
cell and averaged over the cells that take part.  Every function returns
``(value, grad)`` where ``grad`` has the shape of the prediction it refers to.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .clustering import ClusterMap
from .errors import ShapeError
from .pseudo import MOVING, MotionField, StateMap

log = logging.getLogger(__name__)

_NORM_FLOOR = 1e-12
_PAIR_CHUNK = 512


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.05  # cluster / KNN smoothness
    beta: float = 1.0  # backward consistency
    gamma: float = 0.1  # forward consistency
    sigma: float = 0.2  # state cross-entropy
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.smooth_l1_beta > 0:
            raise ValueError("smooth_l1_beta must be positive")


@dataclass(frozen=True)
class LossReport:
    total: float
    sup: float
    cluster: float
    back: float
    forward: float
    state: float
    masked_cells: int
    weights: LossWeights = field(default_factory=LossWeights)

    def recompose(self) -> float:
        w = self.weights
        return self.sup + w.alpha * self.cluster + w.beta * self.back + w.gamma * self.forward + w.sigma * self.state

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "sup": self.sup,
            "cluster": self.cluster,
            "back": self.back,
            "forward": self.forward,
            "state": self.state,
            "masked_cells": self.masked_cells,
        }


def _disp(m) -> np.ndarray:
    return m.disp if isinstance(m, MotionField) else np.asarray(m, dtype=np.float64)


def _smooth_l1_terms(d: np.ndarray, beta: float) -> tuple[np.ndarray, np.ndarray]:
    a = np.abs(d)
    small = a < beta
    val = np.where(small, 0.5 * d * d / beta, a - 0.5 * beta)
    grad = np.where(small, d / beta, np.sign(d))
    return val, grad


def smooth_l1_residual(residual: np.ndarray, mask: np.ndarray, beta: float = 1.0) -> tuple[float, np.ndarray]:
    """Smooth-L1 of ``residual`` toward zero over ``mask`` cells."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    residual = np.asarray(residual, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if residual.shape != mask.shape + (2,):
        raise ShapeError(f"residual {residual.shape} vs mask {mask.shape}")
    n = int(np.count_nonzero(mask))
    grad = np.zeros_like(residual)
    if n == 0:
        log.debug("smooth_l1: empty mask")
        return 0.0, grad
    val, g = _smooth_l1_terms(residual[mask], beta)
    grad[mask] = g / n
    return float(val.sum() / n), grad


def smooth_l1(pred, target, mask=None, beta: float = 1.0) -> tuple[float, np.ndarray]:
    p, t = _disp(pred), _disp(target)
    if p.shape != t.shape:
        raise ShapeError(f"pred {p.shape} vs target {t.shape}")
    if mask is None:
        mask = pred.valid if isinstance(pred, MotionField) else np.ones(p.shape[:2], dtype=bool)
    return smooth_l1_residual(p - t, mask, beta)


def cluster_consistency(pred, clusters: ClusterMap) -> tuple[float, np.ndarray]:
    """Mean over occupied cells of the average motion distance to its cluster mates."""
    M = _disp(pred)
    grad = np.zeros_like(M)
    sizes = clusters.sizes()
    n_total = int(sizes.sum())
    if n_total == 0:
        return 0.0, grad
    total = 0.0
    for cells in clusters.members:
        k = len(cells)
        if k < 2:
            continue
        v = M[cells[:, 0], cells[:, 1]]
        g = np.zeros_like(v)
        s = 0.0
        for start in range(0, k, _PAIR_CHUNK):
            diff = v[start : start + _PAIR_CHUNK, None, :] - v[None, :, :]
            norm = np.sqrt(np.einsum("abk,abk->ab", diff, diff))
            s += norm.sum()
            unit = diff / np.maximum(norm, _NORM_FLOOR)[..., None]
            # Row i appears as "i" against every j and as "j" against every i.
            g[start : start + _PAIR_CHUNK] += 2.0 * unit.sum(axis=1)
        w = 1.0 / (n_total * k)
        total += w * s
        grad[cells[:, 0], cells[:, 1]] += w * g
    return float(total), grad


def knn_neighbors(cells: np.ndarray, k: int, cell_size=(1.0, 1.0)) -> list[np.ndarray]:
    """Indices of the ``k`` nearest other cells; equal distances keep index order."""
    pts = np.asarray(cells, dtype=np.float64) * np.asarray(cell_size)
    n = len(pts)
    out = []
    for start in range(0, n, _PAIR_CHUNK):
        d = np.sum((pts[start : start + _PAIR_CHUNK, None] - pts[None]) ** 2, axis=-1)
        for r, row in enumerate(d):
            i = start + r
            row[i] = np.inf
            order = np.argsort(row, kind="stable")
            out.append(order[: min(k, n - 1)])
    return out


def knn_consistency(pred, k: int = 8, valid=None, cell_size=(1.0, 1.0)) -> tuple[float, np.ndarray]:
    """Same form as the cluster loss with the ``k`` nearest occupied cells as neighbourhood."""
    if k < 1:
        raise ValueError("k must be >= 1")
    M = _disp(pred)
    if valid is None:
        valid = pred.valid if isinstance(pred, MotionField) else np.ones(M.shape[:2], dtype=bool)
    cells = np.argwhere(valid)
    grad = np.zeros_like(M)
    n = len(cells)
    if n < 2:
        return 0.0, grad
    v = M[cells[:, 0], cells[:, 1]]
    g = np.zeros_like(v)
    total = 0.0
    for i, nb in enumerate(knn_neighbors(cells, k, cell_size)):
        diff = v[i] - v[nb]
        norm = np.sqrt(np.einsum("ak,ak->a", diff, diff))
        w = 1.0 / (n * len(nb))
        total += w * norm.sum()
        unit = w * diff / np.maximum(norm, _NORM_FLOOR)[:, None]
        g[i] += unit.sum(axis=0)
        np.add.at(g, nb, -unit)
    grad[cells[:, 0], cells[:, 1]] = g
    return float(total), grad


def _same_mask(a: MotionField, b: MotionField) -> np.ndarray:
    if not isinstance(a, MotionField) or not isinstance(b, MotionField):
        raise TypeError("expected MotionField inputs")
    if a.valid.shape != b.valid.shape or not np.array_equal(a.valid, b.valid):
        raise ShapeError("motion fields have different valid masks")
    return a.valid


def backward_consistency(m_fwd: MotionField, m_bwd: MotionField, beta: float = 1.0):
    """Penalize ``m_fwd + m_bwd``; returns ``(value, grad_fwd, grad_bwd)`` (the grads are equal)."""
    mask = _same_mask(m_fwd, m_bwd)
    value, g = smooth_l1_residual(m_fwd.disp + m_bwd.disp, mask, beta)
    return value, g, g.copy()


def forward_consistency(m1: MotionField, m2: MotionField, beta: float = 1.0):
    """Penalize ``m2 - 2 m1``; returns ``(value, grad_m1, grad_m2)``."""
    mask = _same_mask(m1, m2)
    value, g = smooth_l1_residual(m2.disp - 2.0 * m1.disp, mask, beta)
    return value, -2.0 * g, g


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def state_cross_entropy(logits: np.ndarray, labels: StateMap) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    lab = labels.labels
    if logits.shape != lab.shape + (2,):
        raise ShapeError(f"logits {logits.shape} vs labels {lab.shape}")
    valid = labels.valid
    n = int(np.count_nonzero(valid))
    grad = np.zeros_like(logits)
    if n == 0:
        return 0.0, grad
    logp = _log_softmax(logits[valid])
    y = lab[valid].astype(np.int64)
    onehot = np.eye(2)[y]
    value = -float(np.sum(onehot * logp)) / n
    grad[valid] = (np.exp(logp) - onehot) / n
    return value, grad


def moving_mask(state_logits: np.ndarray, valid=None) -> np.ndarray:
    """Cells whose moving logit strictly beats the static one."""
    logits = np.asarray(state_logits)
    mask = np.argmax(logits, axis=-1) == MOVING
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    return mask


@dataclass
class LossInputs:
    """Everything one training sample contributes to the objective."""

    valid: np.ndarray  # (H, W) cells with predictions and labels
    pred_motion: np.ndarray  # (H, W, 4) forward-sequence output
    state_logits: np.ndarray  # (H, W, 2)
    labels_one: MotionField
    labels_two: MotionField
    state_labels: StateMap
    clusters: ClusterMap | None = None
    pred_motion_bwd: np.ndarray | None = None  # (H, W, 4) backward-sequence output


@dataclass(frozen=True)
class LossGrads:
    motion: np.ndarray  # (H, W, 4)
    state: np.ndarray  # (H, W, 2)
    motion_bwd: np.ndarray | None  # (H, W, 4)


def total_loss(
    inp: LossInputs,
    weights: LossWeights = LossWeights(),
    msm_enabled: bool = True,
    smoothness: str = "cluster",
    knn_k: int = 8,
) -> tuple[LossReport, LossGrads]:
    """Weighted objective ``sup + a*cluster + b*back + g*forward + s*state``.

    Terms with zero weight are skipped outright, so disabling a term and
    omitting it give identical totals.  With ``msm_enabled`` the supervised
    term only sees cells the state head currently calls moving.
    """
    valid = np.asarray(inp.valid, dtype=bool)
    H, W = valid.shape
    one = inp.pred_motion[..., 0:2]
    two = inp.pred_motion[..., 2:4]
    d_motion = np.zeros((H, W, 4))
    d_state = np.zeros((H, W, 2))
    d_bwd = None
    beta_l1 = weights.smooth_l1_beta

    sup_mask = moving_mask(inp.state_logits, valid) if msm_enabled else valid
    s1, g1 = smooth_l1(one, inp.labels_one.disp, sup_mask, beta_l1)
    s2, g2 = smooth_l1(two, inp.labels_two.disp, sup_mask, beta_l1)
    sup = s1 + s2
    d_motion[..., 0:2] += g1
    d_motion[..., 2:4] += g2

    cluster = 0.0
    if weights.alpha > 0:
        if smoothness == "cluster":
            if inp.clusters is None:
                raise ValueError("cluster smoothness needs a ClusterMap")
            cluster, gc = cluster_consistency(one, inp.clusters)
        elif smoothness == "knn":
            cluster, gc = knn_consistency(one, knn_k, valid)
        else:
            raise ValueError(f"unknown smoothness {smoothness!r}")
        d_motion[..., 0:2] += weights.alpha * gc

    back = 0.0
    if weights.beta > 0 and inp.pred_motion_bwd is not None:
        fwd_f = MotionField(one, valid)
        bwd_f = MotionField(inp.pred_motion_bwd[..., 0:2], valid)
        back, gf, gb = backward_consistency(fwd_f, bwd_f, beta_l1)
        d_motion[..., 0:2] += weights.beta * gf
        d_bwd = np.zeros((H, W, 4))
        d_bwd[..., 0:2] = weights.beta * gb

    fwd = 0.0
    if weights.gamma > 0:
        fwd, gm1, gm2 = forward_consistency(MotionField(one, valid), MotionField(two, valid), beta_l1)
        d_motion[..., 0:2] += weights.gamma * gm1
        d_motion[..., 2:4] += weights.gamma * gm2

    state = 0.0
    if weights.sigma > 0:
        state, gs = state_cross_entropy(inp.state_logits, inp.state_labels)
        d_state += weights.sigma * gs

    total = sup + weights.alpha * cluster + weights.beta * back + weights.gamma * fwd + weights.sigma * state
    report = LossReport(
        total=float(total),
        sup=float(sup),
        cluster=float(cluster),
        back=float(back),
        forward=float(fwd),
        state=float(state),
        masked_cells=int(np.count_nonzero(sup_mask)),
        weights=weights,
    )
    return report, LossGrads(d_motion, d_state, d_bwd)
