"""Speed-stratified motion metrics and forward/backward divergence."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .pseudo import MotionField

GROUPS = ("static", "slow", "fast")
STATIC_MPS = 0.2
FAST_MPS = 5.0


def interpolate_to_1s(d02: MotionField, d04: MotionField) -> MotionField:
    """Average of the 0.2 s and 0.4 s outputs after scaling each to one second."""
    if d02.valid.shape != d04.valid.shape or not np.array_equal(d02.valid, d04.valid):
        raise ShapeError("0.2 s and 0.4 s fields must share a mask")
    disp = 0.5 * (5.0 * d02.disp + 2.5 * d04.disp)
    return MotionField(np.where(d02.valid[..., None], disp, 0.0), d02.valid, 1.0)


def speed_groups(speed: np.ndarray, static_mps: float = STATIC_MPS, fast_mps: float = FAST_MPS) -> np.ndarray:
    """0 static (< static_mps), 1 slow, 2 fast (>= fast_mps)."""
    speed = np.asarray(speed)
    return np.where(speed < static_mps, 0, np.where(speed >= fast_mps, 2, 1))


@dataclass(frozen=True)
class GroupStats:
    mean: float
    median: float
    count: int


@dataclass
class EvalReport:
    groups: dict = field(default_factory=dict)  # name -> GroupStats or None
    divergence: dict | None = None  # name -> mean divergence or None

    @classmethod
    def from_errors(cls, errors: np.ndarray, group_ids: np.ndarray) -> "EvalReport":
        errors = np.asarray(errors, dtype=np.float64).ravel()
        group_ids = np.asarray(group_ids).ravel()
        groups = {}
        for gid, name in enumerate(GROUPS):
            e = errors[group_ids == gid]
            groups[name] = GroupStats(float(e.mean()), float(np.median(e)), int(e.size)) if e.size else None
        return cls(groups)

    def mean(self, group: str) -> float | None:
        g = self.groups.get(group)
        return None if g is None else g.mean

    def key_values(self) -> dict:
        out = {}
        for name in GROUPS:
            g = self.groups.get(name)
            if g is None:
                out[f"{name}.count"] = 0
                continue
            out[f"{name}.mean"] = g.mean
            out[f"{name}.median"] = g.median
            out[f"{name}.count"] = g.count
        if self.divergence is not None:
            for name in GROUPS:
                d = self.divergence.get(name)
                if d is not None:
                    out[f"{name}.divergence"] = d
        return out

    def lines(self) -> list[str]:
        rows = []
        for name in GROUPS:
            g = self.groups.get(name)
            if g is None:
                rows.append(f"{name:<7} absent")
            else:
                rows.append(f"{name:<7} mean={g.mean:.4f} median={g.median:.4f} cells={g.count}")
            if self.divergence is not None and self.divergence.get(name) is not None:
                rows[-1] += f" divergence={self.divergence[name]:.4f}"
        return rows


def _cells(pred: MotionField, gt: MotionField, gt_speed) -> np.ndarray:
    if pred.valid.shape != gt.valid.shape or np.shape(gt_speed) != pred.valid.shape:
        raise ShapeError("prediction, ground truth and speed maps must be aligned")
    return pred.valid & gt.valid


def cell_errors(pred_1s: MotionField, gt_1s: MotionField, gt_speed) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell endpoint errors and their speed groups on jointly valid cells."""
    cells = _cells(pred_1s, gt_1s, gt_speed)
    err = np.linalg.norm(pred_1s.disp[cells] - gt_1s.disp[cells], axis=-1)
    return err, speed_groups(np.asarray(gt_speed)[cells])


def evaluate(pred_1s: MotionField, gt_1s: MotionField, gt_speed) -> EvalReport:
    return EvalReport.from_errors(*cell_errors(pred_1s, gt_1s, gt_speed))


def divergence_values(m_fwd: MotionField, m_bwd: MotionField, gt_speed) -> tuple[np.ndarray, np.ndarray]:
    if m_fwd.valid.shape != m_bwd.valid.shape or not np.array_equal(m_fwd.valid, m_bwd.valid):
        raise ShapeError("forward and backward fields must share a mask")
    if np.shape(gt_speed) != m_fwd.valid.shape:
        raise ShapeError("speed map is not aligned with the motion fields")
    cells = m_fwd.valid
    res = np.linalg.norm(m_fwd.disp[cells] + m_bwd.disp[cells], axis=-1)
    return res, speed_groups(np.asarray(gt_speed)[cells])


def group_means(values: np.ndarray, group_ids: np.ndarray) -> dict:
    return {
        name: (float(values[group_ids == gid].mean()) if np.any(group_ids == gid) else None)
        for gid, name in enumerate(GROUPS)
    }


def divergence(m_fwd: MotionField, m_bwd: MotionField, gt_speed) -> dict:
    """Per speed group mean of ``||m_fwd + m_bwd||``."""
    return group_means(*divergence_values(m_fwd, m_bwd, gt_speed))
