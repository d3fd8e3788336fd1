"""Pseudo motion and moving-state labels from optimal-transport matching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .geometry import PillarSet
from .transport import TransportConfig, cost_matrix, prewarp, sinkhorn

STATIC, MOVING, INVALID = 0, 1, -1


@dataclass(frozen=True)
class MotionField:
    """Per-cell 2D displacement over ``horizon`` seconds; zero outside ``valid``."""

    disp: np.ndarray  # (H, W, 2) meters
    valid: np.ndarray  # (H, W) bool
    horizon: float = 0.2

    def __post_init__(self):
        disp = np.asarray(self.disp, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if disp.shape != valid.shape + (2,):
            raise ShapeError(f"disp {disp.shape} does not match mask {valid.shape}")
        object.__setattr__(self, "disp", disp)
        object.__setattr__(self, "valid", valid)

    @property
    def dx(self) -> np.ndarray:
        return self.disp[..., 0]

    @property
    def dy(self) -> np.ndarray:
        return self.disp[..., 1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    @classmethod
    def zeros(cls, valid: np.ndarray, horizon: float = 0.2) -> "MotionField":
        valid = np.asarray(valid, dtype=bool)
        return cls(np.zeros(valid.shape + (2,)), valid, horizon)

    def masked(self) -> "MotionField":
        return MotionField(np.where(self.valid[..., None], self.disp, 0.0), self.valid, self.horizon)

    def scaled(self, factor: float, horizon: float | None = None) -> "MotionField":
        return MotionField(self.disp * factor, self.valid, self.horizon * factor if horizon is None else horizon)

    def at(self, cells: np.ndarray) -> np.ndarray:
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        return self.disp[cells[:, 0], cells[:, 1]]


@dataclass(frozen=True)
class StateMap:
    labels: np.ndarray  # (H, W) int8 in {STATIC, MOVING, INVALID}

    @property
    def valid(self) -> np.ndarray:
        return self.labels != INVALID


def _match(src: PillarSet, tgt: PillarSet, warp: np.ndarray | None, cfg: TransportConfig) -> np.ndarray:
    """Displacement from each source center to its hard-assigned target center."""
    start = src.centers if warp is None else prewarp(src.centers, warp)
    C = cost_matrix(start, tgt.centers)
    plan = sinkhorn(C, cfg)
    return tgt.centers[plan.hard] - src.centers


def _labels_to_field(src: PillarSet, disp: np.ndarray, horizon: float, ground_mask) -> MotionField:
    H, W = src.occupancy.shape
    field = np.zeros((H, W, 2))
    field[src.cells[:, 0], src.cells[:, 1]] = disp
    valid = src.occupancy.copy()
    if ground_mask is not None:
        # Ground-only cells are labeled with zero motion.
        valid |= np.asarray(ground_mask, dtype=bool)
    return MotionField(field, valid, horizon)


def generate_pseudo_motion(
    src: PillarSet,
    tgt: PillarSet,
    predicted: MotionField | None = None,
    cfg: TransportConfig | None = None,
    *,
    step_seconds: float = 0.2,
    ground_mask: np.ndarray | None = None,
) -> MotionField:
    """One-step pseudo labels ``tgt[T[i]] - src[i]`` on the source grid.

    The source centers are pre-warped by ``predicted`` (sampled at the source
    cells) before matching, but labels are measured from the original
    positions.  Raises ``EmptyInputError`` if either pillar set is empty.
    """
    cfg = cfg or TransportConfig()
    warp = None if predicted is None else predicted.at(src.cells)
    disp = _match(src, tgt, warp, cfg)
    return _labels_to_field(src, disp, step_seconds, ground_mask)


def generate_two_step(
    src: PillarSet,
    tgt2: PillarSet,
    predicted: MotionField | None = None,
    cfg: TransportConfig | None = None,
    *,
    step_seconds: float = 0.2,
    ground_mask: np.ndarray | None = None,
) -> MotionField:
    """Pseudo labels from frame t to t+2; pre-warps by twice the one-step prediction."""
    cfg = cfg or TransportConfig()
    warp = None if predicted is None else 2.0 * predicted.at(src.cells)
    disp = _match(src, tgt2, warp, cfg)
    return _labels_to_field(src, disp, 2.0 * step_seconds, ground_mask)


def pseudo_state_labels(labels: MotionField, step_seconds: float = 0.2, threshold_mps: float = 0.2) -> StateMap:
    if not step_seconds > 0:
        raise ValueError("step_seconds must be positive")
    speed = np.linalg.norm(labels.disp, axis=-1) / step_seconds
    out = np.where(speed >= threshold_mps, MOVING, STATIC).astype(np.int8)
    out[~labels.valid] = INVALID
    return StateMap(out)
