"""Point-cloud synchronization, cropping, voxelization and pillarization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidPoseError

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class Pose:
    """Rigid transform from a sensor frame to the world frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def from_translation(cls, x: float, y: float, z: float = 0.0) -> "Pose":
        return cls(np.eye(3), np.array([x, y, z], dtype=np.float64))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        c, s = math.cos(yaw), math.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rot, np.asarray(translation, dtype=np.float64))

    def check(self) -> None:
        r = self.rotation
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(self.translation)):
            raise InvalidPoseError("pose contains non-finite values")
        det = float(np.linalg.det(r))
        if abs(det - 1.0) > _ORTHO_TOL or not np.allclose(r.T @ r, np.eye(3), atol=_ORTHO_TOL):
            raise InvalidPoseError(f"rotation is not orthonormal (det={det:.9f})")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def as_array(self) -> np.ndarray:
        """Row-major rotation followed by translation, 12 values."""
        return np.concatenate([self.rotation.reshape(-1), self.translation])

    @classmethod
    def from_array(cls, values) -> "Pose":
        values = np.asarray(values, dtype=np.float64)
        return cls(values[:9].reshape(3, 3), values[9:12])


@dataclass(frozen=True)
class PointFrame:
    points: np.ndarray
    timestamp: float = 0.0
    pose: Pose = field(default_factory=Pose)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, index) -> "PointFrame":
        return PointFrame(self.points[index], self.timestamp, self.pose)


@dataclass(frozen=True)
class GridSpec:
    x_range: tuple[float, float] = (-8.0, 8.0)
    y_range: tuple[float, float] = (-8.0, 8.0)
    z_range: tuple[float, float] = (-3.0, 2.0)
    cell_x: float = 0.25
    cell_y: float = 0.25
    cell_z: float = 0.4

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ValueError(f"{name} must be a nonempty interval, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        for name in ("cell_x", "cell_y", "cell_z"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    # H runs along x and W along y, matching the (i, j) = (x, y) cell index order.
    @property
    def H(self) -> int:
        return math.ceil((self.x_range[1] - self.x_range[0]) / self.cell_x - 1e-9)

    @property
    def W(self) -> int:
        return math.ceil((self.y_range[1] - self.y_range[0]) / self.cell_y - 1e-9)

    @property
    def C(self) -> int:
        return math.ceil((self.z_range[1] - self.z_range[0]) / self.cell_z - 1e-9)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.H, self.W, self.C

    @property
    def mins(self) -> np.ndarray:
        return np.array([self.x_range[0], self.y_range[0], self.z_range[0]])

    @property
    def maxs(self) -> np.ndarray:
        return np.array([self.x_range[1], self.y_range[1], self.z_range[1]])

    @property
    def cells(self) -> np.ndarray:
        return np.array([self.cell_x, self.cell_y, self.cell_z])

    def cell_centers(self, cells: np.ndarray) -> np.ndarray:
        """Metric (x, y) centers of integer (i, j) cell indices."""
        cells = np.asarray(cells, dtype=np.float64).reshape(-1, 2)
        return np.stack(
            [
                self.x_range[0] + (cells[:, 0] + 0.5) * self.cell_x,
                self.y_range[0] + (cells[:, 1] + 0.5) * self.cell_y,
            ],
            axis=1,
        )

    def to_dict(self) -> dict:
        return {
            "x_range": list(self.x_range),
            "y_range": list(self.y_range),
            "z_range": list(self.z_range),
            "cell_x": self.cell_x,
            "cell_y": self.cell_y,
            "cell_z": self.cell_z,
        }


WIDE_GRID = GridSpec(x_range=(-32.0, 32.0), y_range=(-32.0, 32.0))


@dataclass(frozen=True)
class BevVoxelGrid:
    occupancy: np.ndarray  # (H, W, C) bool
    spec: GridSpec


@dataclass(frozen=True)
class PillarSet:
    occupancy: np.ndarray  # (H, W) bool
    cells: np.ndarray  # (N, 2) int, row-major order
    centers: np.ndarray  # (N, 2) meters
    spec: GridSpec

    def __len__(self) -> int:
        return len(self.cells)

    @classmethod
    def from_occupancy(cls, occupancy: np.ndarray, spec: GridSpec) -> "PillarSet":
        occ = np.asarray(occupancy, dtype=bool)
        cells = np.argwhere(occ)
        return cls(occ, cells, spec.cell_centers(cells), spec)


def sync_to_frame(frame: PointFrame, target_pose: Pose) -> PointFrame:
    """Express ``frame``'s points in the sensor coordinates of ``target_pose``."""
    frame.pose.check()
    target_pose.check()
    transform = target_pose.inverse().compose(frame.pose)
    return PointFrame(transform.apply(frame.points), frame.timestamp, target_pose)


def _inside(points: np.ndarray, spec: GridSpec) -> np.ndarray:
    return np.all((points >= spec.mins) & (points < spec.maxs), axis=1)


def crop(frame: PointFrame, spec: GridSpec) -> PointFrame:
    return frame.subset(_inside(frame.points, spec))


def point_cells(points: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Voxel indices of in-range points, plus the in-range boolean mask."""
    keep = _inside(points, spec)
    idx = np.floor((points[keep] - spec.mins) / spec.cells).astype(np.int64)
    # Guard against float rounding at the upper edge.
    idx = np.minimum(idx, np.array(spec.shape) - 1)
    return idx, keep


def voxelize(frame: PointFrame, spec: GridSpec) -> BevVoxelGrid:
    occ = np.zeros(spec.shape, dtype=bool)
    idx, _ = point_cells(frame.points, spec)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return BevVoxelGrid(occ, spec)


def pillarize(grid: BevVoxelGrid) -> PillarSet:
    return PillarSet.from_occupancy(grid.occupancy.any(axis=2), grid.spec)


def bev_occupancy(frame: PointFrame, spec: GridSpec) -> np.ndarray:
    """Shortcut for ``pillarize(voxelize(frame, spec)).occupancy``."""
    return pillarize(voxelize(frame, spec)).occupancy
