"""Ground-point removal: a height threshold, optionally refined by a RANSAC plane fit."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointFrame


@dataclass(frozen=True)
class GroundParams:
    plane_z: float = -2.0
    tolerance: float = 0.3
    ransac_iters: int = 0
    inlier_threshold: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.ransac_iters < 0:
            raise ValueError("ransac_iters must be >= 0")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")


def _fit_plane(rng: np.random.Generator, pts: np.ndarray, iters: int, thresh: float):
    """Best plane (n, d) with n·p + d = 0 over ``iters`` 3-point hypotheses."""
    best_count, best = -1, None
    for _ in range(iters):
        a, b, c = pts[rng.choice(len(pts), size=3, replace=False)]
        normal = np.cross(b - a, c - a)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal = normal / norm
        d = -normal @ a
        count = int(np.count_nonzero(np.abs(pts @ normal + d) <= thresh))
        if count > best_count:
            best_count, best = count, (normal, d)
    if best is None:
        return None
    # Least-squares refit on the consensus set: z = ax + by + c.
    normal, d = best
    inl = pts[np.abs(pts @ normal + d) <= thresh]
    if len(inl) >= 3:
        A = np.column_stack([inl[:, 0], inl[:, 1], np.ones(len(inl))])
        coef, *_ = np.linalg.lstsq(A, inl[:, 2], rcond=None)
        normal = np.array([-coef[0], -coef[1], 1.0])
        scale = np.linalg.norm(normal)
        normal, d = normal / scale, -coef[2] / scale
    return normal, d


def remove_ground(frame: PointFrame, params: GroundParams) -> tuple[PointFrame, np.ndarray]:
    """Split ``frame`` into non-ground points and the indices of ground points.

    With ``ransac_iters == 0`` a point is ground iff ``|z - plane_z| <= tolerance``.
    Otherwise a plane is fit by RANSAC to the points passing that threshold test and
    every point within ``inlier_threshold`` of the plane is ground. Fewer than three
    candidates fall back to the threshold test.
    """
    pts = frame.points
    near = np.abs(pts[:, 2] - params.plane_z) <= params.tolerance
    is_ground = near
    if params.ransac_iters > 0 and np.count_nonzero(near) >= 3:
        rng = np.random.default_rng(params.seed)
        plane = _fit_plane(rng, pts[near], params.ransac_iters, params.inlier_threshold)
        if plane is not None:
            normal, d = plane
            is_ground = np.abs(pts @ normal + d) <= params.inlier_threshold
    ground_idx = np.flatnonzero(is_ground)
    return frame.subset(~is_ground), ground_idx
