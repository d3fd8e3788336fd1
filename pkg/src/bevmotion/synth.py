"""Deterministic synthetic LiDAR-like scenes with known BEV motion."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from .geometry import GridSpec, PointFrame, Pose, point_cells
from .pseudo import MotionField

GROUND, STATIC_OBJECT, ARTIFACT, MOVER_BASE = 0, 1, 2, 10
GROUND_Z = -2.0


@dataclass(frozen=True)
class SceneSpec:
    n_movers: int = 3
    mover_size: tuple[float, float] = (1.0, 3.0)  # side length range, meters
    speed_range: tuple[float, float] = (0.5, 8.0)  # m/s
    velocities: tuple | None = None  # explicit per-mover (vx, vy), overrides speed_range
    velocity_quantum: float = 0.0  # snap per-frame displacement to this grid (0 = off)
    ground_density: float = 2.0  # points / m^2
    artifact_rate: float = 0.0  # spurious clusters per frame (Poisson mean)
    ego_velocity: tuple[float, float] = (0.0, 0.0)
    frame_period: float = 0.2
    n_frames: int = 12
    seed: int = 0
    n_static: int = 2
    static_size: tuple[float, float] = (0.5, 2.0)
    min_gap: float = 1.0
    extent: float = 5.5  # movers are centred in [-extent, extent]^2 at mid-sequence
    point_spacing: float = 0.125
    large_mover_size: tuple[float, float] | None = None  # size range of mover 0, if set

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if not self.frame_period > 0:
            raise ValueError("frame_period must be positive")
        if self.speed_range[0] < 0 or self.speed_range[1] < self.speed_range[0]:
            raise ValueError("speed_range must satisfy 0 <= lo <= hi")
        if self.n_movers < 0 or self.n_static < 0:
            raise ValueError("object counts must be >= 0")
        if self.artifact_rate < 0 or self.ground_density < 0:
            raise ValueError("rates must be >= 0")
        if self.velocities is not None:
            vel = tuple(tuple(float(c) for c in v) for v in self.velocities)
            if len(vel) != self.n_movers:
                raise ValueError("velocities must list one (vx, vy) per mover")
            object.__setattr__(self, "velocities", vel)
        for name in ("mover_size", "speed_range", "ego_velocity", "static_size"):
            object.__setattr__(self, name, tuple(float(c) for c in getattr(self, name)))
        if self.large_mover_size is not None:
            object.__setattr__(self, "large_mover_size", tuple(float(c) for c in self.large_mover_size))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = [list(x) if isinstance(x, tuple) else x for x in v]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for k in ("mover_size", "speed_range", "ego_velocity", "static_size", "large_mover_size"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        if d.get("velocities") is not None:
            d["velocities"] = tuple(tuple(v) for v in d["velocities"])
        return cls(**d)


@dataclass(frozen=True)
class GroundTruth:
    motion_02: MotionField
    motion_04: MotionField
    motion_1s: MotionField
    speed: np.ndarray  # (H, W) m/s
    ground_mask: np.ndarray  # (H, W) cells holding true ground points


@dataclass(frozen=True)
class LabeledSequence:
    frames: list
    labels: list  # per frame, int16 point labels
    mover_steps: np.ndarray  # (n_movers, 2) world displacement per frame period
    spec: SceneSpec
    grid: GridSpec = field(default_factory=GridSpec)

    def __len__(self) -> int:
        return len(self.frames)

    def ground_truth(self, t: int) -> GroundTruth:
        return self._gt[t]

    @cached_property
    def _gt(self) -> list:
        return [_ground_truth(self, t) for t in range(len(self.frames))]

    @property
    def gt_motion(self) -> list:
        return [(g.motion_02, g.motion_04, g.motion_1s) for g in self._gt]

    @property
    def gt_speed(self) -> list:
        return [g.speed for g in self._gt]

    def ground_masks(self) -> list:
        """Per-frame boolean point masks of true ground points."""
        return [lab == GROUND for lab in self.labels]


def _ground_truth(seq: LabeledSequence, t: int) -> GroundTruth:
    grid = seq.grid
    frame = seq.frames[t]
    lab = seq.labels[t]
    H, W = grid.H, grid.W
    idx, keep = point_cells(frame.points, grid)
    lab = lab[keep]
    occupied = np.zeros((H, W), dtype=bool)
    occupied[idx[:, 0], idx[:, 1]] = True
    step = np.zeros((H, W, 2))
    rot = frame.pose.rotation[:2, :2]
    for k in range(len(seq.mover_steps)):
        sel = lab == MOVER_BASE + k
        local = rot.T @ seq.mover_steps[k]
        step[idx[sel, 0], idx[sel, 1]] = local
    ground = np.zeros((H, W), dtype=bool)
    g = lab == GROUND
    ground[idx[g, 0], idx[g, 1]] = True
    period = seq.spec.frame_period
    speed = np.linalg.norm(step, axis=-1) / period
    return GroundTruth(
        MotionField(step, occupied, period),
        MotionField(2.0 * step, occupied, 2 * period),
        MotionField(5.0 * step, occupied, 5 * period),
        speed,
        ground,
    )


def _box_points(rng, length, width, height, spacing) -> np.ndarray:
    """Top face on a jittered lattice plus two rings of side points, body frame."""
    xs = np.arange(-length / 2 + spacing / 2, length / 2, spacing)
    ys = np.arange(-width / 2 + spacing / 2, width / 2, spacing)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    top = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, height)])
    top[:, :2] += rng.uniform(-spacing / 4, spacing / 4, size=(len(top), 2))
    rings = []
    for z in (0.45 * height, 0.8 * height):
        perim = np.concatenate(
            [
                np.column_stack([xs, np.full_like(xs, -width / 2)]),
                np.column_stack([xs, np.full_like(xs, width / 2)]),
                np.column_stack([np.full_like(ys, -length / 2), ys]),
                np.column_stack([np.full_like(ys, length / 2), ys]),
            ]
        )
        rings.append(np.column_stack([perim, np.full(len(perim), z)]))
    pts = np.concatenate([top] + rings)
    pts[:, 2] += GROUND_Z + 0.4  # clearance keeps object points out of the ground band
    return pts


def _rotate_xy(points: np.ndarray, yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    out = points.copy()
    out[:, 0] = c * points[:, 0] - s * points[:, 1]
    out[:, 1] = s * points[:, 0] + c * points[:, 1]
    return out


def _snap_off_boundaries(points: np.ndarray, quantum: float) -> np.ndarray:
    """Keep x/y at least 5% of a quantum away from quantum-grid lines."""
    out = points.copy()
    for a in (0, 1):
        base = np.floor(out[:, a] / quantum) * quantum
        frac = np.clip((out[:, a] - base) / quantum, 0.05, 0.95)
        out[:, a] = base + frac * quantum
    return out


_LAYOUT_ATTEMPTS = 20


def generate(spec: SceneSpec, grid: GridSpec | None = None) -> LabeledSequence:
    """Build a sequence of sensor-frame point clouds with per-point labels."""
    if spec.n_frames < 1:
        raise ValueError("degenerate scene: zero frames")
    grid = grid or GridSpec()
    rng = np.random.default_rng(spec.seed)
    period = spec.frame_period
    # Integer anchor frame: positions at every frame differ from it by whole steps.
    t_ref = (spec.n_frames - 1) // 2
    frame_offsets = (np.arange(spec.n_frames) - t_ref) * period
    ego_v = np.asarray(spec.ego_velocity)
    ego_pos = np.outer(np.arange(spec.n_frames) * period, ego_v)
    ego_ref = ego_v * t_ref * period

    objects = []  # (body points, centre_ref, yaw, step, radius)

    def fits(centre, step, radius):
        track = centre + np.outer(frame_offsets / period, step)
        for _, c2, _, s2, r2 in objects:
            track2 = c2 + np.outer(frame_offsets / period, s2)
            if np.min(np.linalg.norm(track - track2, axis=1)) < radius + r2 + spec.min_gap:
                return False
        return True

    def add_object(size_range, step_of, snap):
        for _ in range(2000):
            length, width = rng.uniform(*size_range, size=2)
            length, width = max(length, width), min(length, width)
            step = step_of()
            centre = ego_ref + rng.uniform(-spec.extent, spec.extent, size=2)
            if snap:
                centre = np.round(centre / spec.velocity_quantum) * spec.velocity_quantum
            radius = 0.5 * math.hypot(length, width)
            if fits(centre, step, radius):
                yaw = math.atan2(step[1], step[0]) if np.any(step) else rng.uniform(0, math.pi)
                height = rng.uniform(1.2, 1.8)
                body = _rotate_xy(_box_points(rng, length, width, height, spec.point_spacing), yaw)
                objects.append((body, centre, yaw, step, radius))
                return True
        return False

    q = spec.velocity_quantum

    def layout() -> bool:
        for k in range(spec.n_movers):
            if spec.velocities is not None:
                vel = np.asarray(spec.velocities[k], dtype=np.float64)
                step_of = lambda vel=vel: vel * period  # noqa: E731
            else:
                def step_of():
                    speed = rng.uniform(*spec.speed_range)
                    heading = rng.uniform(0, 2 * math.pi)
                    return speed * period * np.array([math.cos(heading), math.sin(heading)])

            def quantized(step_of=step_of):
                s = step_of()
                return np.round(s / q) * q if q > 0 else s

            size = spec.large_mover_size if k == 0 and spec.large_mover_size is not None else spec.mover_size
            if not add_object(size, quantized, snap=q > 0):
                return False
        return all(add_object(spec.static_size, lambda: np.zeros(2), snap=q > 0) for _ in range(spec.n_static))

    # Early objects can box in later ones, so a crowded draw starts over.
    for _ in range(_LAYOUT_ATTEMPTS):
        if layout():
            break
        objects.clear()
    else:
        raise ValueError("could not place objects with the requested gaps; enlarge extent or reduce counts")
    n_movers = spec.n_movers

    if q > 0:
        snapped = []
        for body, centre, yaw, step, r in objects:
            world_ref = body.copy()
            world_ref[:, :2] += centre
            world_ref = _snap_off_boundaries(world_ref, q)
            world_ref[:, :2] -= centre
            snapped.append((world_ref, centre, yaw, step, r))
        objects = snapped

    half = np.array([grid.x_range[1] - grid.x_range[0], grid.y_range[1] - grid.y_range[0]]) / 2 + 1.0
    lo_xy = np.array([grid.x_range[0], grid.y_range[0]])
    hi_xy = np.array([grid.x_range[1], grid.y_range[1]])
    frames, labels = [], []
    for k in range(spec.n_frames):
        parts, labs = [], []
        for oid, (body, centre, _, step, _) in enumerate(objects):
            pos = centre + step * (k - t_ref)
            pts = body.copy()
            pts[:, :2] += pos
            parts.append(pts)
            code = MOVER_BASE + oid if oid < n_movers else STATIC_OBJECT
            labs.append(np.full(len(pts), code, dtype=np.int16))
        area = float(np.prod(2 * half))
        n_ground = rng.poisson(spec.ground_density * area) if spec.ground_density > 0 else 0
        gxy = ego_pos[k] + rng.uniform(-half, half, size=(n_ground, 2))
        gz = GROUND_Z + rng.normal(0.0, 0.02, size=n_ground)
        parts.append(np.column_stack([gxy, gz]))
        labs.append(np.full(n_ground, GROUND, dtype=np.int16))
        n_art = rng.poisson(spec.artifact_rate) if spec.artifact_rate > 0 else 0
        for _ in range(n_art):
            centre = ego_pos[k] + rng.uniform(lo_xy + 1.0, hi_xy - 1.0)
            radius = rng.uniform(0.2, 0.6)
            m = int(rng.integers(6, 20))
            ang = rng.uniform(0, 2 * math.pi, m)
            rad = radius * np.sqrt(rng.uniform(0, 1, m))
            xy = centre + np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
            z = GROUND_Z + rng.uniform(0.45, 1.0, m)
            parts.append(np.column_stack([xy, z]))
            labs.append(np.full(m, ARTIFACT, dtype=np.int16))
        world = np.concatenate(parts) if parts else np.zeros((0, 3))
        pose = Pose.from_translation(ego_pos[k][0], ego_pos[k][1], 0.0)
        sensor = pose.inverse().apply(world)
        # Stored at float32 precision so that file round-trips are exact.
        sensor = sensor.astype("<f4").astype(np.float64)
        frames.append(PointFrame(sensor, timestamp=k * period, pose=pose))
        labels.append(np.concatenate(labs) if labs else np.zeros(0, dtype=np.int16))

    steps = np.array([objects[i][3] for i in range(n_movers)], dtype=np.float64).reshape(-1, 2)
    return LabeledSequence(frames, labels, steps, spec, grid)


def generate_collection(spec: SceneSpec, n_sequences: int, grid: GridSpec | None = None) -> list:
    """Independent sequences with seeds ``spec.seed, spec.seed + 1, ...``."""
    from dataclasses import replace

    return [generate(replace(spec, seed=spec.seed + i), grid) for i in range(n_sequences)]
