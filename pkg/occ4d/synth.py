"""Deterministic synthetic scenes with closed-form ground truth.

Every random draw comes from ``Lcg64``, a 64-bit linear congruential
generator (MMIX multiplier and increment) whose 53 high bits give uniform
floats, so scenes can be reproduced from the seed in any language.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from pyquaternion import Quaternion

from occ4d.dataset import paint_boxes
from occ4d.errors import ConfigurationError
from occ4d.grid import FlowVolume, GridSpec, OccupancyGrid, SemanticLabel, axis_centers, voxel_centers
from occ4d.scene import BoxState, DurationHistogram, InstanceTrack, LabeledPointCloud, Pose, Scene, SequenceWindow, wrap_angle
from occ4d.schemas import InstanceScript, SynthConfig

logger = logging.getLogger("occ4d.synth")

LCG_MULTIPLIER = 6364136223846793005
LCG_INCREMENT = 1442695040888963407
LCG_MASK = (1 << 64) - 1

GROUND_THICKNESS = 0.4
PILLAR_HALF_WIDTH = 0.4
PILLAR_HEIGHT = 3.0


class Lcg64:
    def __init__(self, seed: int):
        self.state = seed & LCG_MASK

    def next_u64(self) -> int:
        self.state = (LCG_MULTIPLIER * self.state + LCG_INCREMENT) & LCG_MASK
        return self.state

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * (1.0 / (1 << 53))
        return lo + (hi - lo) * u

    def integer(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return min(int(self.uniform() * n), n - 1)


# ---------------------------------------------------------------------------
# Closed-form motion
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Motion:
    id: int
    category: str
    kind: str  # static | cv | turn
    center: np.ndarray  # world position at frame 0
    velocity: np.ndarray  # m/s
    yaw: float
    yaw_rate: float
    size: np.ndarray
    first: int
    last: int
    dt: float
    visibility: float = 1.0
    schedule: dict[int, float] = field(default_factory=dict)

    def exists_at(self, k: int) -> bool:
        return self.first <= k <= self.last

    def center_at(self, k: int) -> np.ndarray:
        tau = k * self.dt
        if self.kind == "static":
            return self.center.copy()
        if self.kind == "cv" or abs(self.yaw_rate) < 1e-12:
            return self.center + self.velocity * tau
        speed = math.hypot(self.velocity[0], self.velocity[1])
        theta = self.yaw + self.yaw_rate * tau
        radius = speed / self.yaw_rate
        return self.center + np.array([
            radius * (math.sin(theta) - math.sin(self.yaw)),
            -radius * (math.cos(theta) - math.cos(self.yaw)),
            self.velocity[2] * tau,
        ])

    def yaw_at(self, k: int) -> float:
        if self.kind == "turn":
            return wrap_angle(self.yaw + self.yaw_rate * k * self.dt)
        return self.yaw

    def visibility_at(self, k: int) -> float:
        return self.schedule.get(k, self.visibility)

    def state_at(self, k: int) -> BoxState:
        return BoxState(self.center_at(k), self.size, self.yaw_at(k), self.visibility_at(k))

    @property
    def footprint_radius(self) -> float:
        return math.hypot(self.size[0], self.size[1]) / 2.0


@dataclass(frozen=True, eq=False)
class SynthPlan:
    config: SynthConfig
    motions: tuple[Motion, ...]
    pillars: np.ndarray  # (P, 2) world x-y

    @property
    def dt(self) -> float:
        return self.config.frame_interval

    def ego_pose(self, k: int) -> Pose:
        if self.config.ego == "static":
            return Pose.identity()
        return Pose(Quaternion(), np.asarray(self.config.ego_velocity) * (k * self.dt))


def _draw(rng: Lcg64, config: SynthConfig, script: Optional[InstanceScript], kind: str, instance_id: int) -> Motion:
    # the draw order is fixed so scripted overrides never shift later draws
    size = np.array([rng.uniform(lo, hi) for lo, hi in zip(config.size_min, config.size_max)])
    x = rng.uniform(*config.spawn_x)
    y = rng.uniform(*config.spawn_y)
    heading = rng.uniform(-math.pi, math.pi)
    speed = rng.uniform(*config.speed_range)
    yaw_rate = rng.uniform(*config.yaw_rate_range)

    category = "car"
    first, last = 0, config.n_frames - 1
    visibility, schedule = 1.0, {}
    if script is not None:
        kind = script.kinematics
        category = script.category
        if script.size_lwh is not None:
            size = np.array(script.size_lwh, dtype=np.float64)
        if script.yaw is not None:
            heading = script.yaw
        yaw_rate = script.yaw_rate
        if script.appear is not None:
            first, last = script.appear[0], min(script.appear[1], config.n_frames - 1)
        visibility, schedule = script.visibility, dict(script.visibility_schedule)

    center = np.array([x, y, config.ground_z + size[2] / 2.0])
    velocity = np.array([speed * math.cos(heading), speed * math.sin(heading), 0.0])
    if script is not None and script.center is not None:
        center = np.array(script.center, dtype=np.float64)
    if script is not None and script.velocity is not None:
        velocity = np.array(script.velocity, dtype=np.float64)
        if script.yaw is None and kind != "static":
            heading = math.atan2(velocity[1], velocity[0])
    if kind == "static":
        velocity = np.zeros(3)
    if first >= config.n_frames:
        raise ConfigurationError(f"instance {instance_id} appears at frame {first} of a {config.n_frames}-frame scene")
    return Motion(
        id=instance_id, category=category, kind=kind, center=center, velocity=velocity,
        yaw=wrap_angle(heading), yaw_rate=yaw_rate if kind == "turn" else 0.0, size=size,
        first=first, last=last, dt=config.frame_interval, visibility=visibility, schedule=schedule,
    )


def _acceptable(motion: Motion, accepted: list[Motion], config: SynthConfig) -> bool:
    frames = range(motion.first, motion.last + 1)
    centers = np.stack([motion.center_at(k) for k in frames])
    (x0, x1), (y0, y1) = config.spawn_x, config.spawn_y
    if np.any((centers[:, 0] < x0) | (centers[:, 0] > x1) | (centers[:, 1] < y0) | (centers[:, 1] > y1)):
        return False
    for other in accepted:
        gap = motion.footprint_radius + other.footprint_radius + config.min_separation
        for k in frames:
            if other.exists_at(k) and np.hypot(*(motion.center_at(k)[:2] - other.center_at(k)[:2])) <= gap:
                return False
    return True


def plan_scene(config: SynthConfig) -> SynthPlan:
    rng = Lcg64(config.seed)
    accepted: list[Motion] = []
    kinds = ("static", "cv", "turn")
    requests = [(script, script.kinematics) for script in config.instances]
    for _ in range(config.n_instances):
        kind = kinds[rng.integer(3)] if config.kinematics == "mixed" else config.kinematics
        requests.append((None, kind))

    for script, kind in requests:
        instance_id = len(accepted) + 1
        fixed = script is not None and script.center is not None
        for _ in range(config.max_attempts):
            motion = _draw(rng, config, script, kind, instance_id)
            # explicitly placed instances are taken as scripted, even if they leave the extent
            if fixed or _acceptable(motion, accepted, config):
                accepted.append(motion)
                break
        else:
            raise ConfigurationError(
                f"could not place instance {instance_id} after {config.max_attempts} attempts; "
                "widen the spawn extent or lower n_instances"
            )

    spec = config.label_grid
    pillars = np.array([
        (rng.uniform(spec.x_min, spec.x_max), rng.uniform(spec.y_min, spec.y_max))
        for _ in range(config.n_pillars)
    ]).reshape(-1, 2)
    return SynthPlan(config, tuple(accepted), pillars)


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------

def _fine_labels(plan: SynthPlan, k: int) -> OccupancyGrid:
    config = plan.config
    spec = config.label_grid
    pose = plan.ego_pose(k)
    xs, ys, zs = np.meshgrid(*(axis_centers(spec, a) for a in range(3)), indexing="ij")
    world = pose.apply(np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1))

    labels = np.zeros(spec.size, dtype=np.uint8)
    ground = (world[:, 2] >= config.ground_z - GROUND_THICKNESS) & (world[:, 2] < config.ground_z)
    labels[ground] = SemanticLabel.GSO
    in_band = (world[:, 2] >= config.ground_z) & (world[:, 2] < config.ground_z + PILLAR_HEIGHT)
    for px, py in plan.pillars:
        near = (np.abs(world[:, 0] - px) < PILLAR_HALF_WIDTH) & (np.abs(world[:, 1] - py) < PILLAR_HALF_WIDTH)
        labels[near & in_band] = SemanticLabel.GSO

    to_ego = pose.inverse()
    boxes = [(m.id, m.state_at(k).transformed(to_ego)) for m in plan.motions if m.exists_at(k)]
    _, ids = paint_boxes(boxes, spec)
    labels = labels.reshape(spec.dims)
    labels[ids > 0] = SemanticLabel.GMO
    return OccupancyGrid(spec, labels)


def _cloud(plan: SynthPlan, rng: Lcg64, k: int) -> LabeledPointCloud:
    config = plan.config
    spec = config.label_grid
    points, labels = [], []
    for m in plan.motions:
        if not m.exists_at(k):
            continue
        c, s = math.cos(m.yaw_at(k)), math.sin(m.yaw_at(k))
        center = m.center_at(k)
        for _ in range(config.points_per_box):
            # stay off the faces so every point votes for its own box
            lx, ly, lz = (rng.uniform(-0.45, 0.45) * extent for extent in m.size)
            points.append(center + np.array([c * lx - s * ly, s * lx + c * ly, lz]))
            labels.append(SemanticLabel.GMO)
    for _ in range(config.ground_points):
        points.append(np.array([
            rng.uniform(spec.x_min, spec.x_max),
            rng.uniform(spec.y_min, spec.y_max),
            config.ground_z - GROUND_THICKNESS / 2.0,
        ]))
        labels.append(SemanticLabel.GSO)
    world = np.array(points, dtype=np.float64).reshape(-1, 3)
    return LabeledPointCloud(plan.ego_pose(k).inverse().apply(world), np.array(labels, dtype=np.uint8))


def generate_scene(config: SynthConfig) -> Scene:
    plan = plan_scene(config)
    n = config.n_frames
    tracks = tuple(
        InstanceTrack(m.id, m.category, {k: m.state_at(k) for k in range(m.first, m.last + 1)})
        for m in plan.motions
    )
    fine_labels = {k: _fine_labels(plan, k) for k in range(n)} if config.fine_labels else None
    clouds = None
    if config.clouds:
        # clouds draw from their own stream so toggling them leaves the layout unchanged
        rng = Lcg64(config.seed ^ 0x9E3779B97F4A7C15)
        clouds = {k: _cloud(plan, rng, k) for k in range(n)}
    logger.debug("Generated synthetic scene seed=%s: %d frames, %d instances", config.seed, n, len(tracks))
    return Scene(
        scene_id=f"synth-{config.seed}",
        timestamps=np.arange(n) * plan.dt,
        ego={k: plan.ego_pose(k) for k in range(n)},
        tracks=tracks,
        fine_labels=fine_labels,
        clouds=clouds,
    )


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def analytic_flow(config: SynthConfig, window: SequenceWindow, grid: OccupancyGrid, t: int) -> FlowVolume:
    """Backward flow of ``grid`` (frame t of the window) from the closed-form kinematics.

    Instance membership comes from the grid's ID plane; centers at t-1 are
    evaluated from the scene plan and moved into the present frame.
    """
    if grid.instance_ids is None:
        raise ConfigurationError("analytic flow needs an instance ID plane")
    plan = plan_scene(config)
    k = window.frame_of(t - 1)
    to_present = plan.ego_pose(window.present).inverse()
    lookup = {
        m.id: to_present.apply(m.center_at(k))
        for m in plan.motions
        if 0 <= k < config.n_frames and m.exists_at(k)
    }

    idx = np.argwhere(grid.instance_ids)
    ids = grid.instance_ids[tuple(idx.T)]
    valid_rows = np.array([int(i) in lookup for i in ids], dtype=bool)
    valid = np.zeros(grid.spec.dims, dtype=bool)
    valid[tuple(idx[valid_rows].T)] = True
    targets = np.array([lookup[int(i)] for i in ids[valid_rows]]).reshape(-1, 3)
    return FlowVolume(grid.spec, valid, targets - voxel_centers(idx[valid_rows], grid.spec))


def expected_durations(
    config: SynthConfig,
    n_past: int,
    n_future: int,
    spec: Optional[GridSpec] = None,
    visibility_threshold: float = 0.40,
) -> DurationHistogram:
    """Instance-duration histogram the dataset pipeline must reproduce for this config."""
    plan = plan_scene(config)
    histogram = DurationHistogram()
    for present in range(n_past, config.n_frames - n_future):
        to_present = plan.ego_pose(present).inverse()
        for m in plan.motions:
            lo = max(m.first, present - n_past)
            hi = min(m.last, present + n_future)
            if lo > hi:
                continue
            t_in, t_out = lo - present, hi - present
            if t_in >= 1:
                continue
            if -n_past < t_in and m.visibility_at(lo) < visibility_threshold:
                continue
            if spec is not None:
                centers = to_present.apply(np.stack([m.center_at(k) for k in range(lo, hi + 1)]))
                if not np.all(spec.contains(centers)):
                    continue
            histogram.counts[(t_in, t_out)] += 1
    return histogram
