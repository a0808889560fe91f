"""Scene data model and sequence preparation.

Scenes hold world-frame instance tracks and ego poses. Preparing a window
splits a scene into fixed-length sequences, re-expresses everything in the
ego frame of the present frame (t = 0), fills annotation gaps under a constant
velocity assumption and discards instances that would corrupt supervision.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional

import numpy as np
from pyquaternion import Quaternion

from occ4d.errors import ConstructionError
from occ4d.grid import GridSpec, OccupancyGrid, SemanticLabel

logger = logging.getLogger("occ4d.scene")

QUATERNION_TOLERANCE = 1e-9

CATEGORIES = (
    "bicycle",
    "bus",
    "car",
    "construction",
    "motorcycle",
    "trailer",
    "truck",
    "pedestrian",
)


def wrap_angle(angle: float) -> float:
    """Map an angle to [-pi, pi)."""
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform from a child frame to the world (or a parent) frame."""

    rotation: Quaternion
    translation: np.ndarray

    def __post_init__(self):
        rotation = self.rotation
        if not isinstance(rotation, Quaternion):
            rotation = Quaternion(*np.asarray(rotation, dtype=np.float64))
        if abs(rotation.norm - 1.0) > QUATERNION_TOLERANCE:
            raise ValueError(f"rotation quaternion norm {rotation.norm!r} is not 1")
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)
        object.__setattr__(self, "_rot", rotation.rotation_matrix)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(Quaternion(), np.zeros(3))

    @property
    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self._rot
        out[:3, 3] = self.translation
        return out

    def inverse(self) -> "Pose":
        return Pose(self.rotation.inverse, -self._rot.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply ``other`` first, then ``self``."""
        return Pose(self.rotation * other.rotation, self._rot @ other.translation + self.translation)

    @staticmethod
    def between(reference: "Pose", other: "Pose") -> "Pose":
        """Transform from ``other``'s child frame into ``reference``'s child frame."""
        return reference.inverse().compose(other)

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self._rot.T + self.translation

    def transform_yaw(self, yaw: float) -> float:
        heading = self._rot @ np.array([math.cos(yaw), math.sin(yaw), 0.0])
        return math.atan2(heading[1], heading[0])


@dataclass(frozen=True, eq=False)
class BoxState:
    center: np.ndarray
    size: np.ndarray  # length, width, height
    yaw: float
    visibility: float = 1.0

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if np.any(size <= 0):
            raise ValueError(f"box size must be positive, got {size.tolist()}")
        if not 0.0 <= self.visibility <= 1.0:
            raise ValueError(f"visibility must lie in [0, 1], got {self.visibility}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", float(self.yaw))
        object.__setattr__(self, "visibility", float(self.visibility))

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def transformed(self, pose: Pose) -> "BoxState":
        return BoxState(pose.apply(self.center), self.size, pose.transform_yaw(self.yaw), self.visibility)


# ---------------------------------------------------------------------------
# Scene containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class InstanceTrack:
    id: int
    category: str
    states: Mapping[int, BoxState]

    def __post_init__(self):
        if self.id < 1:
            raise ValueError(f"instance id must be positive, got {self.id}")
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if not self.states:
            raise ValueError(f"instance {self.id} has no states")
        object.__setattr__(self, "states", dict(sorted(self.states.items())))

    @property
    def frames(self) -> list[int]:
        return list(self.states)

    @property
    def t_in(self) -> int:
        return next(iter(self.states))

    @property
    def t_out(self) -> int:
        return next(reversed(self.states))

    def state_at(self, t: int) -> Optional[BoxState]:
        return self.states.get(t)

    def is_contiguous(self) -> bool:
        return len(self.states) == self.t_out - self.t_in + 1

    def with_states(self, states: Mapping[int, BoxState]) -> "InstanceTrack":
        return InstanceTrack(self.id, self.category, states)


@dataclass(frozen=True, eq=False)
class LabeledPointCloud:
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        if points.shape[0] != labels.shape[0]:
            raise ValueError(f"{points.shape[0]} points but {labels.shape[0]} labels")
        if labels.size and labels.max() > SemanticLabel.GSO:
            raise ValueError(f"unknown semantic label {int(labels.max())}")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.points.shape[0]

    def transformed(self, pose: Pose) -> "LabeledPointCloud":
        return LabeledPointCloud(pose.apply(self.points), self.labels)


@dataclass(frozen=True, eq=False)
class Scene:
    """Timestamped scene: ego poses (ego -> world), world-frame tracks and
    optional per-frame fine label volumes / labeled clouds in ego coordinates."""

    scene_id: str
    timestamps: np.ndarray
    ego: Mapping[int, Pose]
    tracks: tuple[InstanceTrack, ...] = ()
    fine_labels: Optional[Mapping[int, OccupancyGrid]] = None
    clouds: Optional[Mapping[int, LabeledPointCloud]] = None

    def __post_init__(self):
        timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        if timestamps.size > 1 and np.any(np.diff(timestamps) <= 0):
            raise ConstructionError(f"scene {self.scene_id}: frame timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", timestamps)
        object.__setattr__(self, "tracks", tuple(self.tracks))
        n = timestamps.size
        for track in self.tracks:
            if track.t_in < 0 or track.t_out >= n:
                raise ConstructionError(
                    f"scene {self.scene_id}: instance {track.id} references frames "
                    f"[{track.t_in}, {track.t_out}] outside [0, {n})"
                )

    @property
    def n_frames(self) -> int:
        return int(self.timestamps.size)

    def validate(self) -> "Scene":
        """Full consistency check run by loaders: every frame needs an ego pose."""
        missing = [f for f in range(self.n_frames) if f not in self.ego]
        if missing:
            raise ConstructionError(f"scene {self.scene_id}: no ego pose for frames {missing}")
        return self


@dataclass(frozen=True, eq=False)
class SequenceWindow:
    scene: Scene
    present: int
    n_past: int
    n_future: int

    def __post_init__(self):
        if self.present - self.n_past < 0 or self.present + self.n_future > self.scene.n_frames - 1:
            raise ConstructionError(
                f"window at present={self.present} (np={self.n_past}, nf={self.n_future}) "
                f"does not fit scene {self.scene.scene_id} with {self.scene.n_frames} frames"
            )

    @property
    def relative_frames(self) -> range:
        return range(-self.n_past, self.n_future + 1)

    def frame_of(self, t: int) -> int:
        return self.present + t


@dataclass(frozen=True, eq=False)
class PreparedWindow:
    """Window contents expressed in the present ego frame, keyed by relative
    time t in [-Np, Nf]. ``ego[t]`` maps frame-t ego coordinates into the
    present frame; fine label volumes stay in their own ego coordinates."""

    scene_id: str
    present_index: int
    n_past: int
    n_future: int
    tracks: tuple[InstanceTrack, ...]
    ego: Mapping[int, Pose]
    clouds: Optional[Mapping[int, LabeledPointCloud]] = None
    fine_labels: Optional[Mapping[int, OccupancyGrid]] = None
    rejected: Mapping[int, str] = field(default_factory=dict)

    @property
    def relative_frames(self) -> range:
        return range(-self.n_past, self.n_future + 1)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def split_scene(scene: Scene, n_past: int, n_future: int) -> list[SequenceWindow]:
    first = n_past
    last = scene.n_frames - 1 - n_future
    return [SequenceWindow(scene, p, n_past, n_future) for p in range(first, last + 1)]


def to_present_frame(window: SequenceWindow) -> PreparedWindow:
    scene = window.scene
    poses = {}
    for t in window.relative_frames:
        frame = window.frame_of(t)
        if frame not in scene.ego:
            raise ConstructionError(f"scene {scene.scene_id}: no ego pose for frame {frame}")
        poses[t] = scene.ego[frame]

    world_to_present = poses[0].inverse()
    ego = {t: world_to_present.compose(pose) for t, pose in poses.items()}
    ego[0] = Pose.identity()

    tracks = []
    for track in scene.tracks:
        states = {
            t: state.transformed(world_to_present)
            for t in window.relative_frames
            if (state := track.state_at(window.frame_of(t))) is not None
        }
        if states:
            tracks.append(track.with_states(states))

    clouds = None
    if scene.clouds is not None:
        clouds = {
            t: scene.clouds[window.frame_of(t)].transformed(ego[t])
            for t in window.relative_frames
            if window.frame_of(t) in scene.clouds
        }

    fine_labels = None
    if scene.fine_labels is not None:
        fine_labels = {
            t: scene.fine_labels[window.frame_of(t)]
            for t in window.relative_frames
            if window.frame_of(t) in scene.fine_labels
        }

    return PreparedWindow(
        scene_id=scene.scene_id,
        present_index=window.present,
        n_past=window.n_past,
        n_future=window.n_future,
        tracks=tuple(tracks),
        ego=ego,
        clouds=clouds,
        fine_labels=fine_labels,
    )


def interpolate_track(track: InstanceTrack) -> InstanceTrack:
    """Fill annotation gaps with constant-velocity centers and shortest-path yaw."""
    if track.is_contiguous():
        return track
    states = dict(track.states)
    keys = track.frames
    for a, b in zip(keys, keys[1:]):
        if b - a < 2:
            continue
        sa, sb = states[a], states[b]
        dyaw = wrap_angle(sb.yaw - sa.yaw)
        visibility = min(sa.visibility, sb.visibility)
        for t in range(a + 1, b):
            s = (t - a) / (b - a)
            states[t] = BoxState(
                center=sa.center + s * (sb.center - sa.center),
                size=sa.size,
                yaw=wrap_angle(sa.yaw + s * dyaw),
                visibility=visibility,
            )
    return track.with_states(states)


def interpolate_scene(scene: Scene) -> Scene:
    return replace(scene, tracks=tuple(interpolate_track(t) for t in scene.tracks))


def rejection_reason(
    track: InstanceTrack,
    n_past: int,
    spec: GridSpec,
    visibility_threshold: float = 0.40,
) -> Optional[str]:
    """Name of the first discard rule a (present-frame) track triggers, or None."""
    first = track.t_in
    if first >= 1:
        return "first-appears-in-future"
    if -n_past < first <= 0 and track.states[first].visibility < visibility_threshold:
        return "low-visibility-on-appearance"
    centers = np.stack([s.center for s in track.states.values()])
    if not np.all(spec.contains(centers)):
        return "leaves-range"
    return None


def filter_invalid_tracks(
    window: PreparedWindow,
    spec: GridSpec,
    visibility_threshold: float = 0.40,
) -> list[InstanceTrack]:
    retained = []
    for track in window.tracks:
        reason = rejection_reason(track, window.n_past, spec, visibility_threshold)
        if reason is None:
            retained.append(track)
        else:
            logger.debug(
                "Discarded instance %s in %s@%s: %s",
                track.id, window.scene_id, window.present_index, reason,
            )
    return retained


def prepare_window(
    window: SequenceWindow,
    spec: GridSpec,
    visibility_threshold: float = 0.40,
) -> PreparedWindow:
    """Interpolation, present-frame re-referencing and filtering in one step."""
    scene = interpolate_scene(window.scene)
    prepared = to_present_frame(replace(window, scene=scene))
    retained = filter_invalid_tracks(prepared, spec, visibility_threshold)
    kept = {t.id for t in retained}
    rejected = {
        t.id: rejection_reason(t, prepared.n_past, spec, visibility_threshold)
        for t in prepared.tracks
        if t.id not in kept
    }
    return replace(prepared, tracks=tuple(retained), rejected=rejected)


@dataclass
class DurationHistogram:
    counts: Counter = field(default_factory=Counter)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def fractions(self) -> dict[tuple[int, int], float]:
        total = self.total
        return {key: n / total for key, n in sorted(self.counts.items())} if total else {}

    def __iadd__(self, other: "DurationHistogram") -> "DurationHistogram":
        self.counts.update(other.counts)
        return self


def instance_duration_stats(windows: Iterable[PreparedWindow]) -> DurationHistogram:
    histogram = DurationHistogram()
    for window in windows:
        for track in window.tracks:
            histogram.counts[(track.t_in, track.t_out)] += 1
    return histogram
