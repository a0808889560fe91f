"""Benchmark sample construction: voxelized occupancy sequences per task
level, instance-ID planes and 3D backward centripetal flow."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

from occ4d.errors import ConfigurationError, SpecMismatchError
from occ4d.grid import (
    MAX_INSTANCE_ID,
    FlowVolume,
    GridSpec,
    OccupancyGrid,
    OccupancySequence,
    SemanticLabel,
    axis_centers,
    points_to_voxels,
    voxel_centers,
)
from occ4d.scene import BoxState, PreparedWindow, Scene, SequenceWindow, interpolate_scene, prepare_window, split_scene

logger = logging.getLogger("occ4d.dataset")

# Voxel centers within this distance of a box face are snapped onto the face
# before the half-open test, so rounding noise never flips membership.
BOUNDARY_EPS = 1e-9


class TaskMode(str, Enum):
    INFLATED_GMO = "inflated-gmo"
    FINE_GMO = "fine-gmo"
    INFLATED_GMO_GSO = "inflated-gmo-gso"
    FINE_GMO_GSO = "fine-gmo-gso"

    @property
    def code(self) -> int:
        return list(TaskMode).index(self)

    @classmethod
    def from_code(cls, code: int) -> "TaskMode":
        modes = list(cls)
        if not 0 <= code < len(modes):
            raise ValueError(f"unknown task mode code {code}")
        return modes[code]

    @property
    def fine_gmo(self) -> bool:
        return self in (TaskMode.FINE_GMO, TaskMode.FINE_GMO_GSO)

    @property
    def with_gso(self) -> bool:
        return self in (TaskMode.INFLATED_GMO_GSO, TaskMode.FINE_GMO_GSO)

    @property
    def needs_fine_labels(self) -> bool:
        return self.fine_gmo or self.with_gso

    @property
    def classes(self) -> tuple[SemanticLabel, ...]:
        if self.with_gso:
            return (SemanticLabel.GMO, SemanticLabel.GSO)
        return (SemanticLabel.GMO,)


@dataclass(frozen=True)
class DatasetPreset:
    name: str
    dt: float
    modes: tuple[TaskMode, ...]


PRESETS = {
    "nuscenes": DatasetPreset("nuscenes", 0.5, tuple(TaskMode)),
    # Lyft-Level5 ships boxes only, so only the inflated GMO task exists there.
    "lyft": DatasetPreset("lyft", 0.2, (TaskMode.INFLATED_GMO,)),
}


@dataclass(frozen=True, eq=False)
class Sample:
    spec: GridSpec
    mode: TaskMode
    occupancy: OccupancySequence
    flows: tuple[FlowVolume, ...]
    scene_id: str
    present_index: int
    instance_ids: tuple[int, ...]

    def __post_init__(self):
        self.spec.require_match(self.occupancy.spec, what="sample occupancy")
        if len(self.flows) != len(self.occupancy):
            raise SpecMismatchError(
                f"sample has {len(self.flows)} flow frames for {len(self.occupancy)} occupancy frames"
            )
        object.__setattr__(self, "flows", tuple(self.flows))

    @property
    def name(self) -> str:
        return f"{self.scene_id}_{self.present_index:04d}"


# ---------------------------------------------------------------------------
# Box voxelization
# ---------------------------------------------------------------------------

def _box_region(box: BoxState, spec: GridSpec) -> Optional[tuple[tuple[slice, slice, slice], np.ndarray]]:
    """Sub-block of the grid covering the box plus the membership mask inside it."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    half = box.size / 2.0
    extent = np.array([
        abs(c) * half[0] + abs(s) * half[1],
        abs(s) * half[0] + abs(c) * half[1],
        half[2],
    ])
    origin = spec.origin
    dims = np.array(spec.dims)
    lo = np.ceil((box.center - extent - origin) / spec.resolution - 0.5).astype(np.int64) - 1
    hi = np.floor((box.center + extent - origin) / spec.resolution - 0.5).astype(np.int64) + 1
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, dims - 1)
    if np.any(hi < lo):
        return None

    block = tuple(slice(int(a), int(b) + 1) for a, b in zip(lo, hi))
    dx = axis_centers(spec, 0)[block[0]] - box.center[0]
    dy = axis_centers(spec, 1)[block[1]] - box.center[1]
    dz = axis_centers(spec, 2)[block[2]] - box.center[2]

    lx = c * dx[:, None] + s * dy[None, :]
    ly = -s * dx[:, None] + c * dy[None, :]
    in_xy = (
        (lx >= -half[0] - BOUNDARY_EPS) & (lx < half[0] - BOUNDARY_EPS)
        & (ly >= -half[1] - BOUNDARY_EPS) & (ly < half[1] - BOUNDARY_EPS)
    )
    in_z = (dz >= -half[2] - BOUNDARY_EPS) & (dz < half[2] - BOUNDARY_EPS)
    mask = in_xy[:, :, None] & in_z[None, None, :]
    if not mask.any():
        return None
    return block, mask


def voxelize_box(box: BoxState, spec: GridSpec) -> np.ndarray:
    """Indices (K, 3), in linear order, of the voxels whose centers lie in the box."""
    region = _box_region(box, spec)
    if region is None:
        return np.zeros((0, 3), dtype=np.int64)
    block, mask = region
    offset = np.array([sl.start for sl in block], dtype=np.int64)
    return np.argwhere(mask) + offset


def paint_boxes(boxes: Sequence[tuple[int, BoxState]], spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Label and ID planes for a set of (instance id, box) pairs.

    Where boxes overlap the smaller volume wins; equal volumes go to the
    smaller id.
    """
    labels = np.zeros(spec.dims, dtype=np.uint8)
    ids = np.zeros(spec.dims, dtype=np.uint16)
    for instance_id, box in sorted(boxes, key=lambda item: (-item[1].volume, -item[0])):
        if not 1 <= instance_id <= MAX_INSTANCE_ID:
            raise ValueError(f"instance id {instance_id} does not fit the 16-bit ID plane")
        region = _box_region(box, spec)
        if region is None:
            continue
        block, mask = region
        labels[block][mask] = SemanticLabel.GMO
        ids[block][mask] = instance_id
    return labels, ids


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------

def _check_horizons(prepared: PreparedWindow, spec: GridSpec) -> None:
    if (spec.n_past, spec.n_future) != (prepared.n_past, prepared.n_future):
        raise SpecMismatchError(
            f"spec horizons np={spec.n_past} nf={spec.n_future} do not match window "
            f"np={prepared.n_past} nf={prepared.n_future}"
        )


def _require_fine_labels(fine_labels: Optional[Mapping[int, OccupancyGrid]], frames, mode: TaskMode, where: str) -> None:
    missing = [t for t in frames if fine_labels is None or t not in fine_labels]
    if missing:
        raise ConfigurationError(
            f"task {mode.value} requires fine labels, but {where} has none for frames {missing}"
        )


def present_fine_labels(prepared: PreparedWindow, spec: GridSpec) -> list[OccupancyGrid]:
    """Resample each frame's fine labels into the present frame (nearest voxel)."""
    frames = []
    for t in range(prepared.n_future + 1):
        source = prepared.fine_labels[t]
        pose = prepared.ego[t]
        if source.spec.matches(spec, horizons=False) and np.array_equal(pose.matrix, np.eye(4)):
            frames.append(OccupancyGrid(spec, source.labels))
            continue

        to_source = pose.inverse()
        nx, ny, nz = spec.dims
        labels = np.zeros(spec.dims, dtype=np.uint8)
        ys, zs = np.meshgrid(axis_centers(spec, 1), axis_centers(spec, 2), indexing="ij")
        xs = axis_centers(spec, 0)
        # one x slab at a time keeps the temporaries small at full resolution
        for ix in range(nx):
            slab = np.stack([np.full(ys.size, xs[ix]), ys.ravel(), zs.ravel()], axis=1)
            idx, inside = points_to_voxels(to_source.apply(slab), source.spec)
            values = np.zeros(ys.size, dtype=np.uint8)
            values[inside] = source.labels[idx[inside, 0], idx[inside, 1], idx[inside, 2]]
            labels[ix] = values.reshape(ny, nz)
        frames.append(OccupancyGrid(spec, labels))
    return frames


def build_gmo_sequence(
    prepared: PreparedWindow,
    spec: GridSpec,
    mode: TaskMode,
    fine_frames: Optional[Sequence[OccupancyGrid]] = None,
) -> OccupancySequence:
    _check_horizons(prepared, spec)
    if mode.fine_gmo and fine_frames is None:
        _require_fine_labels(prepared.fine_labels, range(prepared.n_future + 1), mode, f"window {prepared.scene_id}@{prepared.present_index}")
        fine_frames = present_fine_labels(prepared, spec)

    frames = []
    for t in range(prepared.n_future + 1):
        boxes = [(track.id, track.states[t]) for track in prepared.tracks if t in track.states]
        labels, ids = paint_boxes(boxes, spec)
        if mode.fine_gmo:
            # fine movable voxels outside every retained box are dropped
            keep = fine_frames[t].gmo_mask() & (ids > 0)
            labels = np.where(keep, np.uint8(SemanticLabel.GMO), np.uint8(SemanticLabel.FREE))
            ids = np.where(keep, ids, np.uint16(0))
        frames.append(OccupancyGrid(spec, labels, ids))
    return OccupancySequence(tuple(frames))


def merge_gso(seq: OccupancySequence, fine_frames: Sequence[OccupancyGrid]) -> OccupancySequence:
    """Overlay fine GSO labels with precedence GMO > GSO > Free."""
    if len(fine_frames) != len(seq):
        raise SpecMismatchError(f"{len(fine_frames)} fine label frames for a {len(seq)}-frame sequence")
    merged = []
    for t, (frame, fine) in enumerate(zip(seq, fine_frames)):
        if fine.spec.dims != frame.spec.dims:
            raise SpecMismatchError(f"frame {t}: fine labels dims {fine.spec.dims} != sequence dims {frame.spec.dims}")
        labels = frame.labels.copy()
        labels[(labels == SemanticLabel.FREE) & fine.mask(SemanticLabel.GSO)] = SemanticLabel.GSO
        merged.append(OccupancyGrid(frame.spec, labels, frame.instance_ids))
    return OccupancySequence(tuple(merged))


# ---------------------------------------------------------------------------
# Flow
# ---------------------------------------------------------------------------

def backward_flow_from_centers(grid: OccupancyGrid, centers: Mapping[int, np.ndarray]) -> FlowVolume:
    """Flow from every instance voxel to its instance's previous center.

    Voxels of instances missing from ``centers`` are invalid.
    """
    if grid.instance_ids is None:
        raise ConfigurationError("backward flow needs an instance ID plane")
    table = np.zeros((MAX_INSTANCE_ID + 1, 3), dtype=np.float64)
    known = np.zeros(MAX_INSTANCE_ID + 1, dtype=bool)
    for instance_id, center in centers.items():
        table[instance_id] = center
        known[instance_id] = True

    idx = np.nonzero(grid.instance_ids)
    instance = grid.instance_ids[idx]
    ok = known[instance]
    chosen = tuple(axis[ok] for axis in idx)
    valid = np.zeros(grid.spec.dims, dtype=bool)
    valid[chosen] = True
    values = table[instance[ok]] - voxel_centers(np.stack(chosen, axis=1), grid.spec)
    return FlowVolume(grid.spec, valid, values)


def generate_backward_flow(prepared: PreparedWindow, seq: OccupancySequence) -> list[FlowVolume]:
    if not seq.has_instances:
        raise ConfigurationError("backward flow needs instance IDs on every frame")
    flows = []
    for t, grid in enumerate(seq):
        previous = {
            track.id: track.states[t - 1].center
            for track in prepared.tracks
            if t - 1 in track.states
        }
        flows.append(backward_flow_from_centers(grid, previous))
    return flows


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------

def build_sample(
    window: SequenceWindow,
    spec: GridSpec,
    mode: TaskMode,
    visibility_threshold: float = 0.40,
) -> Sample:
    if (spec.n_past, spec.n_future) != (window.n_past, window.n_future):
        raise SpecMismatchError(
            f"spec horizons np={spec.n_past} nf={spec.n_future} do not match window "
            f"np={window.n_past} nf={window.n_future}"
        )
    if mode.needs_fine_labels:
        frames = [window.frame_of(t) for t in range(window.n_future + 1)]
        _require_fine_labels(window.scene.fine_labels, frames, mode, f"scene {window.scene.scene_id}")

    prepared = prepare_window(window, spec, visibility_threshold)
    fine_frames = present_fine_labels(prepared, spec) if mode.needs_fine_labels else None
    occupancy = build_gmo_sequence(prepared, spec, mode, fine_frames)
    if mode.with_gso:
        occupancy = merge_gso(occupancy, fine_frames)
    flows = generate_backward_flow(prepared, occupancy)

    logger.debug(
        "Built sample %s@%s: %d instances kept, %d discarded",
        prepared.scene_id, prepared.present_index, len(prepared.tracks), len(prepared.rejected),
    )
    return Sample(
        spec=spec,
        mode=mode,
        occupancy=occupancy,
        flows=tuple(flows),
        scene_id=prepared.scene_id,
        present_index=prepared.present_index,
        instance_ids=tuple(sorted(t.id for t in prepared.tracks)),
    )


def build_samples(
    scene: Scene,
    spec: GridSpec,
    mode: TaskMode,
    visibility_threshold: float = 0.40,
) -> Iterator[Sample]:
    scene = interpolate_scene(scene)
    for window in split_scene(scene, spec.n_past, spec.n_future):
        yield build_sample(window, spec, mode, visibility_threshold)
