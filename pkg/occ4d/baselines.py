"""Non-learned forecasts and ingestion of forecasts produced elsewhere."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from occ4d import formats
from occ4d.dataset import TaskMode, backward_flow_from_centers, paint_boxes
from occ4d.errors import SpecMismatchError
from occ4d.grid import (
    EXTENT_TOLERANCE,
    BevMap,
    FlowVolume,
    GridSpec,
    OccupancyGrid,
    OccupancySequence,
    SemanticLabel,
    axis_centers,
    linear_index,
    points_to_voxels,
)
from occ4d.scene import (
    BoxState,
    LabeledPointCloud,
    SequenceWindow,
    interpolate_track,
    rejection_reason,
    to_present_frame,
    wrap_angle,
)

logger = logging.getLogger("occ4d.baselines")

# Label priority for point-vote ties: GMO beats GSO beats Free.
_TIE_RANK = np.array([0, 2, 1])


@dataclass(frozen=True, eq=False)
class Forecast:
    occupancy: OccupancySequence
    flows: Optional[tuple[FlowVolume, ...]] = None
    method: str = "external"

    def __post_init__(self):
        if self.flows is not None:
            flows = tuple(self.flows)
            if len(flows) != len(self.occupancy):
                raise SpecMismatchError(
                    f"forecast has {len(flows)} flow frames for {len(self.occupancy)} occupancy frames"
                )
            object.__setattr__(self, "flows", flows)

    @property
    def spec(self) -> GridSpec:
        return self.occupancy.spec

    @property
    def n_future(self) -> int:
        return self.occupancy.n_future

    @property
    def has_instances(self) -> bool:
        return self.occupancy.has_instances


# ---------------------------------------------------------------------------
# Static world
# ---------------------------------------------------------------------------

def static_world(present: OccupancyGrid, n_future: int) -> Forecast:
    spec = present.spec.with_horizons(present.spec.n_past, n_future)
    frame = OccupancyGrid(spec, present.labels, present.instance_ids)
    flows = None
    if frame.has_instances:
        # every instance stays where it is, so its flow points at its own centroid
        flows = (_centroid_flow(frame),) * (n_future + 1)
    return Forecast(OccupancySequence((frame,) * (n_future + 1)), flows, "static-world")


def _centroid_flow(grid: OccupancyGrid) -> FlowVolume:
    idx = np.argwhere(grid.instance_ids)
    if idx.size == 0:
        return FlowVolume.empty(grid.spec)
    ids = grid.instance_ids[tuple(idx.T)]
    points = grid.spec.origin + (idx + 0.5) * grid.spec.resolution
    counts = np.bincount(ids)
    sums = np.stack([np.bincount(ids, weights=points[:, axis], minlength=counts.size) for axis in range(3)], axis=1)
    centers = {int(i): sums[i] / counts[i] for i in np.flatnonzero(counts)}
    return backward_flow_from_centers(grid, centers)


# ---------------------------------------------------------------------------
# BEV lifting
# ---------------------------------------------------------------------------

def _height_band(spec: GridSpec, z_ground: float, height: float) -> np.ndarray:
    if height <= 0:
        raise ValueError(f"lifting height must be positive, got {height}")
    zc = axis_centers(spec, 2)
    return (zc >= z_ground - EXTENT_TOLERANCE) & (zc < z_ground + height - EXTENT_TOLERANCE)


def lift_bev(bev: BevMap, spec: GridSpec, z_ground: float = -2.0, height: float = 2.0) -> OccupancyGrid:
    """Replicate occupied BEV cells over the z band [z_ground, z_ground + height)."""
    bev.require_aligned(spec)
    band = _height_band(spec, z_ground, height)
    column = bev.occupancy[:, :, None] & band[None, None, :]
    labels = np.where(column, np.uint8(SemanticLabel.GMO), np.uint8(SemanticLabel.FREE))
    ids = None
    if bev.instance_ids is not None:
        ids = np.where(column, bev.instance_ids[:, :, None], np.uint16(0))
    return OccupancyGrid(spec, labels, ids)


def lift_bev_flow(bev: BevMap, spec: GridSpec, z_ground: float = -2.0, height: float = 2.0) -> FlowVolume:
    """Planar BEV flow duplicated along the lifted column, with zero z motion."""
    if bev.flow is None:
        raise ValueError("BEV map carries no flow plane")
    bev.require_aligned(spec)
    band = _height_band(spec, z_ground, height)
    valid = bev.occupancy[:, :, None] & band[None, None, :]
    vectors = np.zeros((*spec.dims, 3))
    vectors[..., :2] = bev.flow[:, :, None, :]
    vectors[~valid] = 0.0
    return FlowVolume.from_dense(spec, vectors, valid)


def lift_bev_sequence(
    bev_frames: Sequence[BevMap],
    spec: GridSpec,
    z_ground: float = -2.0,
    height: float = 2.0,
    method: str = "bev-lift",
) -> Forecast:
    if len(bev_frames) != spec.n_future + 1:
        raise SpecMismatchError(f"{len(bev_frames)} BEV frames for a spec expecting {spec.n_future + 1}")
    frames = tuple(lift_bev(bev, spec, z_ground, height) for bev in bev_frames)
    flows = None
    if all(bev.flow is not None for bev in bev_frames):
        flows = tuple(lift_bev_flow(bev, spec, z_ground, height) for bev in bev_frames)
    return Forecast(OccupancySequence(frames), flows, method)


# ---------------------------------------------------------------------------
# Labeled point voxelization
# ---------------------------------------------------------------------------

def voxelize_points(cloud: LabeledPointCloud, spec: GridSpec) -> OccupancyGrid:
    """Majority point label per voxel; ties go to GMO, then GSO."""
    idx, inside = points_to_voxels(cloud.points, spec)
    labels = np.zeros(spec.size, dtype=np.uint8)
    if np.any(inside):
        voxel = linear_index(idx[inside], spec)
        label = cloud.labels[inside].astype(np.int64)
        keys, counts = np.unique(voxel * 3 + label, return_counts=True)
        voxel, label = keys // 3, keys % 3
        order = np.lexsort((_TIE_RANK[label], counts, voxel))
        voxel, label = voxel[order], label[order]
        # lexsort puts the winner last within each voxel run
        last = np.append(voxel[1:] != voxel[:-1], True)
        labels[voxel[last]] = label[last]
    return OccupancyGrid(spec, labels)


def voxelize_labeled_points(clouds: Sequence[LabeledPointCloud], spec: GridSpec) -> Forecast:
    if len(clouds) != spec.n_future + 1:
        raise SpecMismatchError(f"{len(clouds)} point clouds for a spec expecting {spec.n_future + 1} frames")
    frames = tuple(voxelize_points(cloud, spec) for cloud in clouds)
    return Forecast(OccupancySequence(frames), None, "point-voxelization")


# ---------------------------------------------------------------------------
# Constant velocity
# ---------------------------------------------------------------------------

def _extrapolate(states: dict[int, BoxState], n_future: int) -> dict[int, BoxState]:
    observed = sorted(states)
    present = states[0]
    if len(observed) < 2:
        return {t: present for t in range(n_future + 1)}
    a, b = observed[-2], observed[-1]
    step = b - a
    velocity = (states[b].center - states[a].center) / step
    yaw_rate = wrap_angle(states[b].yaw - states[a].yaw) / step
    out = {t: states[t] for t in observed}
    for k in range(1, n_future + 1):
        out[k] = BoxState(
            center=present.center + k * velocity,
            size=present.size,
            yaw=wrap_angle(present.yaw + k * yaw_rate),
            visibility=present.visibility,
        )
    return out


def _observed_up_to_present(window: SequenceWindow) -> SequenceWindow:
    """The window's scene with every track cut at the present frame, then gap-filled."""
    tracks = []
    for track in window.scene.tracks:
        past = {k: s for k, s in track.states.items() if k <= window.present}
        if past:
            tracks.append(interpolate_track(track.with_states(past)))
    return replace(window, scene=replace(window.scene, tracks=tuple(tracks)))


def constant_velocity_forecast(
    window: SequenceWindow,
    spec: GridSpec,
    visibility_threshold: float = 0.40,
) -> Forecast:
    """Extrapolate every box observed at t = 0 from its past observations only."""
    prepared = to_present_frame(_observed_up_to_present(window))
    trajectories = {}
    for track in prepared.tracks:
        past = {t: s for t, s in track.states.items() if t <= 0}
        if 0 not in past:
            continue
        if rejection_reason(track.with_states(past), prepared.n_past, spec, visibility_threshold):
            continue
        trajectories[track.id] = _extrapolate(past, prepared.n_future)

    frames, flows = [], []
    for t in range(prepared.n_future + 1):
        boxes = [(instance_id, states[t]) for instance_id, states in trajectories.items()]
        labels, ids = paint_boxes(boxes, spec)
        grid = OccupancyGrid(spec, labels, ids)
        previous = {
            instance_id: states[t - 1].center
            for instance_id, states in trajectories.items()
            if t - 1 in states
        }
        frames.append(grid)
        flows.append(backward_flow_from_centers(grid, previous))
    logger.debug("Constant-velocity forecast for %s@%s: %d instances", prepared.scene_id, prepared.present_index, len(trajectories))
    return Forecast(OccupancySequence(tuple(frames)), tuple(flows), "constant-velocity")


# ---------------------------------------------------------------------------
# Combination and file ingestion
# ---------------------------------------------------------------------------

def combine_forecasts(occupancy_from: Forecast, flow_from: Forecast, method: Optional[str] = None) -> Forecast:
    """Pair one method's occupancy with another method's flow.

    The donor flow replaces the occupancy method's own flow on the GMO voxels
    both forecasts predict. Everywhere else the own flow (if any) is kept.
    """
    if flow_from.flows is None:
        raise ValueError(f"forecast {flow_from.method!r} carries no flow")
    occupancy_from.spec.require_match(flow_from.spec, what="combined forecasts")
    frames = tuple(frame.without_instances() for frame in occupancy_from.occupancy)
    flows = []
    for t, frame in enumerate(frames):
        own_gmo = frame.gmo_mask()
        vectors = np.zeros((*frame.spec.dims, 3), dtype=np.float64)
        valid = np.zeros(frame.spec.dims, dtype=bool)
        if occupancy_from.flows is not None:
            own = occupancy_from.flows[t]
            valid = own.valid & own_gmo
            vectors[valid] = own.vectors()[valid]
        donor = flow_from.flows[t]
        shared = own_gmo & flow_from.occupancy[t].gmo_mask() & donor.valid
        vectors[shared] = donor.vectors()[shared]
        valid |= shared
        flows.append(FlowVolume.from_dense(frame.spec, vectors, valid))
    return Forecast(
        OccupancySequence(frames),
        tuple(flows),
        method or f"{occupancy_from.method}+{flow_from.method}",
    )


def save_forecast(forecast: Forecast, path: str | Path, mode: TaskMode = TaskMode.INFLATED_GMO) -> list[tuple[Path, int]]:
    """Write the forecast as a grid file plus, when it has flow, a sibling flow file."""
    path = Path(path)
    written = [(path, formats.write_grid_file(path, forecast.occupancy, mode))]
    if forecast.flows is not None:
        flow_path = path.with_suffix(".flow")
        written.append((flow_path, formats.write_flow_file(flow_path, forecast.flows, mode)))
    return written


def load_external_forecast(path: str | Path, spec: GridSpec, method: Optional[str] = None) -> Forecast:
    """Read a forecast grid file (and its sibling flow file, if present).

    Np does not shape a forecast, so only the grid and Nf must match; the
    frames are re-stamped with ``spec``.
    """
    path = Path(path)
    grid_file = formats.read_grid_file(path)
    spec.require_match(grid_file.spec, what=f"forecast {path.name}", horizons=False)
    if grid_file.spec.n_future != spec.n_future:
        raise SpecMismatchError(
            f"forecast {path.name} has nf={grid_file.spec.n_future}, evaluation expects nf={spec.n_future}"
        )
    occupancy = OccupancySequence(
        tuple(OccupancyGrid(spec, frame.labels, frame.instance_ids) for frame in grid_file.occupancy)
    )
    flows = None
    flow_path = path.with_suffix(".flow")
    if flow_path.exists():
        flows = formats.read_flow_file(flow_path)
        if not flows[0].spec.matches(spec, horizons=False):
            raise SpecMismatchError(f"flow file {flow_path.name} does not match the evaluation grid")
        flows = tuple(FlowVolume(spec, flow.valid, flow.values) for flow in flows)
    logger.info("Loaded forecast %s (%d frames, flow: %s)", path, len(occupancy), flows is not None)
    return Forecast(occupancy, flows, method or path.stem)
