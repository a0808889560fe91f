"""Flow-based 3D instance prediction.

Instance centers are extracted from the present frame, every GMO voxel is
attached to a center, and IDs are carried into each future frame by
following the backward flow to the previous frame's centers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from occ4d.baselines import Forecast
from occ4d.errors import ConfigurationError, SpecMismatchError
from occ4d.grid import (
    MAX_INSTANCE_ID,
    FlowVolume,
    GridSpec,
    OccupancyGrid,
    OccupancySequence,
    linear_index,
    points_to_voxels,
    voxel_centers,
)

logger = logging.getLogger("occ4d.association")

# 26-connectivity: diagonal neighbours belong to the same blob
CONNECTIVITY = ndimage.generate_binary_structure(3, 3)

# distances closer than this count as ties
TIE_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class InstanceCenters:
    ids: np.ndarray  # (K,)
    positions: np.ndarray  # (K, 3) meters, present frame

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if ids.size != positions.shape[0]:
            raise ValueError(f"{ids.size} center ids for {positions.shape[0]} positions")
        if np.unique(ids).size != ids.size:
            raise ValueError("center ids must be unique within a frame")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "positions", positions)

    @classmethod
    def empty(cls) -> "InstanceCenters":
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 3)))

    def __len__(self) -> int:
        return int(self.ids.size)


# ---------------------------------------------------------------------------
# Center extraction
# ---------------------------------------------------------------------------

def _nms(positions: np.ndarray, scores: np.ndarray, order_key: np.ndarray, radius: float) -> np.ndarray:
    """Greedy suppression in descending score; returns kept candidate indices."""
    order = np.lexsort((order_key, -scores))
    kept: list[int] = []
    for i in order:
        if kept and np.min(np.linalg.norm(positions[kept] - positions[i], axis=1)) <= radius:
            continue
        kept.append(int(i))
    return np.array(kept, dtype=np.int64)


def _blob_maxima(grid: OccupancyGrid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One candidate per connected GMO blob: its highest-density voxel.

    Density ties go to the voxel nearest the blob centroid, then to the
    smallest linear index.
    """
    gmo = grid.gmo_mask()
    density = ndimage.uniform_filter(gmo.astype(np.float64), size=3, mode="constant")
    components, n = ndimage.label(gmo, structure=CONNECTIVITY)
    if n == 0:
        return np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64)

    idx = np.argwhere(gmo)
    comp = components[gmo]
    score = density[gmo]
    positions = voxel_centers(idx, grid.spec)
    lin = linear_index(idx, grid.spec)

    counts = np.bincount(comp, minlength=n + 1)[1:]
    centroids = np.stack(
        [np.bincount(comp, weights=positions[:, a], minlength=n + 1)[1:] / counts for a in range(3)],
        axis=1,
    )
    # uniform_filter sums of 0/1 values carry rounding noise; compare on a grid of 1/27
    score_key = np.round(score * 27.0)
    offset = np.linalg.norm(positions - centroids[comp - 1], axis=1)
    order = np.lexsort((lin, offset, -score_key, comp))
    first = np.ones(order.size, dtype=bool)
    first[1:] = comp[order][1:] != comp[order][:-1]
    pick = order[first]
    return positions[pick], score_key[pick] / 27.0, lin[pick]


def extract_centers(
    source: OccupancyGrid | np.ndarray,
    spec: Optional[GridSpec] = None,
    nms_radius: float = 2.0,
    min_prob: float = 0.5,
) -> InstanceCenters:
    """Present-frame instance centers from a hard grid or a GMO probability volume.

    IDs are assigned 1..K in acceptance order. On a hard grid the score of a
    blob is the GMO fraction of the 3x3x3 neighbourhood around its densest
    voxel, and blobs scoring below ``min_prob`` get no center.
    """
    if isinstance(source, OccupancyGrid):
        positions, scores, lin = _blob_maxima(source)
        dense = scores >= min_prob
        positions, scores, lin = positions[dense], scores[dense], lin[dense]
    else:
        if spec is None:
            raise ValueError("a probability volume needs its grid spec")
        prob = np.asarray(source, dtype=np.float64).reshape(spec.dims)
        peaks = (prob == ndimage.maximum_filter(prob, size=3, mode="constant", cval=-np.inf)) & (prob >= min_prob)
        idx = np.argwhere(peaks)
        positions = voxel_centers(idx, spec)
        scores = prob[peaks]
        lin = linear_index(idx, spec)

    if scores.size == 0:
        return InstanceCenters.empty()
    kept = _nms(positions, scores, lin, nms_radius)
    logger.debug("Extracted %d centers from %d candidates", kept.size, scores.size)
    return InstanceCenters(np.arange(1, kept.size + 1), positions[kept])


# ---------------------------------------------------------------------------
# Association
# ---------------------------------------------------------------------------

def _nearest(tree_points: np.ndarray, tree_ids: np.ndarray, queries: np.ndarray, radius: float = np.inf):
    """Nearest point id per query (0 when none lies within ``radius``).

    Equidistant points resolve to the smaller id.
    """
    out = np.zeros(queries.shape[0], dtype=np.int64)
    if tree_points.shape[0] == 0 or queries.shape[0] == 0:
        return out
    k = min(4, tree_points.shape[0])
    bound = np.nextafter(radius, np.inf) if np.isfinite(radius) else np.inf
    dist, j = cKDTree(tree_points).query(queries, k=k, distance_upper_bound=bound)
    dist = dist.reshape(queries.shape[0], k)
    j = j.reshape(queries.shape[0], k)
    found = np.isfinite(dist[:, 0])
    padded_ids = np.append(tree_ids, np.iinfo(np.int64).max)
    tied = np.isfinite(dist) & (dist <= dist[:, :1] + TIE_TOLERANCE)
    candidate_ids = np.where(tied, padded_ids[j], np.iinfo(np.int64).max)
    out[found] = candidate_ids[found].min(axis=1)
    return out


def _centroids(ids: np.ndarray, spec: GridSpec) -> dict[int, np.ndarray]:
    idx = np.argwhere(ids)
    if idx.size == 0:
        return {}
    values = ids[tuple(idx.T)].astype(np.int64)
    positions = voxel_centers(idx, spec)
    counts = np.bincount(values)
    sums = np.stack([np.bincount(values, weights=positions[:, a], minlength=counts.size) for a in range(3)], axis=1)
    return {int(i): sums[i] / counts[i] for i in np.flatnonzero(counts)}


def _spawn(ids: np.ndarray, unmatched: np.ndarray, next_id: int) -> int:
    """Give each connected group of unmatched voxels a fresh id; returns the next free id."""
    components, n = ndimage.label(unmatched, structure=CONNECTIVITY)
    if n == 0:
        return next_id
    if next_id + n - 1 > MAX_INSTANCE_ID:
        raise ConfigurationError(f"association needs {next_id + n - 1} instance ids, the ID plane holds {MAX_INSTANCE_ID}")
    ids[unmatched] = components[unmatched] + (next_id - 1)
    return next_id + n


def assign_present(grid: OccupancyGrid, centers: InstanceCenters) -> np.ndarray:
    """Frame-0 ID plane: each GMO voxel joins the nearest center of its own blob.

    Blobs holding no center use the nearest center overall; with no centers
    at all every blob becomes its own instance.
    """
    gmo = grid.gmo_mask()
    ids = np.zeros(grid.spec.dims, dtype=np.uint16)
    if not gmo.any():
        return ids
    if len(centers) == 0:
        _spawn(ids, gmo, 1)
        return ids

    components, _ = ndimage.label(gmo, structure=CONNECTIVITY)
    center_idx, inside = points_to_voxels(centers.positions, grid.spec)
    center_comp = np.where(inside, components[tuple(center_idx.T)], 0)

    idx = np.argwhere(gmo)
    comp = components[gmo]
    positions = voxel_centers(idx, grid.spec)
    assigned = np.zeros(idx.shape[0], dtype=np.int64)
    for c in np.unique(comp):
        members = comp == c
        own = center_comp == c
        pool = own if own.any() else np.ones(len(centers), dtype=bool)
        assigned[members] = _nearest(centers.positions[pool], centers.ids[pool], positions[members])
    ids[tuple(idx.T)] = assigned
    return ids


def associate_via_flow(
    frames: Sequence[OccupancyGrid],
    flows: Sequence[Optional[FlowVolume]],
    centers: InstanceCenters,
    assoc_radius: float = 2.0,
) -> list[np.ndarray]:
    """ID planes for frames 0..Nf.

    Frame t >= 1 follows each voxel's flow to the frame t-1 centers; voxels
    without a center within ``assoc_radius`` (or without valid flow) spawn a
    fresh id per connected group. Centers are re-estimated as centroids.
    """
    if len(flows) != len(frames):
        raise SpecMismatchError(f"{len(flows)} flow frames for {len(frames)} occupancy frames")
    spec = frames[0].spec
    planes = [assign_present(frames[0], centers)]
    previous = _centroids(planes[0], spec)
    next_id = max(previous, default=0) + 1

    for t in range(1, len(frames)):
        grid, flow = frames[t], flows[t]
        if flow is None:
            raise ConfigurationError(f"association needs flow for frame {t}")
        spec.require_match(flow.spec, what=f"flow frame {t}", horizons=False)

        gmo = grid.gmo_mask()
        idx = np.argwhere(gmo)
        lin = linear_index(idx, spec)
        flow_lin = linear_index(flow.valid_indices(), spec)
        slot = np.searchsorted(flow_lin, lin)
        slot_ok = slot < flow_lin.size
        has_flow = np.zeros(lin.size, dtype=bool)
        has_flow[slot_ok] = flow_lin[slot[slot_ok]] == lin[slot_ok]

        matched = np.zeros(lin.size, dtype=np.int64)
        if previous and has_flow.any():
            targets = voxel_centers(idx[has_flow], spec) + flow.values[slot[has_flow]]
            prev_ids = np.array(list(previous), dtype=np.int64)
            prev_pos = np.stack([previous[i] for i in prev_ids])
            matched[has_flow] = _nearest(prev_pos, prev_ids, targets, assoc_radius)

        ids = np.zeros(spec.dims, dtype=np.uint16)
        ids[tuple(idx.T)] = matched
        unmatched = np.zeros(spec.dims, dtype=bool)
        unmatched[tuple(idx[matched == 0].T)] = True
        next_id = _spawn(ids, unmatched, next_id)

        planes.append(ids)
        previous = _centroids(ids, spec)
    return planes


def predict_instances(
    forecast: Forecast,
    nms_radius: float = 2.0,
    min_prob: float = 0.5,
    assoc_radius: float = 2.0,
    probabilities: Optional[np.ndarray] = None,
) -> Forecast:
    """Attach ID planes to a forecast that only carries occupancy and flow."""
    if forecast.flows is None:
        raise ConfigurationError(f"forecast {forecast.method!r} has no flow to associate instances with")
    present = forecast.occupancy.present
    if probabilities is not None:
        centers = extract_centers(probabilities, present.spec, nms_radius, min_prob)
    else:
        centers = extract_centers(present, nms_radius=nms_radius, min_prob=min_prob)
    planes = associate_via_flow(list(forecast.occupancy), forecast.flows, centers, assoc_radius)
    frames = tuple(OccupancyGrid(grid.spec, grid.labels, ids) for grid, ids in zip(forecast.occupancy, planes))
    return Forecast(OccupancySequence(frames), forecast.flows, forecast.method)
