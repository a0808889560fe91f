"""Voxel grid primitives: spec, labels, instance planes, flow volumes."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from occ4d.errors import SpecMismatchError

EXTENT_TOLERANCE = 1e-9
MAX_INSTANCE_ID = np.iinfo(np.uint16).max


class SemanticLabel(IntEnum):
    FREE = 0
    GMO = 1
    GSO = 2


class VoxelIndex(NamedTuple):
    ix: int
    iy: int
    iz: int


class GridSpec(BaseModel):
    """Spatial extent, resolution and temporal horizons of every volume.

    Memory layout of all dense volumes is C order over (nx, ny, nz), so the
    linear index of (ix, iy, iz) is (ix * ny + iy) * nz + iz.
    """

    model_config = ConfigDict(frozen=True)

    x_min: float = -51.2
    x_max: float = 51.2
    y_min: float = -51.2
    y_max: float = 51.2
    z_min: float = -5.0
    z_max: float = 3.0
    resolution: float = Field(default=0.2, gt=0)
    n_past: int = Field(default=2, ge=0)
    n_future: int = Field(default=4, ge=0)

    @model_validator(mode="after")
    def validate_extent(self) -> "GridSpec":
        for axis, lo, hi in zip("xyz", self.mins, self.maxs):
            cells = (hi - lo) / self.resolution
            if hi <= lo or round(cells) < 1:
                raise ValueError(f"{axis} extent [{lo}, {hi}) must span at least one voxel")
            if abs(cells - round(cells)) * self.resolution > EXTENT_TOLERANCE:
                raise ValueError(
                    f"{axis} extent length {hi - lo} is not a multiple of resolution {self.resolution}"
                )
        return self

    @classmethod
    def from_origin(
        cls,
        origin: Sequence[float],
        resolution: float,
        dims: Sequence[int],
        n_past: int = 0,
        n_future: int = 0,
    ) -> "GridSpec":
        x0, y0, z0 = (float(v) for v in origin)
        nx, ny, nz = (int(v) for v in dims)
        return cls(
            x_min=x0, x_max=x0 + nx * resolution,
            y_min=y0, y_max=y0 + ny * resolution,
            z_min=z0, z_max=z0 + nz * resolution,
            resolution=resolution, n_past=n_past, n_future=n_future,
        )

    @property
    def mins(self) -> tuple[float, float, float]:
        return (self.x_min, self.y_min, self.z_min)

    @property
    def maxs(self) -> tuple[float, float, float]:
        return (self.x_max, self.y_max, self.z_max)

    @property
    def origin(self) -> np.ndarray:
        return np.array(self.mins, dtype=np.float64)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(
            int(round((hi - lo) / self.resolution)) for lo, hi in zip(self.mins, self.maxs)
        )

    @property
    def size(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def n_frames(self) -> int:
        """Window length N = Np + Nf + 1."""
        return self.n_past + self.n_future + 1

    @property
    def extent_diagonal(self) -> float:
        return float(np.linalg.norm(np.subtract(self.maxs, self.mins)))

    def with_horizons(self, n_past: int, n_future: int) -> "GridSpec":
        return self.model_copy(update={"n_past": n_past, "n_future": n_future})

    def matches(self, other: "GridSpec", horizons: bool = True) -> bool:
        """Exact comparison of origin, resolution and dims (maxima are derived)."""
        same = (
            self.mins == other.mins
            and self.resolution == other.resolution
            and self.dims == other.dims
        )
        if horizons:
            same = same and (self.n_past, self.n_future) == (other.n_past, other.n_future)
        return same

    def require_match(self, other: "GridSpec", what: str = "grid", horizons: bool = True) -> None:
        if not self.matches(other, horizons=horizons):
            raise SpecMismatchError(
                f"{what} spec mismatch: expected origin={self.mins} res={self.resolution} "
                f"dims={self.dims} np={self.n_past} nf={self.n_future}, found origin={other.mins} "
                f"res={other.resolution} dims={other.dims} np={other.n_past} nf={other.n_future}"
            )

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Half-open extent test for an (..., 3) array of points."""
        p = np.asarray(points, dtype=np.float64)
        return np.all((p >= self.origin) & (p < np.array(self.maxs)), axis=-1)


# ---------------------------------------------------------------------------
# Coordinate conversion
# ---------------------------------------------------------------------------

def points_to_voxels(points: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised world_to_voxel.

    Returns an (N, 3) int64 index array and an (N,) mask of in-extent points.
    Indices of out-of-extent points are clipped and must be ignored.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inside = spec.contains(p)
    idx = np.floor((p - spec.origin) / spec.resolution).astype(np.int64)
    # floor can land on n for points a rounding error below the upper face
    np.clip(idx, 0, np.array(spec.dims) - 1, out=idx)
    return idx, inside


def world_to_voxel(p: Sequence[float], spec: GridSpec) -> Optional[VoxelIndex]:
    idx, inside = points_to_voxels(np.asarray(p, dtype=np.float64), spec)
    if not inside[0]:
        return None
    return VoxelIndex(*(int(v) for v in idx[0]))


def voxel_center(idx: Sequence[int], spec: GridSpec) -> np.ndarray:
    ix, iy, iz = (int(v) for v in idx)
    for axis, value, n in zip("xyz", (ix, iy, iz), spec.dims):
        if not 0 <= value < n:
            raise IndexError(f"voxel index {axis}={value} outside [0, {n})")
    return spec.origin + (np.array([ix, iy, iz], dtype=np.float64) + 0.5) * spec.resolution


def voxel_centers(indices: np.ndarray, spec: GridSpec) -> np.ndarray:
    return spec.origin + (np.asarray(indices, dtype=np.float64) + 0.5) * spec.resolution


def axis_centers(spec: GridSpec, axis: int) -> np.ndarray:
    return spec.mins[axis] + (np.arange(spec.dims[axis], dtype=np.float64) + 0.5) * spec.resolution


def linear_index(indices: np.ndarray, spec: GridSpec) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    return np.ravel_multi_index((idx[:, 0], idx[:, 1], idx[:, 2]), spec.dims)


# ---------------------------------------------------------------------------
# Volumes
# ---------------------------------------------------------------------------

def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    spec: GridSpec
    labels: np.ndarray
    instance_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        dims = self.spec.dims
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if labels.size != self.spec.size:
            raise SpecMismatchError(
                f"label volume has {labels.size} voxels, spec requires {self.spec.size}"
            )
        labels = labels.reshape(dims)
        if labels.size and labels.max() > SemanticLabel.GSO:
            raise ValueError(f"unknown semantic label {int(labels.max())}")
        object.__setattr__(self, "labels", _frozen(labels))

        if self.instance_ids is not None:
            ids = np.ascontiguousarray(self.instance_ids, dtype=np.uint16)
            if ids.size != self.spec.size:
                raise SpecMismatchError(
                    f"instance plane has {ids.size} voxels, spec requires {self.spec.size}"
                )
            ids = ids.reshape(dims)
            if np.any(ids[labels != SemanticLabel.GMO]):
                raise ValueError("instance ids are only allowed on GMO voxels")
            object.__setattr__(self, "instance_ids", _frozen(ids))

    @classmethod
    def empty(cls, spec: GridSpec, with_ids: bool = False) -> "OccupancyGrid":
        ids = np.zeros(spec.dims, dtype=np.uint16) if with_ids else None
        return cls(spec, np.zeros(spec.dims, dtype=np.uint8), ids)

    @property
    def has_instances(self) -> bool:
        return self.instance_ids is not None

    def mask(self, label: SemanticLabel) -> np.ndarray:
        return self.labels == label

    def gmo_mask(self) -> np.ndarray:
        return self.mask(SemanticLabel.GMO)

    def without_instances(self) -> "OccupancyGrid":
        return OccupancyGrid(self.spec, self.labels)

    def equals(self, other: "OccupancyGrid") -> bool:
        if not self.spec.matches(other.spec, horizons=False):
            return False
        if not np.array_equal(self.labels, other.labels):
            return False
        if (self.instance_ids is None) != (other.instance_ids is None):
            return False
        return self.instance_ids is None or np.array_equal(self.instance_ids, other.instance_ids)


def count_label(grid: OccupancyGrid, label: SemanticLabel) -> int:
    return int(np.count_nonzero(grid.mask(label)))


@dataclass(frozen=True, eq=False)
class OccupancySequence:
    """Frames 0..Nf (0 = present), all in the present ego frame."""

    frames: tuple[OccupancyGrid, ...]

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise SpecMismatchError("occupancy sequence has no frames")
        spec = frames[0].spec
        if len(frames) != spec.n_future + 1:
            raise SpecMismatchError(
                f"occupancy sequence has {len(frames)} frames, spec requires {spec.n_future + 1}"
            )
        for t, frame in enumerate(frames[1:], start=1):
            spec.require_match(frame.spec, what=f"frame {t}")
        object.__setattr__(self, "frames", frames)

    @property
    def spec(self) -> GridSpec:
        return self.frames[0].spec

    @property
    def n_future(self) -> int:
        return len(self.frames) - 1

    @property
    def present(self) -> OccupancyGrid:
        return self.frames[0]

    @property
    def has_instances(self) -> bool:
        return all(f.has_instances for f in self.frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, t: int) -> OccupancyGrid:
        return self.frames[t]

    def __iter__(self):
        return iter(self.frames)

    def equals(self, other: "OccupancySequence") -> bool:
        return len(self) == len(other) and all(a.equals(b) for a, b in zip(self, other))


@dataclass(frozen=True, eq=False)
class FlowVolume:
    """Per-voxel backward flow (meters) with a validity mask.

    The dense view is produced by ``vectors()``; ``values`` holds the vectors
    of the valid voxels in linear order, invalid voxels being zero.
    """

    spec: GridSpec
    valid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        valid = np.ascontiguousarray(self.valid, dtype=bool)
        if valid.size != self.spec.size:
            raise SpecMismatchError(
                f"flow mask has {valid.size} voxels, spec requires {self.spec.size}"
            )
        valid = valid.reshape(self.spec.dims)
        values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1, 3)
        n_valid = int(np.count_nonzero(valid))
        if values.shape[0] != n_valid:
            raise SpecMismatchError(f"flow carries {values.shape[0]} vectors for {n_valid} valid voxels")
        if n_valid and np.linalg.norm(values, axis=1).max() > self.spec.extent_diagonal + EXTENT_TOLERANCE:
            raise ValueError("flow vector longer than the grid diagonal")
        object.__setattr__(self, "valid", _frozen(valid))
        object.__setattr__(self, "values", _frozen(values))

    @classmethod
    def empty(cls, spec: GridSpec) -> "FlowVolume":
        return cls(spec, np.zeros(spec.dims, dtype=bool), np.zeros((0, 3)))

    @classmethod
    def from_dense(cls, spec: GridSpec, vectors: np.ndarray, valid: np.ndarray) -> "FlowVolume":
        vectors = np.asarray(vectors, dtype=np.float64).reshape(*spec.dims, 3)
        valid = np.asarray(valid, dtype=bool).reshape(spec.dims)
        if np.any(vectors[~valid]):
            raise ValueError("invalid flow voxels must carry the zero vector")
        return cls(spec, valid, vectors[valid])

    def vectors(self) -> np.ndarray:
        dense = np.zeros((*self.spec.dims, 3), dtype=np.float64)
        dense[self.valid] = self.values
        return dense

    def valid_indices(self) -> np.ndarray:
        return np.argwhere(self.valid)

    def targets(self) -> np.ndarray:
        """Flow endpoints (voxel center + vector) of the valid voxels."""
        return voxel_centers(self.valid_indices(), self.spec) + self.values

    def equals(self, other: "FlowVolume") -> bool:
        return (
            self.spec.matches(other.spec, horizons=False)
            and np.array_equal(self.valid, other.valid)
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class BevMap:
    """Bird's-eye-view occupancy on an (nx, ny) cell raster.

    ``flow`` holds planar backward flow (meters) per cell; it is only
    meaningful where ``occupancy`` is set.
    """

    x_min: float
    y_min: float
    resolution: float
    occupancy: np.ndarray
    instance_ids: Optional[np.ndarray] = None
    flow: Optional[np.ndarray] = None

    def __post_init__(self):
        occupancy = np.ascontiguousarray(self.occupancy, dtype=bool)
        if occupancy.ndim != 2:
            raise SpecMismatchError(f"BEV map must be 2D, got shape {occupancy.shape}")
        object.__setattr__(self, "occupancy", _frozen(occupancy))
        if self.instance_ids is not None:
            ids = np.ascontiguousarray(self.instance_ids, dtype=np.uint16)
            if ids.shape != occupancy.shape:
                raise SpecMismatchError(f"BEV id plane shape {ids.shape} != {occupancy.shape}")
            if np.any(ids[~occupancy]):
                raise ValueError("BEV instance ids are only allowed on occupied cells")
            object.__setattr__(self, "instance_ids", _frozen(ids))
        if self.flow is not None:
            flow = np.ascontiguousarray(self.flow, dtype=np.float64)
            if flow.shape != (*occupancy.shape, 2):
                raise SpecMismatchError(f"BEV flow shape {flow.shape} != {(*occupancy.shape, 2)}")
            object.__setattr__(self, "flow", _frozen(flow))

    @property
    def dims(self) -> tuple[int, int]:
        return self.occupancy.shape

    def require_aligned(self, spec: GridSpec) -> None:
        """The raster must share the spec's x-y origin, resolution and cell counts."""
        if abs(self.resolution - spec.resolution) > EXTENT_TOLERANCE:
            raise SpecMismatchError(
                f"BEV resolution {self.resolution} != grid resolution {spec.resolution}"
            )
        if (
            abs(self.x_min - spec.x_min) > EXTENT_TOLERANCE
            or abs(self.y_min - spec.y_min) > EXTENT_TOLERANCE
            or self.dims != spec.dims[:2]
        ):
            raise SpecMismatchError(
                f"BEV raster origin ({self.x_min}, {self.y_min}) dims {self.dims} does not match "
                f"grid origin ({spec.x_min}, {spec.y_min}) dims {spec.dims[:2]}"
            )
