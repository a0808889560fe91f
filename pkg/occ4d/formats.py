"""On-disk formats.

Binary volumes are little-endian with a fixed header (see FORMATS_README.md).
Payloads are dense; index order is (ix * ny + iy) * nz + iz. Every reader
checks magic, version and exact payload length before touching the data.
"""

from __future__ import annotations

import csv
import logging
import struct
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np
from pydantic import ValidationError
from pyquaternion import Quaternion

from occ4d.dataset import Sample, TaskMode
from occ4d.errors import FormatError, SpecMismatchError
from occ4d.grid import (
    BevMap,
    FlowVolume,
    GridSpec,
    OccupancyGrid,
    OccupancySequence,
    SemanticLabel,
    voxel_centers,
)
from occ4d.scene import BoxState, InstanceTrack, LabeledPointCloud, Pose, Scene
from occ4d.schemas import (
    BoxStateEntry,
    EgoPoseEntry,
    EvalReport,
    InstanceEntry,
    SampleMeta,
    SceneDocument,
)

logger = logging.getLogger("occ4d.formats")

FORMAT_VERSION = 1

GRID_MAGIC = b"C4DO"
FLOW_MAGIC = b"C4DF"
BEV_MAGIC = b"C4DB"
POINT_MAGIC = b"C4DP"

# magic, version, mode, Np, Nf, nx, ny, nz, x_min, y_min, z_min, resolution, flags
HEADER = struct.Struct("<4sIBBBIIIddddI")
POINT_HEADER = struct.Struct("<4sIQ")

FLAG_INSTANCE_IDS = 1
FLAG_BEV_FLOW = 2

# byte offsets of header fields, used in rejection messages
_OFFSET_VERSION = 4
_OFFSET_MODE = 8
_OFFSET_DIMS = 11
_OFFSET_FLAGS = HEADER.size - 4


class GridHeader(NamedTuple):
    mode: TaskMode
    n_past: int
    n_future: int
    dims: tuple[int, int, int]
    origin: tuple[float, float, float]
    resolution: float
    flags: int

    @property
    def n_frames(self) -> int:
        return self.n_future + 1

    def spec(self) -> GridSpec:
        return GridSpec.from_origin(self.origin, self.resolution, self.dims, self.n_past, self.n_future)


class GridFile(NamedTuple):
    mode: TaskMode
    occupancy: OccupancySequence

    @property
    def spec(self) -> GridSpec:
        return self.occupancy.spec


# ---------------------------------------------------------------------------
# Header codec
# ---------------------------------------------------------------------------

def _pack_header(magic: bytes, mode: TaskMode, spec: GridSpec, n_future: int, flags: int, dims=None) -> bytes:
    nx, ny, nz = dims or spec.dims
    return HEADER.pack(
        magic, FORMAT_VERSION, mode.code, spec.n_past, n_future,
        nx, ny, nz, spec.x_min, spec.y_min, spec.z_min, spec.resolution, flags,
    )


def _parse_header(data: bytes, magic: bytes, path: Path) -> GridHeader:
    if len(data) < HEADER.size:
        raise FormatError(f"{path}: file is {len(data)} bytes, the header alone needs {HEADER.size}")
    (
        found_magic, version, mode_code, n_past, n_future,
        nx, ny, nz, x_min, y_min, z_min, resolution, flags,
    ) = HEADER.unpack_from(data, 0)
    if found_magic != magic:
        raise FormatError(f"{path}: offset 0: expected magic {magic.decode()!r}, found {found_magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(
            f"{path}: offset {_OFFSET_VERSION}: unsupported format version {version} (expected {FORMAT_VERSION})"
        )
    try:
        mode = TaskMode.from_code(mode_code)
    except ValueError:
        raise FormatError(f"{path}: offset {_OFFSET_MODE}: unknown task mode code {mode_code}")
    if min(nx, ny, nz) == 0:
        raise FormatError(f"{path}: offset {_OFFSET_DIMS}: zero grid dimension in {(nx, ny, nz)}")
    if not resolution > 0:
        raise FormatError(f"{path}: header resolution {resolution} must be positive")
    return GridHeader(mode, n_past, n_future, (nx, ny, nz), (x_min, y_min, z_min), resolution, flags)


def _check_length(data: bytes, expected: int, path: Path, header: GridHeader) -> None:
    if len(data) != expected:
        raise FormatError(
            f"{path}: header claims {header.n_frames} frames of {header.dims} "
            f"(payload {expected - HEADER.size} bytes), file carries {len(data) - HEADER.size} payload bytes"
        )


def _write(path: Path, chunks: Iterable[bytes]) -> int:
    path.parent.mkdir(parents=True, exist_ok=True)
    written = 0
    with open(path, "wb") as fh:
        for chunk in chunks:
            fh.write(chunk)
            written += len(chunk)
    return written


# ---------------------------------------------------------------------------
# GridFile
# ---------------------------------------------------------------------------

def write_grid_file(path: str | Path, occupancy: OccupancySequence, mode: TaskMode) -> int:
    spec = occupancy.spec
    with_ids = occupancy.has_instances
    flags = FLAG_INSTANCE_IDS if with_ids else 0

    def chunks():
        yield _pack_header(GRID_MAGIC, mode, spec, occupancy.n_future, flags)
        for frame in occupancy:
            yield frame.labels.tobytes()
            if with_ids:
                yield frame.instance_ids.astype("<u2").tobytes()

    return _write(Path(path), chunks())


def read_grid_file(path: str | Path) -> GridFile:
    path = Path(path)
    data = path.read_bytes()
    header = _parse_header(data, GRID_MAGIC, path)
    if header.flags & ~FLAG_INSTANCE_IDS:
        raise FormatError(f"{path}: offset {_OFFSET_FLAGS}: unknown flag bits {header.flags:#x}")
    with_ids = bool(header.flags & FLAG_INSTANCE_IDS)
    size = int(np.prod(header.dims))
    frame_bytes = size * (3 if with_ids else 1)
    _check_length(data, HEADER.size + header.n_frames * frame_bytes, path, header)

    try:
        spec = header.spec()
    except ValidationError as exc:
        raise FormatError(f"{path}: header describes an invalid grid: {exc.errors()[0]['msg']}")

    frames = []
    offset = HEADER.size
    for t in range(header.n_frames):
        labels = np.frombuffer(data, dtype=np.uint8, count=size, offset=offset)
        if labels.max() > SemanticLabel.GSO:
            bad = int(np.argmax(labels > SemanticLabel.GSO))
            raise FormatError(f"{path}: offset {offset + bad}: label byte {int(labels[bad])} is not 0, 1 or 2")
        offset += size
        ids = None
        if with_ids:
            ids = np.frombuffer(data, dtype="<u2", count=size, offset=offset).astype(np.uint16)
            stray = (ids != 0) & (labels != SemanticLabel.GMO)
            if stray.any():
                bad = int(np.argmax(stray))
                raise FormatError(f"{path}: offset {offset + 2 * bad}: frame {t} carries an instance id on a non-GMO voxel")
            offset += 2 * size
        frames.append(OccupancyGrid(spec, labels.copy(), ids))
    return GridFile(header.mode, OccupancySequence(tuple(frames)))


# ---------------------------------------------------------------------------
# FlowFile
# ---------------------------------------------------------------------------

def write_flow_file(path: str | Path, flows: Sequence[FlowVolume], mode: TaskMode = TaskMode.INFLATED_GMO) -> int:
    if not flows:
        raise ValueError("no flow frames to write")
    spec = flows[0].spec
    for t, flow in enumerate(flows):
        spec.require_match(flow.spec, what=f"flow frame {t}", horizons=False)

    def chunks():
        yield _pack_header(FLOW_MAGIC, mode, spec, len(flows) - 1, 0)
        for flow in flows:
            yield flow.vectors().astype("<f4").tobytes()
            yield flow.valid.astype(np.uint8).tobytes()

    return _write(Path(path), chunks())


def read_flow_file(path: str | Path) -> list[FlowVolume]:
    path = Path(path)
    data = path.read_bytes()
    header = _parse_header(data, FLOW_MAGIC, path)
    if header.flags:
        raise FormatError(f"{path}: offset {_OFFSET_FLAGS}: unknown flag bits {header.flags:#x}")
    size = int(np.prod(header.dims))
    _check_length(data, HEADER.size + header.n_frames * size * 13, path, header)
    try:
        spec = header.spec()
    except ValidationError as exc:
        raise FormatError(f"{path}: header describes an invalid grid: {exc.errors()[0]['msg']}")

    flows = []
    offset = HEADER.size
    for t in range(header.n_frames):
        vectors = np.frombuffer(data, dtype="<f4", count=3 * size, offset=offset).reshape(size, 3)
        offset += 12 * size
        valid = np.frombuffer(data, dtype=np.uint8, count=size, offset=offset)
        if valid.max(initial=0) > 1:
            bad = int(np.argmax(valid > 1))
            raise FormatError(f"{path}: offset {offset + bad}: validity byte {int(valid[bad])} is not 0 or 1")
        mask = valid.astype(bool)
        if np.any(vectors[~mask]):
            raise FormatError(f"{path}: frame {t}: invalid voxels carry nonzero flow")
        try:
            flows.append(FlowVolume(spec, mask.reshape(header.dims), vectors[mask].astype(np.float64)))
        except ValueError as exc:
            raise FormatError(f"{path}: frame {t}: {exc}")
        offset += size
    return flows


# ---------------------------------------------------------------------------
# BEV maps and labeled points
# ---------------------------------------------------------------------------

def write_bev_file(path: str | Path, frames: Sequence[BevMap], n_past: int = 0) -> int:
    if not frames:
        raise ValueError("no BEV frames to write")
    first = frames[0]
    nx, ny = first.dims
    with_ids = all(f.instance_ids is not None for f in frames)
    with_flow = all(f.flow is not None for f in frames)
    flags = (FLAG_INSTANCE_IDS if with_ids else 0) | (FLAG_BEV_FLOW if with_flow else 0)
    for t, frame in enumerate(frames):
        if frame.dims != first.dims or (frame.x_min, frame.y_min, frame.resolution) != (first.x_min, first.y_min, first.resolution):
            raise SpecMismatchError(f"BEV frame {t} raster differs from frame 0")

    def chunks():
        yield HEADER.pack(
            BEV_MAGIC, FORMAT_VERSION, TaskMode.INFLATED_GMO.code, n_past, len(frames) - 1,
            nx, ny, 1, first.x_min, first.y_min, 0.0, first.resolution, flags,
        )
        for frame in frames:
            yield frame.occupancy.astype(np.uint8).tobytes()
            if with_ids:
                yield frame.instance_ids.astype("<u2").tobytes()
            if with_flow:
                yield frame.flow.astype("<f4").tobytes()

    return _write(Path(path), chunks())


def read_bev_file(path: str | Path) -> list[BevMap]:
    path = Path(path)
    data = path.read_bytes()
    header = _parse_header(data, BEV_MAGIC, path)
    nx, ny, nz = header.dims
    if nz != 1:
        raise FormatError(f"{path}: offset {_OFFSET_DIMS + 8}: BEV files need nz = 1, found {nz}")
    if header.flags & ~(FLAG_INSTANCE_IDS | FLAG_BEV_FLOW):
        raise FormatError(f"{path}: offset {_OFFSET_FLAGS}: unknown flag bits {header.flags:#x}")
    with_ids = bool(header.flags & FLAG_INSTANCE_IDS)
    with_flow = bool(header.flags & FLAG_BEV_FLOW)
    cells = nx * ny
    frame_bytes = cells * (1 + (2 if with_ids else 0) + (8 if with_flow else 0))
    _check_length(data, HEADER.size + header.n_frames * frame_bytes, path, header)

    frames = []
    offset = HEADER.size
    for _ in range(header.n_frames):
        occupancy = np.frombuffer(data, dtype=np.uint8, count=cells, offset=offset).reshape(nx, ny)
        offset += cells
        ids = flow = None
        if with_ids:
            ids = np.frombuffer(data, dtype="<u2", count=cells, offset=offset).reshape(nx, ny)
            offset += 2 * cells
        if with_flow:
            flow = np.frombuffer(data, dtype="<f4", count=2 * cells, offset=offset).reshape(nx, ny, 2)
            offset += 8 * cells
        try:
            frames.append(BevMap(header.origin[0], header.origin[1], header.resolution, occupancy != 0, ids, flow))
        except (ValueError, SpecMismatchError) as exc:
            raise FormatError(f"{path}: {exc}")
    return frames


def write_point_file(path: str | Path, cloud: LabeledPointCloud) -> int:
    def chunks():
        yield POINT_HEADER.pack(POINT_MAGIC, FORMAT_VERSION, len(cloud))
        yield cloud.points.astype("<f8").tobytes()
        yield cloud.labels.tobytes()

    return _write(Path(path), chunks())


def read_point_file(path: str | Path) -> LabeledPointCloud:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < POINT_HEADER.size:
        raise FormatError(f"{path}: file is {len(data)} bytes, the header alone needs {POINT_HEADER.size}")
    magic, version, count = POINT_HEADER.unpack_from(data, 0)
    if magic != POINT_MAGIC:
        raise FormatError(f"{path}: offset 0: expected magic {POINT_MAGIC.decode()!r}, found {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: offset 4: unsupported format version {version} (expected {FORMAT_VERSION})")
    expected = POINT_HEADER.size + count * 25
    if len(data) != expected:
        raise FormatError(
            f"{path}: header claims {count} points ({expected - POINT_HEADER.size} payload bytes), "
            f"file carries {len(data) - POINT_HEADER.size}"
        )
    points = np.frombuffer(data, dtype="<f8", count=3 * count, offset=POINT_HEADER.size).reshape(count, 3)
    labels = np.frombuffer(data, dtype=np.uint8, count=count, offset=POINT_HEADER.size + 24 * count)
    try:
        return LabeledPointCloud(points.copy(), labels.copy())
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}")


# ---------------------------------------------------------------------------
# Scene documents
# ---------------------------------------------------------------------------

def _resolve(base: Path, ref: str, what: str) -> Path:
    path = Path(ref)
    if not path.is_absolute():
        path = base / path
    if not path.exists():
        raise FormatError(f"{what}: referenced file {path} does not exist")
    return path


def scene_from_document(doc: SceneDocument, base_dir: str | Path = ".") -> Scene:
    base = Path(base_dir)
    ego = {
        e.frame: Pose(Quaternion(*e.quaternion), np.array(e.translation))
        for e in doc.ego
    }
    tracks = tuple(
        InstanceTrack(
            inst.id,
            inst.category,
            {
                s.frame: BoxState(np.array(s.center), np.array(s.size_lwh), s.yaw, s.visibility)
                for s in inst.states
            },
        )
        for inst in doc.instances
    )
    fine_labels = None
    if doc.fine_label_files is not None:
        fine_labels = {}
        for frame, ref in doc.fine_label_files.items():
            grid_file = read_grid_file(_resolve(base, ref, f"scene {doc.scene_id} fine labels, frame {frame}"))
            fine_labels[frame] = grid_file.occupancy.present.without_instances()
    clouds = None
    if doc.cloud_files is not None:
        clouds = {
            frame: read_point_file(_resolve(base, ref, f"scene {doc.scene_id} cloud, frame {frame}"))
            for frame, ref in doc.cloud_files.items()
        }
    return Scene(doc.scene_id, np.array(doc.frames), ego, tracks, fine_labels, clouds).validate()


def load_scene(path: str | Path) -> Scene:
    path = Path(path)
    try:
        doc = SceneDocument.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as exc:
        err = exc.errors()[0]
        field = ".".join(str(p) for p in err["loc"]) or "<document>"
        raise FormatError(f"{path}: field {field}: {err['msg']}")
    return scene_from_document(doc, path.parent)


def scene_to_document(scene: Scene, fine_label_files=None, cloud_files=None) -> SceneDocument:
    return SceneDocument(
        scene_id=scene.scene_id,
        frames=scene.timestamps.tolist(),
        ego=[
            EgoPoseEntry(
                frame=frame,
                quaternion=tuple(float(v) for v in pose.rotation.elements),
                translation=tuple(float(v) for v in pose.translation),
            )
            for frame, pose in sorted(scene.ego.items())
        ],
        instances=[
            InstanceEntry(
                id=track.id,
                category=track.category,
                states=[
                    BoxStateEntry(
                        frame=frame,
                        center=tuple(float(v) for v in state.center),
                        size_lwh=tuple(float(v) for v in state.size),
                        yaw=state.yaw,
                        visibility=state.visibility,
                    )
                    for frame, state in track.states.items()
                ],
            )
            for track in scene.tracks
        ],
        fine_label_files=fine_label_files,
        cloud_files=cloud_files,
    )


def save_scene(scene: Scene, path: str | Path) -> list[tuple[Path, int]]:
    """Write the scene document plus sibling binary files for labels and clouds."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    written = []
    fine_label_files = cloud_files = None
    if scene.fine_labels is not None:
        fine_label_files = {}
        for frame, grid in sorted(scene.fine_labels.items()):
            target = path.with_name(f"{path.stem}_fine_{frame:04d}.occ")
            single = OccupancySequence((OccupancyGrid(grid.spec.with_horizons(0, 0), grid.labels),))
            written.append((target, write_grid_file(target, single, TaskMode.FINE_GMO_GSO)))
            fine_label_files[frame] = target.name
    if scene.clouds is not None:
        cloud_files = {}
        for frame, cloud in sorted(scene.clouds.items()):
            target = path.with_name(f"{path.stem}_cloud_{frame:04d}.pts")
            written.append((target, write_point_file(target, cloud)))
            cloud_files[frame] = target.name
    doc = scene_to_document(scene, fine_label_files, cloud_files)
    text = doc.model_dump_json(indent=2, exclude_none=True)
    path.write_text(text, encoding="utf-8")
    written.append((path, len(text.encode("utf-8"))))
    return written


# ---------------------------------------------------------------------------
# Sample bundles
# ---------------------------------------------------------------------------

def sample_paths(directory: str | Path, name: str) -> tuple[Path, Path, Path]:
    base = Path(directory) / name
    return base.with_suffix(".occ"), base.with_suffix(".flow"), base.with_suffix(".json")


def save_sample(sample: Sample, directory: str | Path) -> list[tuple[Path, int]]:
    occ_path, flow_path, meta_path = sample_paths(directory, sample.name)
    meta = SampleMeta(
        scene_id=sample.scene_id,
        present_index=sample.present_index,
        mode=sample.mode.value,
        instance_ids=list(sample.instance_ids),
        spec=sample.spec,
    )
    text = meta.model_dump_json(indent=2)
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    meta_path.write_text(text, encoding="utf-8")
    return [
        (occ_path, write_grid_file(occ_path, sample.occupancy, sample.mode)),
        (flow_path, write_flow_file(flow_path, sample.flows, sample.mode)),
        (meta_path, len(text.encode("utf-8"))),
    ]


def load_sample(path: str | Path) -> Sample:
    """Load a sample bundle from any of its files (or its stem)."""
    path = Path(path)
    occ_path, flow_path, meta_path = sample_paths(path.parent, path.stem if path.suffix in (".occ", ".flow", ".json") else path.name)
    try:
        meta = SampleMeta.model_validate_json(meta_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"{meta_path}: sample metadata is missing")
    except ValidationError as exc:
        err = exc.errors()[0]
        raise FormatError(f"{meta_path}: field {'.'.join(str(p) for p in err['loc'])}: {err['msg']}")
    grid_file = read_grid_file(occ_path)
    if not meta.spec.matches(grid_file.spec):
        raise FormatError(f"{occ_path}: grid header disagrees with {meta_path.name}")
    if grid_file.mode.value != meta.mode:
        raise FormatError(f"{occ_path}: task mode {grid_file.mode.value} disagrees with {meta_path.name} ({meta.mode})")
    flows = read_flow_file(flow_path)
    return Sample(
        spec=meta.spec,
        mode=grid_file.mode,
        occupancy=grid_file.occupancy,
        flows=tuple(flows),
        scene_id=meta.scene_id,
        present_index=meta.present_index,
        instance_ids=tuple(meta.instance_ids),
    )


# ---------------------------------------------------------------------------
# Reports and exports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("method", "class", "t", "iou", "intersection", "prediction", "ground_truth", "vpq_frame")


def save_report(report: EvalReport, path: str | Path) -> list[tuple[Path, int]]:
    """Write the report document and a per-(class, t) CSV table next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = report.model_dump_json(indent=2)
    path.write_text(text, encoding="utf-8")

    csv_path = path.with_suffix(".csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for metrics in report.classes:
            for t in range(report.n_future + 1):
                iou = metrics.iou_current if t == 0 else metrics.iou_per_step[t - 1]
                vpq_frame = report.vpq_per_frame[t] if t < len(report.vpq_per_frame) else None
                writer.writerow([
                    report.method, metrics.label, t,
                    "" if iou is None else repr(iou),
                    metrics.intersection[t], metrics.prediction[t], metrics.ground_truth[t],
                    "" if vpq_frame is None else repr(vpq_frame),
                ])
    return [(path, len(text.encode("utf-8"))), (csv_path, csv_path.stat().st_size)]


def load_report(path: str | Path) -> EvalReport:
    path = Path(path)
    try:
        return EvalReport.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as exc:
        err = exc.errors()[0]
        raise FormatError(f"{path}: field {'.'.join(str(p) for p in err['loc'])}: {err['msg']}")


VOXEL_COLUMNS = ("t", "ix", "iy", "iz", "x", "y", "z", "label", "instance_id")


def export_voxels(occupancy: OccupancySequence, path: str | Path, frames: Optional[Sequence[int]] = None) -> int:
    """Delimiter-separated list of non-free voxels for external plotting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(VOXEL_COLUMNS)
        for t in frames if frames is not None else range(len(occupancy)):
            grid = occupancy[t]
            idx = np.argwhere(grid.labels != SemanticLabel.FREE)
            centers = voxel_centers(idx, grid.spec)
            labels = grid.labels[tuple(idx.T)]
            ids = grid.instance_ids[tuple(idx.T)] if grid.has_instances else np.zeros(len(idx), dtype=np.uint16)
            for (ix, iy, iz), (x, y, z), label, instance_id in zip(idx, centers, labels, ids):
                writer.writerow([t, ix, iy, iz, f"{x:.4f}", f"{y:.4f}", f"{z:.4f}", SemanticLabel(label).name, instance_id])
                rows += 1
    return rows
