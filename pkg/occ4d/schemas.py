"""Pydantic schemas for scene interchange, synthetic scene configs, sample
metadata and evaluation reports."""

from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from occ4d.dataset import PRESETS
from occ4d.grid import MAX_INSTANCE_ID, GridSpec
from occ4d.scene import CATEGORIES

SCENE_SCHEMA_VERSION = 1
REPORT_SCHEMA_VERSION = 1

Vec3 = Tuple[float, float, float]


# ============================================================================
# Scene interchange document
# ============================================================================

class EgoPoseEntry(BaseModel):
    frame: int = Field(ge=0)
    quaternion: Tuple[float, float, float, float]  # w, x, y, z
    translation: Vec3


class BoxStateEntry(BaseModel):
    frame: int = Field(ge=0)
    center: Vec3
    size_lwh: Vec3
    yaw: float
    visibility: float = Field(default=1.0, ge=0.0, le=1.0)

    @field_validator("size_lwh")
    @classmethod
    def validate_size(cls, v: Vec3) -> Vec3:
        if min(v) <= 0:
            raise ValueError("box size must be positive along every axis")
        return v


class InstanceEntry(BaseModel):
    id: int = Field(ge=1, le=MAX_INSTANCE_ID)
    category: str
    states: List[BoxStateEntry] = Field(min_length=1)

    model_config = {"extra": "allow"}

    @field_validator("category")
    @classmethod
    def validate_category(cls, v: str) -> str:
        if v not in CATEGORIES:
            raise ValueError(f"category must be one of {', '.join(CATEGORIES)}")
        return v

    @field_validator("states")
    @classmethod
    def validate_unique_frames(cls, v: List[BoxStateEntry]) -> List[BoxStateEntry]:
        frames = [s.frame for s in v]
        if len(set(frames)) != len(frames):
            raise ValueError("an instance may carry at most one state per frame")
        return v


class SceneDocument(BaseModel):
    """
    Scene interchange format. Poses map ego coordinates to world coordinates;
    boxes are world-frame. Optional per-frame file references are resolved
    relative to the document's directory.
    """
    schema_version: int = Field(default=SCENE_SCHEMA_VERSION)
    scene_id: str
    frames: List[float]  # timestamps, seconds
    ego: List[EgoPoseEntry]
    instances: List[InstanceEntry] = Field(default_factory=list)
    fine_label_files: Optional[Dict[int, str]] = None
    cloud_files: Optional[Dict[int, str]] = None

    model_config = {"extra": "allow"}

    @field_validator("schema_version")
    @classmethod
    def validate_schema_version(cls, v: int) -> int:
        if v != SCENE_SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v} (expected {SCENE_SCHEMA_VERSION})")
        return v

    @field_validator("frames")
    @classmethod
    def validate_frames_increasing(cls, v: List[float]) -> List[float]:
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("frame timestamps must be strictly increasing")
        return v

    @model_validator(mode="after")
    def validate_references(self) -> "SceneDocument":
        n = len(self.frames)
        ids = [inst.id for inst in self.instances]
        if len(set(ids)) != len(ids):
            raise ValueError("instance ids must be unique")
        for entry in self.ego:
            if entry.frame >= n:
                raise ValueError(f"ego pose references frame {entry.frame} of {n}")
        for inst in self.instances:
            for state in inst.states:
                if state.frame >= n:
                    raise ValueError(f"instance {inst.id} references frame {state.frame} of {n}")
        for name in ("fine_label_files", "cloud_files"):
            files = getattr(self, name) or {}
            bad = [f for f in files if not 0 <= f < n]
            if bad:
                raise ValueError(f"{name} references frames {bad} outside [0, {n})")
        return self


# ============================================================================
# Synthetic scenes
# ============================================================================

class InstanceScript(BaseModel):
    """A scripted instance. Fields left as None are drawn from the generator."""
    kinematics: Literal["static", "cv", "turn"] = "cv"
    category: str = "car"
    center: Optional[Vec3] = None  # world position at frame 0
    velocity: Optional[Vec3] = None  # m/s
    yaw: Optional[float] = None
    yaw_rate: float = 0.0  # rad/s, turn only
    size_lwh: Optional[Vec3] = None
    appear: Optional[Tuple[int, int]] = None  # first, last frame (inclusive)
    visibility: float = Field(default=1.0, ge=0.0, le=1.0)
    visibility_schedule: Dict[int, float] = Field(default_factory=dict)

    @field_validator("category")
    @classmethod
    def validate_category(cls, v: str) -> str:
        if v not in CATEGORIES:
            raise ValueError(f"category must be one of {', '.join(CATEGORIES)}")
        return v

    @field_validator("appear")
    @classmethod
    def validate_appear(cls, v: Optional[Tuple[int, int]]) -> Optional[Tuple[int, int]]:
        if v is not None and not 0 <= v[0] <= v[1]:
            raise ValueError("appearance window must satisfy 0 <= first <= last")
        return v

    @field_validator("visibility_schedule")
    @classmethod
    def validate_schedule(cls, v: Dict[int, float]) -> Dict[int, float]:
        if any(not 0.0 <= x <= 1.0 for x in v.values()):
            raise ValueError("scheduled visibilities must lie in [0, 1]")
        return v


class SynthConfig(BaseModel):
    seed: int = 0
    preset: Literal["nuscenes", "lyft"] = "nuscenes"
    n_frames: int = Field(default=20, ge=1)
    dt: Optional[float] = Field(default=None, gt=0)  # None: preset frame interval
    n_instances: int = Field(default=6, ge=0)  # random instances on top of scripted ones
    kinematics: Literal["static", "cv", "turn", "mixed"] = "cv"
    instances: List[InstanceScript] = Field(default_factory=list)

    speed_range: Tuple[float, float] = (0.2, 1.0)
    yaw_rate_range: Tuple[float, float] = (-0.2, 0.2)
    size_min: Vec3 = (3.6, 1.6, 1.4)
    size_max: Vec3 = (4.8, 2.0, 1.8)
    spawn_x: Tuple[float, float] = (-10.0, 10.0)
    spawn_y: Tuple[float, float] = (-10.0, 10.0)
    ground_z: float = -1.6
    min_separation: float = 0.5
    max_attempts: int = Field(default=1000, ge=1)

    ego: Literal["static", "cv"] = "static"
    ego_velocity: Vec3 = (0.0, 0.0, 0.0)

    fine_labels: bool = False
    label_grid: GridSpec = GridSpec(
        x_min=-12.8, x_max=12.8, y_min=-12.8, y_max=12.8, z_min=-2.0, z_max=2.0,
        resolution=0.2, n_past=0, n_future=0,
    )
    n_pillars: int = Field(default=4, ge=0)
    clouds: bool = False
    points_per_box: int = Field(default=200, ge=0)
    ground_points: int = Field(default=2000, ge=0)

    @model_validator(mode="after")
    def validate_ranges(self) -> "SynthConfig":
        for name in ("speed_range", "yaw_rate_range", "spawn_x", "spawn_y"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ValueError(f"{name} must be an ordered (min, max) pair")
        if any(a > b for a, b in zip(self.size_min, self.size_max)) or min(self.size_min) <= 0:
            raise ValueError("size_min must be positive and not exceed size_max")
        if self.speed_range[0] < 0:
            raise ValueError("speeds must be nonnegative")
        return self

    @property
    def frame_interval(self) -> float:
        return self.dt if self.dt is not None else PRESETS[self.preset].dt


# ============================================================================
# Samples and reports
# ============================================================================

class SampleMeta(BaseModel):
    schema_version: int = Field(default=1)
    scene_id: str
    present_index: int = Field(ge=0)
    mode: str
    instance_ids: List[int] = Field(default_factory=list)
    spec: GridSpec


class ClassMetrics(BaseModel):
    label: str
    iou_current: Optional[float] = None
    iou_per_step: List[Optional[float]]  # t = 1..Nf
    iou_future: Optional[float] = None
    iou_discounted: Optional[float] = None
    intersection: List[int]  # t = 0..Nf
    prediction: List[int]
    ground_truth: List[int]


class VpqTally(BaseModel):
    iou_sum: List[float]  # t = 0..Nf
    tp: List[int]
    fp: List[int]
    fn: List[int]


class EvalReport(BaseModel):
    schema_version: int = Field(default=REPORT_SCHEMA_VERSION)
    method: str
    mode: str
    n_future: int
    samples: int
    vpq_threshold: float
    classes: List[ClassMetrics]
    vpq: Optional[float] = None
    vpq_per_frame: List[Optional[float]] = Field(default_factory=list)
    vpq_tally: Optional[VpqTally] = None
    vpq_samples: int = 0  # samples that entered the VPQ tally

    def metrics_for(self, label: str) -> ClassMetrics:
        for metrics in self.classes:
            if metrics.label == label:
                return metrics
        raise KeyError(label)
