import numpy as np
import pytest

from occ4d.grid import GridSpec
from occ4d.scene import BoxState, InstanceTrack, Pose, Scene
from occ4d.schemas import SynthConfig

SMALL = dict(x_min=-12.8, x_max=12.8, y_min=-12.8, y_max=12.8, z_min=-2.0, z_max=2.0, resolution=0.2)


@pytest.fixture
def small_spec():
    """128 x 128 x 20 voxels, Np=2, Nf=4."""
    return GridSpec(**SMALL, n_past=2, n_future=4)


@pytest.fixture
def tiny_spec():
    """16 x 16 x 8 voxels at 1 m, Nf=4."""
    return GridSpec.from_origin((0.0, 0.0, 0.0), 1.0, (16, 16, 8), n_past=0, n_future=4)


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


def box(center, size=(4.0, 1.8, 1.6), yaw=0.0, visibility=1.0):
    return BoxState(np.array(center, dtype=np.float64), np.array(size, dtype=np.float64), yaw, visibility)


def make_scene(tracks, n_frames, dt=0.5, ego=None, scene_id="crafted"):
    """Scene with a stationary ego unless per-frame poses are given."""
    poses = ego or {k: Pose.identity() for k in range(n_frames)}
    return Scene(scene_id, np.arange(n_frames) * dt, poses, tuple(tracks))


def track(instance_id, states, category="car"):
    return InstanceTrack(instance_id, category, states)


def synth_config(seed, kinematics="cv", **overrides):
    """One-window (Np=2, Nf=4) scene inside the small grid."""
    values = dict(
        seed=seed,
        n_frames=7,
        n_instances=4,
        kinematics=kinematics,
        speed_range=(0.5, 2.0),
    )
    values.update(overrides)
    return SynthConfig(**values)
