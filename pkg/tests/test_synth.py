import math

import numpy as np
import pytest

from conftest import SMALL, synth_config
from occ4d.dataset import TaskMode, build_sample
from occ4d.errors import ConfigurationError
from occ4d.grid import GridSpec
from occ4d.scene import instance_duration_stats, prepare_window, split_scene
from occ4d.schemas import InstanceScript, SynthConfig
from occ4d.synth import Lcg64, analytic_flow, expected_durations, generate_scene, plan_scene


def _centers(scene):
    return {t.id: {k: s.center for k, s in t.states.items()} for t in scene.tracks}


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------

def test_lcg_sequence():
    rng = Lcg64(0)
    assert rng.next_u64() == 1442695040888963407
    assert rng.next_u64() == (6364136223846793005 * 1442695040888963407 + 1442695040888963407) % 2**64
    values = [Lcg64(42).uniform() for _ in range(3)]
    assert len(set(values)) == 1
    assert all(0.0 <= Lcg64(seed).uniform() < 1.0 for seed in range(100))


def test_same_seed_same_scene():
    a = generate_scene(synth_config(9, "mixed"))
    b = generate_scene(synth_config(9, "mixed"))
    assert a.scene_id == b.scene_id == "synth-9"
    ca, cb = _centers(a), _centers(b)
    assert ca.keys() == cb.keys()
    for instance_id in ca:
        for k in ca[instance_id]:
            np.testing.assert_array_equal(ca[instance_id][k], cb[instance_id][k])


def test_different_seeds_differ():
    a = _centers(generate_scene(synth_config(1)))
    b = _centers(generate_scene(synth_config(2)))
    assert not np.array_equal(a[1][0], b[1][0])


def test_infeasible_layout():
    with pytest.raises(ConfigurationError, match="could not place"):
        plan_scene(synth_config(0, n_instances=60, max_attempts=5))


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------

def test_constant_velocity_closed_form():
    config = synth_config(4, "cv")
    for motion in plan_scene(config).motions:
        for k in range(config.n_frames):
            expected = motion.center + motion.velocity * (k * config.frame_interval)
            np.testing.assert_allclose(motion.center_at(k), expected, atol=1e-12)
            assert motion.yaw_at(k) == motion.yaw
        assert 0.5 <= np.linalg.norm(motion.velocity) <= 2.0


def test_turning_instances_keep_their_speed():
    config = synth_config(6, "turn", yaw_rate_range=(0.3, 0.5))
    for motion in plan_scene(config).motions:
        steps = [np.linalg.norm(motion.center_at(k + 1) - motion.center_at(k)) for k in range(config.n_frames - 1)]
        np.testing.assert_allclose(steps, steps[0], rtol=1e-9)
        turn = motion.yaw_at(1) - motion.yaw_at(0)
        assert math.remainder(turn - motion.yaw_rate * config.frame_interval, 2 * math.pi) == pytest.approx(0.0, abs=1e-12)


def test_static_instances_do_not_move():
    scene = generate_scene(synth_config(5, "static"))
    for track in scene.tracks:
        first = track.states[track.frames[0]].center
        for state in track.states.values():
            np.testing.assert_array_equal(state.center, first)


def test_scripted_appearance_window():
    script = InstanceScript(kinematics="static", center=(0.0, 0.0, -0.8), appear=(2, 5))
    scene = generate_scene(synth_config(3, instances=[script], n_instances=0, n_frames=9))
    assert [t.frames for t in scene.tracks] == [[2, 3, 4, 5]]


def test_moving_ego():
    scene = generate_scene(synth_config(3, ego="cv", ego_velocity=(2.0, 0.0, 0.0)))
    np.testing.assert_allclose(scene.ego[4].translation, (4.0, 0.0, 0.0))


def test_clouds_leave_the_layout_unchanged():
    plain = generate_scene(synth_config(12))
    with_clouds = generate_scene(synth_config(12, clouds=True, points_per_box=50, ground_points=100))
    assert plain.clouds is None
    a, b = _centers(plain), _centers(with_clouds)
    for instance_id in a:
        for k in a[instance_id]:
            np.testing.assert_array_equal(a[instance_id][k], b[instance_id][k])
    cloud = with_clouds.clouds[0]
    assert cloud.points.shape == (4 * 50 + 100, 3)


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def test_static_flow_targets_the_box_center(small_spec):
    config = synth_config(21, "static")
    window = split_scene(generate_scene(config), 2, 4)[0]
    sample = build_sample(window, small_spec, TaskMode.INFLATED_GMO)
    centers = {m.id: m.center for m in plan_scene(config).motions}
    for t in range(1, 5):
        flow = analytic_flow(config, window, sample.occupancy[t], t)
        ids = sample.occupancy[t].instance_ids[tuple(flow.valid_indices().T)]
        expected = np.stack([centers[int(i)] for i in ids])
        np.testing.assert_allclose(flow.targets(), expected, atol=1e-9)


def test_expected_durations_match_the_pipeline():
    spec = GridSpec(**SMALL, n_past=2, n_future=4)
    config = SynthConfig(
        seed=77,
        n_frames=12,
        n_instances=2,
        kinematics="cv",
        instances=[
            InstanceScript(kinematics="static", center=(0.0, 0.0, -0.8)),
            InstanceScript(center=(5.0, 6.0, -0.8), velocity=(0.5, 0.0, 0.0), appear=(3, 8)),
            InstanceScript(kinematics="static", center=(-6.0, 6.0, -0.8), appear=(5, 11), visibility=0.3),
            InstanceScript(center=(6.0, -6.0, -0.8), velocity=(4.0, 0.0, 0.0)),
        ],
    )
    scene = generate_scene(config)
    windows = [prepare_window(w, spec) for w in split_scene(scene, 2, 4)]
    assert instance_duration_stats(windows).counts == expected_durations(config, 2, 4, spec).counts
