import math

import numpy as np
import pytest
from pyquaternion import Quaternion

from conftest import box, make_scene, track
from occ4d.errors import ConstructionError
from occ4d.grid import GridSpec
from occ4d.scene import (
    Pose,
    Scene,
    SequenceWindow,
    instance_duration_stats,
    interpolate_track,
    prepare_window,
    split_scene,
    to_present_frame,
)


@pytest.mark.parametrize("n_frames,expected", [(40, 34), (7, 1), (6, 0)])
def test_split_scene_window_count(n_frames, expected):
    scene = make_scene([], n_frames)
    windows = split_scene(scene, n_past=2, n_future=4)
    assert len(windows) == expected
    if windows:
        assert windows[0].present == 2
        assert windows[-1].present == n_frames - 5


def test_window_must_fit_scene():
    with pytest.raises(ConstructionError):
        SequenceWindow(make_scene([], 5), present=1, n_past=2, n_future=2)


def test_scene_rejects_unordered_timestamps():
    with pytest.raises(ConstructionError):
        Scene("bad", np.array([0.0, 0.5, 0.5]), {k: Pose.identity() for k in range(3)})


def test_validate_requires_every_pose():
    scene = Scene("gaps", np.array([0.0, 0.5, 1.0]), {0: Pose.identity(), 2: Pose.identity()})
    with pytest.raises(ConstructionError, match=r"\[1\]"):
        scene.validate()


def test_pose_inverse_and_between(rng):
    for _ in range(20):
        q = Quaternion(rng.normal(size=4)).normalised
        a = Pose(q, rng.normal(size=3) * 10)
        b = Pose(Quaternion(rng.normal(size=4)).normalised, rng.normal(size=3) * 10)
        points = rng.normal(size=(16, 3)) * 20
        there = Pose.between(a, b).apply(points)
        back = Pose.between(b, a).apply(there)
        np.testing.assert_allclose(back, points, atol=1e-9)
        np.testing.assert_allclose(a.inverse().apply(a.apply(points)), points, atol=1e-9)


def test_pose_rejects_unnormalised_quaternion():
    with pytest.raises(ValueError):
        Pose(Quaternion(2.0, 0.0, 0.0, 0.0), np.zeros(3))


def test_present_frame_identity_for_static_ego():
    scene = make_scene([track(1, {k: box((3.0, -2.0, 0.0)) for k in range(7)})], 7)
    prepared = to_present_frame(split_scene(scene, 2, 4)[0])
    assert sorted(prepared.tracks[0].states) == list(range(-2, 5))
    for state in prepared.tracks[0].states.values():
        np.testing.assert_array_equal(state.center, (3.0, -2.0, 0.0))


def test_present_frame_uses_inverse_present_pose():
    ego = {k: Pose(Quaternion(axis=(0, 0, 1), angle=0.3 * k), (5.0 * k, 1.0, 0.0)) for k in range(7)}
    world = np.array([10.0, 4.0, 0.5])
    scene = make_scene([track(1, {k: box(world, yaw=0.2) for k in range(7)})], 7, ego=ego)
    prepared = to_present_frame(split_scene(scene, 2, 4)[0])
    expected = ego[2].inverse().apply(world)
    for state in prepared.tracks[0].states.values():
        np.testing.assert_allclose(state.center, expected, atol=1e-9)
        assert state.yaw == pytest.approx(0.2 - 0.6, abs=1e-9)
    # ego[t] carries frame-t coordinates into the present frame
    np.testing.assert_allclose(prepared.ego[1].apply(ego[3].inverse().apply(world)), expected, atol=1e-9)


def test_interpolate_fills_gap_linearly():
    filled = interpolate_track(track(1, {0: box((0, 0, 0)), 2: box((2, 0, 0), yaw=math.pi / 2)}))
    assert filled.frames == [0, 1, 2]
    np.testing.assert_allclose(filled.states[1].center, (1, 0, 0))
    assert filled.states[1].yaw == pytest.approx(math.pi / 4)


def test_interpolate_takes_shortest_yaw_path():
    filled = interpolate_track(track(1, {0: box((0, 0, 0), yaw=3.0), 2: box((0, 0, 0), yaw=-3.0)}))
    assert abs(filled.states[1].yaw) == pytest.approx(math.pi)


def test_interpolate_leaves_contiguous_track_alone():
    original = track(1, {k: box((k, 0, 0)) for k in range(3)})
    assert interpolate_track(original) is original


def test_interpolate_is_idempotent_on_gaps():
    gapped = track(1, {
        0: box((0, 0, 0)),
        3: box((3, 1, 0), size=(4.4, 1.9, 1.5), yaw=2.8, visibility=0.5),
        5: box((5, 1, 0), yaw=-2.9),
    })
    once = interpolate_track(gapped)
    twice = interpolate_track(once)
    assert once.frames == twice.frames == list(range(6))
    for t in once.frames:
        a, b = once.states[t], twice.states[t]
        np.testing.assert_array_equal(a.center, b.center)
        np.testing.assert_array_equal(a.size, b.size)
        assert (a.yaw, a.visibility) == (b.yaw, b.visibility)
    # annotated states are untouched
    assert all(once.states[t] is gapped.states[t] for t in gapped.frames)


def test_rejection_rules_remove_exactly_the_intended_instances():
    spec = GridSpec(n_past=2, n_future=4)
    tracks = [
        track(1, {k: box((0.0, 0.0, 0.0)) for k in range(7)}),
        # first appears in the future
        track(2, {k: box((5.0, 5.0, 0.0)) for k in range(4, 7)}),
        # appears at the present frame with low visibility
        track(3, {k: box((-5.0, 5.0, 0.0), visibility=0.3) for k in range(2, 7)}),
        # starts at -Np, so the visibility rule does not apply
        track(4, {k: box((-5.0, -5.0, 0.0), visibility=0.3) for k in range(7)}),
        # drives out of range
        track(5, {k: box((20.0 * k, 0.0, 0.0)) for k in range(7)}),
    ]
    prepared = prepare_window(split_scene(make_scene(tracks, 7), 2, 4)[0], spec)
    assert sorted(t.id for t in prepared.tracks) == [1, 4]
    assert prepared.rejected == {
        2: "first-appears-in-future",
        3: "low-visibility-on-appearance",
        5: "leaves-range",
    }


def test_duration_histogram():
    spec = GridSpec(n_past=2, n_future=4)
    tracks = [
        track(1, {k: box((0.0, 0.0, 0.0)) for k in range(7)}),
        track(2, {k: box((8.0, 0.0, 0.0)) for k in range(2, 7)}),
    ]
    prepared = prepare_window(split_scene(make_scene(tracks, 7), 2, 4)[0], spec)
    histogram = instance_duration_stats([prepared])
    assert histogram.fractions() == {(-2, 4): 0.5, (0, 4): 0.5}

    single = instance_duration_stats([prepare_window(split_scene(make_scene(tracks[:1], 7), 2, 4)[0], spec)])
    assert single.fractions() == {(-2, 4): 1.0}
    single += histogram
    assert single.total == 3
