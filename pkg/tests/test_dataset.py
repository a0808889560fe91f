import math

import numpy as np
import pytest

from conftest import SMALL, box, make_scene, synth_config, track
from occ4d.dataset import (
    TaskMode,
    backward_flow_from_centers,
    build_gmo_sequence,
    build_sample,
    build_samples,
    merge_gso,
    paint_boxes,
    voxelize_box,
)
from occ4d.errors import ConfigurationError, SpecMismatchError
from occ4d.grid import GridSpec, OccupancyGrid, OccupancySequence, SemanticLabel, points_to_voxels
from occ4d.scene import BoxState, prepare_window, split_scene
from occ4d.synth import generate_scene


def _window(tracks, n_frames=7):
    return split_scene(make_scene(tracks, n_frames), 2, 4)[0]


# ---------------------------------------------------------------------------
# Box voxelization
# ---------------------------------------------------------------------------

def test_unit_cube_covers_125_voxels(small_spec):
    voxels = voxelize_box(box((0.0, 0.0, 0.0), size=(1.0, 1.0, 1.0)), small_spec)
    assert voxels.shape == (125, 3)
    for axis in range(3):
        assert np.unique(voxels[:, axis]).size == 5


def test_sub_voxel_box_holds_one_center(small_spec):
    voxels = voxelize_box(box((0.1, 0.1, 0.1), size=(0.05, 0.05, 0.05)), small_spec)
    assert voxels.tolist() == [[64, 64, 10]]


def test_quarter_turn_rotates_the_index_set(small_spec):
    size = (3.1, 1.5, 1.0)
    upright = voxelize_box(box((0.0, 0.0, 0.0), size=size, yaw=0.0), small_spec)
    turned = voxelize_box(box((0.0, 0.0, 0.0), size=size, yaw=math.pi / 2), small_spec)
    nx = small_spec.dims[0]
    rotated = np.stack([nx - 1 - upright[:, 1], upright[:, 0], upright[:, 2]], axis=1)
    assert set(map(tuple, rotated.tolist())) == set(map(tuple, turned.tolist()))


def test_point_sampling_oracle(small_spec, rng):
    margin = small_spec.resolution * math.sqrt(3) / 2 + 1e-6
    for _ in range(100):
        state = BoxState(
            center=rng.uniform((-6, -6, -1), (6, 6, 1)),
            size=rng.uniform((1.0, 1.0, 0.8), (5.0, 3.0, 2.0)),
            yaw=rng.uniform(-math.pi, math.pi),
        )
        member = np.zeros(small_spec.dims, dtype=bool)
        member[tuple(voxelize_box(state, small_spec).T)] = True

        local = rng.uniform(-1.0, 1.0, size=(10_000, 3)) * (state.size / 2 + 1.0)
        c, s = math.cos(state.yaw), math.sin(state.yaw)
        world = state.center + np.stack([c * local[:, 0] - s * local[:, 1], s * local[:, 0] + c * local[:, 1], local[:, 2]], axis=1)
        half = state.size / 2
        inside = np.all(np.abs(local) <= half - margin, axis=1)
        outside = np.any(np.abs(local) >= half + margin, axis=1)

        idx, in_grid = points_to_voxels(world, small_spec)
        hit = member[tuple(idx.T)] & in_grid
        assert not np.any(inside & in_grid & ~hit)
        assert not np.any(outside & hit)


def test_overlap_goes_to_the_smaller_box(small_spec):
    trailer = box((0.0, 0.0, 0.0), size=(8.0, 2.6, 1.6))
    car = box((1.0, 0.0, 0.0), size=(3.0, 1.6, 1.2))
    labels, ids = paint_boxes([(1, car), (2, trailer)], small_spec)
    car_voxels = voxelize_box(car, small_spec)
    assert np.all(ids[tuple(car_voxels.T)] == 1)
    assert np.count_nonzero(ids == 2) == len(voxelize_box(trailer, small_spec)) - len(car_voxels)
    assert np.array_equal(labels == SemanticLabel.GMO, ids > 0)


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------

def test_no_tracks_gives_an_empty_sequence(small_spec):
    prepared = prepare_window(_window([]), small_spec)
    seq = build_gmo_sequence(prepared, small_spec, TaskMode.INFLATED_GMO)
    assert len(seq) == 5
    assert all(not frame.labels.any() for frame in seq)


def test_static_box_repeats_in_every_frame(small_spec):
    prepared = prepare_window(_window([track(1, {k: box((2.05, 1.05, -0.5)) for k in range(7)})]), small_spec)
    seq = build_gmo_sequence(prepared, small_spec, TaskMode.INFLATED_GMO)
    assert seq.present.labels.any()
    for frame in seq:
        assert frame.equals(seq.present)


def test_horizon_mismatch(small_spec):
    prepared = prepare_window(_window([]), small_spec)
    with pytest.raises(SpecMismatchError):
        build_gmo_sequence(prepared, small_spec.with_horizons(2, 3), TaskMode.INFLATED_GMO)


def test_merge_gso_precedence(tiny_spec):
    labels = np.zeros(tiny_spec.dims, dtype=np.uint8)
    ids = np.zeros(tiny_spec.dims, dtype=np.uint16)
    labels[1, 1, 1] = SemanticLabel.GMO
    ids[1, 1, 1] = 7
    fine = np.zeros(tiny_spec.dims, dtype=np.uint8)
    fine[1, 1, 1] = SemanticLabel.GSO
    fine[2, 2, 2] = SemanticLabel.GSO
    seq = OccupancySequence((OccupancyGrid(tiny_spec, labels, ids),) * 5)
    merged = merge_gso(seq, [OccupancyGrid(tiny_spec, fine)] * 5)
    assert merged.present.labels[1, 1, 1] == SemanticLabel.GMO
    assert merged.present.labels[2, 2, 2] == SemanticLabel.GSO
    assert merged.present.instance_ids[1, 1, 1] == 7

    unchanged = merge_gso(seq, [OccupancyGrid.empty(tiny_spec)] * 5)
    assert unchanged.equals(seq)


# ---------------------------------------------------------------------------
# Flow
# ---------------------------------------------------------------------------

def test_flow_points_at_the_previous_center():
    spec = GridSpec.from_origin((-0.5, -0.5, -0.5), 1.0, (8, 8, 2))
    labels = np.zeros(spec.dims, dtype=np.uint8)
    ids = np.zeros(spec.dims, dtype=np.uint16)
    labels[4, 1, 0] = labels[6, 6, 1] = SemanticLabel.GMO
    ids[4, 1, 0] = 1
    ids[6, 6, 1] = 2
    flow = backward_flow_from_centers(OccupancyGrid(spec, labels, ids), {1: np.array([2.0, 0.0, 0.0])})
    vectors = flow.vectors()
    np.testing.assert_array_equal(vectors[4, 1, 0], (-2.0, -1.0, 0.0))
    assert flow.valid[4, 1, 0]
    # instance 2 has no state at t-1
    assert not flow.valid[6, 6, 1]
    np.testing.assert_array_equal(vectors[6, 6, 1], (0.0, 0.0, 0.0))


def test_static_world_sample(small_spec):
    sample = build_sample(split_scene(generate_scene(synth_config(3, "static")), 2, 4)[0], small_spec, TaskMode.INFLATED_GMO)
    assert len(sample.instance_ids) == 4
    for frame, flow in zip(sample.occupancy, sample.flows):
        assert frame.equals(sample.occupancy.present)
        np.testing.assert_array_equal(flow.valid, frame.gmo_mask())
        # nothing moves, so every flow of an instance ends at the same point
        assert len(np.unique(np.round(flow.targets(), 9), axis=0)) == 4


def test_flow_magnitude_is_bounded(small_spec):
    for seed in range(5):
        window = split_scene(generate_scene(synth_config(40 + seed, "turn")), 2, 4)[0]
        sample = build_sample(window, small_spec, TaskMode.INFLATED_GMO)
        tracks = {t.id: t for t in prepare_window(window, small_spec).tracks}
        for t, (frame, flow) in enumerate(zip(sample.occupancy, sample.flows)):
            ids = frame.instance_ids[tuple(flow.valid_indices().T)]
            norms = np.linalg.norm(flow.values, axis=1)
            for instance_id in np.unique(ids):
                states = tracks[int(instance_id)].states
                moved = np.linalg.norm(states[t].center - states[t - 1].center)
                assert norms[ids == instance_id].max() <= moved + np.linalg.norm(states[t].size) / 2 + 1e-9


def test_build_sample_is_deterministic(small_spec):
    first, second = (
        build_sample(split_scene(generate_scene(synth_config(21, "turn")), 2, 4)[0], small_spec, TaskMode.INFLATED_GMO)
        for _ in range(2)
    )
    assert first.occupancy.equals(second.occupancy)
    assert all(a.equals(b) for a, b in zip(first.flows, second.flows))
    assert first.instance_ids == second.instance_ids


# ---------------------------------------------------------------------------
# Task modes
# ---------------------------------------------------------------------------

def test_fine_mode_without_fine_labels():
    scene = make_scene([track(1, {k: box((0.0, 0.0, 0.0)) for k in range(7)})], 7)
    with pytest.raises(ConfigurationError, match="fine labels"):
        build_sample(split_scene(scene, 2, 4)[0], GridSpec(**SMALL, n_past=2, n_future=4), TaskMode.FINE_GMO_GSO)


def test_fine_gmo_matches_boxes_on_synthetic_labels(small_spec):
    scene = generate_scene(synth_config(11, fine_labels=True))
    window = split_scene(scene, 2, 4)[0]
    inflated = build_sample(window, small_spec, TaskMode.INFLATED_GMO)
    fine = build_sample(window, small_spec, TaskMode.FINE_GMO)
    assert fine.occupancy.equals(inflated.occupancy)

    with_gso = build_sample(window, small_spec, TaskMode.FINE_GMO_GSO)
    present = with_gso.occupancy.present
    assert np.array_equal(present.gmo_mask(), inflated.occupancy.present.gmo_mask())
    # the ground slab fills the two lowest layers
    assert present.mask(SemanticLabel.GSO)[:, :, :2].sum() == 128 * 128 * 2


def test_build_samples_covers_every_window(small_spec):
    scene = generate_scene(synth_config(5, "static", n_frames=9))
    samples = list(build_samples(scene, small_spec, TaskMode.INFLATED_GMO))
    assert [s.name for s in samples] == ["synth-5_0002", "synth-5_0003", "synth-5_0004"]
