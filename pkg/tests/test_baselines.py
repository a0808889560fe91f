import time

import numpy as np
import pytest

from conftest import box, make_scene, synth_config, track
from occ4d import baselines
from occ4d.dataset import TaskMode, build_sample, paint_boxes
from occ4d.errors import FormatError, SpecMismatchError
from occ4d.grid import (
    BevMap,
    FlowVolume,
    GridSpec,
    OccupancyGrid,
    OccupancySequence,
    SemanticLabel,
    count_label,
    linear_index,
    points_to_voxels,
)
from occ4d.metrics import evaluate_dataset, iou_future
from occ4d.scene import LabeledPointCloud, split_scene
from occ4d.synth import analytic_flow, generate_scene


def _sample(config, spec):
    scene = generate_scene(config)
    window = split_scene(scene, spec.n_past, spec.n_future)[0]
    return window, build_sample(window, spec, TaskMode.INFLATED_GMO)


# ---------------------------------------------------------------------------
# Static world
# ---------------------------------------------------------------------------

def test_static_world_repeats_present(small_spec):
    labels, ids = paint_boxes([(3, box((1.05, 2.05, -0.5)))], small_spec)
    present = OccupancyGrid(small_spec, labels, ids)
    forecast = baselines.static_world(present, 4)
    assert len(forecast.occupancy) == 5
    assert all(frame.equals(present) for frame in forecast.occupancy)
    # instances stay put, so flow targets the centroid
    targets = forecast.flows[2].targets()
    np.testing.assert_allclose(targets, np.broadcast_to(targets.mean(axis=0), targets.shape), atol=1e-9)


def test_static_world_is_exact_on_static_scenes(small_spec):
    pairs = []
    for seed in range(20):
        _, sample = _sample(synth_config(seed, "static"), small_spec)
        pairs.append((baselines.static_world(sample.occupancy.present, 4), sample))
    report = evaluate_dataset(pairs, method="static-world")
    gmo = report.metrics_for("gmo")
    assert gmo.iou_current == 1.0
    assert gmo.iou_future == 1.0
    assert gmo.iou_discounted == 1.0


def test_static_world_decays_on_a_mover(small_spec):
    # 2 m long box moving one voxel per step
    frames = []
    for t in range(5):
        labels, ids = paint_boxes([(1, box((0.05 + 0.2 * t, 0.05, -0.5), size=(2.0, 1.0, 1.0)))], small_spec)
        frames.append(OccupancyGrid(small_spec, labels, ids))
    truth = OccupancySequence(tuple(frames))
    per_step, _ = iou_future(baselines.static_world(truth.present, 4).occupancy, truth)
    assert all(a > b for a, b in zip(per_step, per_step[1:]))
    assert per_step[0] == pytest.approx(9 / 11)


# ---------------------------------------------------------------------------
# BEV lifting
# ---------------------------------------------------------------------------

def _bev(spec, cells=(), flow=None, ids=None):
    occupancy = np.zeros(spec.dims[:2], dtype=bool)
    for cell in cells:
        occupancy[cell] = True
    return BevMap(spec.x_min, spec.y_min, spec.resolution, occupancy, ids, flow)


def test_lift_one_cell(small_spec):
    grid = baselines.lift_bev(_bev(small_spec, [(10, 20)]), small_spec, z_ground=-2.0, height=2.0)
    assert np.count_nonzero(grid.gmo_mask()) == 10
    assert grid.gmo_mask()[10, 20, :10].all()


def test_lift_empty_and_full(small_spec):
    assert not baselines.lift_bev(_bev(small_spec), small_spec).labels.any()
    full = BevMap(small_spec.x_min, small_spec.y_min, 0.2, np.ones((128, 128), dtype=bool))
    grid = baselines.lift_bev(full, small_spec, z_ground=-2.0, height=4.0)
    assert np.count_nonzero(grid.gmo_mask()) == 128 * 128 * 20


def test_lift_sequence_with_flow_and_ids(small_spec):
    flow = np.zeros((128, 128, 2))
    flow[10, 20] = (-0.4, 0.2)
    ids = np.zeros((128, 128), dtype=np.uint16)
    ids[10, 20] = 5
    bev = _bev(small_spec, [(10, 20)], flow=flow, ids=ids)
    forecast = baselines.lift_bev_sequence([bev] * 5, small_spec, z_ground=-1.0, height=1.0)
    assert forecast.has_instances
    assert forecast.occupancy[3].instance_ids[10, 20, 5] == 5
    assert forecast.flows[3].valid.sum() == 5
    np.testing.assert_array_equal(forecast.flows[3].vectors()[10, 20, 5], (-0.4, 0.2, 0.0))

    with pytest.raises(SpecMismatchError):
        baselines.lift_bev_sequence([bev] * 3, small_spec)


# ---------------------------------------------------------------------------
# Point voxelization
# ---------------------------------------------------------------------------

def _cloud(labels, point=(0.05, 0.05, 0.05)):
    return LabeledPointCloud(np.tile(point, (len(labels), 1)), np.array(labels, dtype=np.uint8))


@pytest.mark.parametrize(
    "labels,expected",
    [
        ([SemanticLabel.GMO, SemanticLabel.GMO, SemanticLabel.GSO], SemanticLabel.GMO),
        ([SemanticLabel.GMO, SemanticLabel.GSO], SemanticLabel.GMO),
        ([SemanticLabel.GSO, SemanticLabel.GSO, SemanticLabel.GMO], SemanticLabel.GSO),
        ([SemanticLabel.FREE, SemanticLabel.GSO], SemanticLabel.GSO),
    ],
)
def test_point_majority(small_spec, labels, expected):
    grid = baselines.voxelize_points(_cloud(labels), small_spec)
    assert grid.labels[64, 64, 10] == expected
    assert np.count_nonzero(grid.labels) == 1


def test_empty_cloud_frame(small_spec):
    clouds = [_cloud([SemanticLabel.GMO])] * 2 + [_cloud([])] + [_cloud([SemanticLabel.GSO])] * 2
    forecast = baselines.voxelize_labeled_points(clouds, small_spec)
    assert not forecast.occupancy[2].labels.any()
    assert forecast.flows is None


def test_point_gmo_count_is_bounded(small_spec, rng):
    for _ in range(20):
        points = rng.uniform(-0.6, 0.6, size=(400, 3))
        labels = rng.integers(0, 3, size=400).astype(np.uint8)
        forecast = baselines.voxelize_labeled_points([LabeledPointCloud(points, labels)] * 5, small_spec)
        idx, inside = points_to_voxels(points[labels == SemanticLabel.GMO], small_spec)
        holding = np.unique(linear_index(idx[inside], small_spec)).size
        assert count_label(forecast.occupancy.present, SemanticLabel.GMO) <= holding


# ---------------------------------------------------------------------------
# Constant velocity
# ---------------------------------------------------------------------------

def test_linear_extrapolation(small_spec):
    states = {1: box((0.05, 0.05, -0.5), size=(2.0, 1.0, 1.0)), 2: box((1.05, 0.05, -0.5), size=(2.0, 1.0, 1.0))}
    window = split_scene(make_scene([track(1, states)], 7), 2, 4)[0]
    forecast = baselines.constant_velocity_forecast(window, small_spec)
    for t in range(5):
        labels, _ = paint_boxes([(1, box((1.05 + t, 0.05, -0.5), size=(2.0, 1.0, 1.0)))], small_spec)
        np.testing.assert_array_equal(forecast.occupancy[t].labels, labels)


def test_single_observation_stays_put(small_spec):
    window = split_scene(make_scene([track(1, {2: box((3.05, 0.05, -0.5))})], 7), 2, 4)[0]
    forecast = baselines.constant_velocity_forecast(window, small_spec)
    for frame in forecast.occupancy:
        assert frame.equals(forecast.occupancy.present)
    assert forecast.occupancy.present.labels.any()


def test_future_only_tracks_are_not_forecast(small_spec):
    window = split_scene(make_scene([track(1, {k: box((3.05, 0.05, -0.5)) for k in range(3, 7)})], 7), 2, 4)[0]
    forecast = baselines.constant_velocity_forecast(window, small_spec)
    assert not any(frame.labels.any() for frame in forecast.occupancy)


def test_constant_velocity_ignores_future_annotations(small_spec):
    # annotated at t=-2 and t=+2 only: the gap must not be filled from the future state
    gap = track(1, {0: box((-6.05, 0.05, -0.5)), 4: box((6.05, 0.05, -0.5))})
    window = split_scene(make_scene([gap], 7), 2, 4)[0]
    forecast = baselines.constant_velocity_forecast(window, small_spec)
    assert not any(frame.labels.any() for frame in forecast.occupancy)

    # a gap closed by the present annotation is still filled and extrapolated
    past_gap = track(1, {0: box((-6.05, 0.05, -0.5)), 2: box((-4.05, 0.05, -0.5))})
    window = split_scene(make_scene([past_gap], 7), 2, 4)[0]
    forecast = baselines.constant_velocity_forecast(window, small_spec)
    centers = forecast.flows[4].targets()
    np.testing.assert_allclose(centers.mean(axis=0)[0], -4.05 + 3 * 1.0, atol=1e-9)


def test_constant_velocity_is_exact_on_cv_scenes(small_spec):
    pairs = []
    for seed in range(20):
        config = synth_config(100 + seed, "cv")
        window, sample = _sample(config, small_spec)
        pairs.append((baselines.constant_velocity_forecast(window, small_spec), sample))

        for t in range(5):
            oracle = analytic_flow(config, window, sample.occupancy[t], t)
            np.testing.assert_array_equal(oracle.valid, sample.flows[t].valid)
            np.testing.assert_allclose(sample.flows[t].values, oracle.values, rtol=0, atol=1e-9)

    report = evaluate_dataset(pairs, method="constant-velocity")
    assert report.metrics_for("gmo").iou_future == 1.0
    assert report.vpq == 1.0


# ---------------------------------------------------------------------------
# Combination and files
# ---------------------------------------------------------------------------

def test_combine_forecasts(small_spec):
    window, sample = _sample(synth_config(7, "cv"), small_spec)
    cv = baselines.constant_velocity_forecast(window, small_spec)
    static = baselines.static_world(sample.occupancy.present.without_instances(), 4)
    combined = baselines.combine_forecasts(static, cv)
    assert not combined.has_instances
    for t, flow in enumerate(combined.flows):
        shared = static.occupancy[t].gmo_mask() & cv.occupancy[t].gmo_mask() & cv.flows[t].valid
        np.testing.assert_array_equal(flow.valid, shared)
        np.testing.assert_array_equal(flow.vectors()[shared], cv.flows[t].vectors()[shared])
    assert combined.method == "static-world+constant-velocity"
    with pytest.raises(ValueError):
        baselines.combine_forecasts(cv, static)


def test_combine_keeps_own_flow_off_the_donor_occupancy(small_spec):
    cube = (0.6, 0.6, 0.6)
    labels, ids = paint_boxes([(1, box((1.1, 1.1, 0.1), cube)), (2, box((5.1, 5.1, 0.1), cube))], small_spec)
    own = baselines.static_world(OccupancyGrid(small_spec, labels, ids), 4)

    donor_labels, _ = paint_boxes([(1, box((1.1, 1.1, 0.1), cube))], small_spec)
    donor_grid = OccupancyGrid(small_spec, donor_labels)
    donor_mask = donor_grid.gmo_mask()
    shift = np.zeros((*small_spec.dims, 3))
    shift[donor_mask] = (0.5, 0.0, 0.0)
    donor_flow = FlowVolume.from_dense(small_spec, shift, donor_mask)
    donor = baselines.Forecast(OccupancySequence((donor_grid,) * 5), (donor_flow,) * 5, "donor")

    combined = baselines.combine_forecasts(own, donor)
    for t in range(5):
        own_mask = own.occupancy[t].gmo_mask()
        assert np.count_nonzero(own_mask) == 54
        np.testing.assert_array_equal(combined.flows[t].valid, own_mask)
        vectors = combined.flows[t].vectors()
        np.testing.assert_array_equal(vectors[donor_mask], shift[donor_mask])
        rest = own_mask & ~donor_mask
        np.testing.assert_array_equal(vectors[rest], own.flows[t].vectors()[rest])


def test_forecast_file_round_trip(small_spec, tmp_path):
    window, _ = _sample(synth_config(8, "cv"), small_spec)
    forecast = baselines.constant_velocity_forecast(window, small_spec)
    written = baselines.save_forecast(forecast, tmp_path / "cv.occ")
    assert [p.suffix for p, _ in written] == [".occ", ".flow"]

    loaded = baselines.load_external_forecast(tmp_path / "cv.occ", small_spec)
    assert loaded.occupancy.equals(forecast.occupancy)
    assert loaded.method == "cv"
    for a, b in zip(loaded.flows, forecast.flows):
        np.testing.assert_array_equal(a.valid, b.valid)
        np.testing.assert_allclose(a.values, b.values, atol=1e-5)


def test_forecast_file_checks(small_spec, tmp_path):
    forecast = baselines.static_world(OccupancyGrid.empty(small_spec), 4)
    path = tmp_path / "static.occ"
    baselines.save_forecast(forecast, path)
    other = GridSpec(x_min=-6.4, x_max=6.4, y_min=-6.4, y_max=6.4, z_min=-2.0, z_max=2.0, n_past=2, n_future=4)
    with pytest.raises(SpecMismatchError, match="dims"):
        baselines.load_external_forecast(path, other)

    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(FormatError):
        baselines.load_external_forecast(path, small_spec)


def test_forecast_file_with_other_past_horizon(small_spec, tmp_path):
    labels, ids = paint_boxes([(1, box((1.05, 2.05, -0.5)))], small_spec)
    present = OccupancyGrid(small_spec.with_horizons(0, 4), labels, ids)
    baselines.save_forecast(baselines.static_world(present, 4), tmp_path / "np0.occ")
    loaded = baselines.load_external_forecast(tmp_path / "np0.occ", small_spec)
    assert loaded.spec.n_past == 2
    assert loaded.occupancy.present.equals(OccupancyGrid(small_spec, labels, ids))
    assert loaded.flows is not None

    baselines.save_forecast(baselines.static_world(present, 3), tmp_path / "nf3.occ")
    with pytest.raises(SpecMismatchError, match="nf=3"):
        baselines.load_external_forecast(tmp_path / "nf3.occ", small_spec)


@pytest.mark.slow
def test_full_resolution_pipeline():
    spec = GridSpec(n_past=2, n_future=4)
    config = synth_config(31, "cv", n_instances=20, spawn_x=(-40.0, 40.0), spawn_y=(-40.0, 40.0))
    window = split_scene(generate_scene(config), 2, 4)[0]
    started = time.perf_counter()
    sample = build_sample(window, spec, TaskMode.INFLATED_GMO)
    assert time.perf_counter() - started < 2.0
    assert sample.occupancy.present.labels.shape == (512, 512, 40)
    assert len(sample.instance_ids) == 20
    report = evaluate_dataset([(baselines.constant_velocity_forecast(window, spec), sample)])
    assert report.metrics_for("gmo").iou_future == 1.0
    assert report.vpq == 1.0
