"""Command line for the camera-only 4D occupancy forecasting benchmark toolkit."""

import argparse
import json
import logging
import multiprocessing
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

from pydantic import ValidationError
from tqdm import tqdm

from occ4d import baselines, formats
from occ4d.config import Settings, load_settings
from occ4d.dataset import PRESETS, TaskMode, build_sample
from occ4d.errors import ConfigurationError, FormatError, Occ4dError
from occ4d.grid import GridSpec, SemanticLabel, count_label
from occ4d.metrics import EvalAccumulator
from occ4d.scene import (
    DurationHistogram,
    instance_duration_stats,
    interpolate_scene,
    prepare_window,
    split_scene,
    to_present_frame,
)
from occ4d.schemas import SynthConfig
from occ4d.synth import generate_scene

logger = logging.getLogger("occ4d")

file_write_logger = logging.getLogger("occ4d.file-writes")
file_write_logger.setLevel(logging.INFO)
file_write_logger.propagate = False


def _configure_logging(settings: Settings) -> None:
    logging.basicConfig(level=settings.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if file_write_logger.handlers:
        return
    try:
        log_file_path = Path(settings.FILE_WRITE_LOG)
        log_file_path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file_path, encoding="utf-8")
        file_handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        file_write_logger.addHandler(file_handler)
    except Exception as e:
        # A missing log directory must not stop a build.
        logger.warning(f"File write logging disabled: {e}")


def _log_file_write(*, command: str, kind: str, path: Path, size: int) -> None:
    """Write a structured audit line for every artifact a command produces."""
    record = {
        "event_ts_utc": datetime.now(timezone.utc).isoformat(),
        "command": command,
        "kind": kind,
        "path": str(path),
        "bytes": size,
    }
    file_write_logger.info(json.dumps(record, separators=(",", ":")))


def _log_written(command: str, written: Iterable[tuple[Path, int]]) -> int:
    total = 0
    for path, size in written:
        _log_file_write(command=command, kind=path.suffix.lstrip(".") or "file", path=path, size=size)
        total += 1
    return total


# ---------------------------------------------------------------------------
# Shared options
# ---------------------------------------------------------------------------

def _grid_spec(args, settings: Settings) -> GridSpec:
    def pick(flag, default):
        return default if flag is None else flag

    x_range = pick(args.x_range, settings.X_RANGE)
    y_range = pick(args.y_range, settings.Y_RANGE)
    z_range = pick(args.z_range, settings.Z_RANGE)
    try:
        return GridSpec(
            x_min=x_range[0], x_max=x_range[1],
            y_min=y_range[0], y_max=y_range[1],
            z_min=z_range[0], z_max=z_range[1],
            resolution=pick(args.res, settings.RESOLUTION),
            n_past=pick(args.np, settings.N_PAST),
            n_future=pick(args.nf, settings.N_FUTURE),
        )
    except ValidationError as e:
        raise ConfigurationError(f"invalid grid: {e.errors()[0]['msg']}")


def _workers(args, settings: Settings) -> int:
    workers = args.workers if args.workers is not None else settings.WORKERS
    if workers < 1:
        raise ConfigurationError(f"--workers must be at least 1, got {workers}")
    return workers


def _run_tasks(task: Callable, items: Sequence, workers: int, desc: str) -> list:
    """Map ``task`` over ``items`` with a progress bar, in a process pool when workers > 1."""
    if workers == 1 or len(items) < 2:
        return [task(item) for item in tqdm(items, desc=desc, unit="item", disable=len(items) < 2)]
    with multiprocessing.Pool(processes=min(workers, len(items))) as pool:
        return list(tqdm(pool.imap(task, items), total=len(items), desc=desc, unit="item"))


def _scene_files(paths: Sequence[str]) -> list[Path]:
    files = []
    for raw in paths:
        path = Path(raw)
        files.extend(sorted(path.glob("*.json")) if path.is_dir() else [path])
    if not files:
        raise ConfigurationError("no scene files given")
    return files


def _sample_files(directory: str) -> list[Path]:
    path = Path(directory)
    if not path.is_dir():
        raise ConfigurationError(f"{path} is not a directory of samples")
    files = sorted(path.glob("*.occ"))
    if not files:
        raise ConfigurationError(f"{path} holds no .occ sample files")
    return files


# ---------------------------------------------------------------------------
# build
# ---------------------------------------------------------------------------

def _build_scene(task) -> list[tuple[Path, int]]:
    scene_path, spec, mode, visibility_threshold, out_dir = task
    scene = interpolate_scene(formats.load_scene(scene_path))
    written = []
    for window in split_scene(scene, spec.n_past, spec.n_future):
        sample = build_sample(window, spec, mode, visibility_threshold)
        written.extend(formats.save_sample(sample, out_dir))
    return written


def cmd_build(args, settings: Settings) -> int:
    spec = _grid_spec(args, settings)
    mode = TaskMode(args.task)
    visibility = args.visibility_threshold if args.visibility_threshold is not None else settings.VISIBILITY_THRESHOLD
    scenes = _scene_files(args.scenes)
    if args.preset and mode not in PRESETS[args.preset].modes:
        raise ConfigurationError(f"task {mode.value} is not available for the {args.preset} preset")
    tasks = [(path, spec, mode, visibility, Path(args.out)) for path in scenes]
    results = _run_tasks(_build_scene, tasks, _workers(args, settings), "build")
    files = sum(_log_written("build", written) for written in results)
    logger.info(f"Built {files // 3} samples from {len(scenes)} scenes into {args.out}")
    return 0


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args, settings: Settings) -> int:
    try:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.frames is not None:
            raw["n_frames"] = args.frames
        if args.fine_labels:
            raw["fine_labels"] = True
        if args.clouds:
            raw["clouds"] = True
        config = SynthConfig.model_validate(raw)
    except json.JSONDecodeError as e:
        raise FormatError(f"{args.config}: line {e.lineno}: {e.msg}")
    except ValidationError as e:
        err = e.errors()[0]
        raise ConfigurationError(f"synth config field {'.'.join(str(p) for p in err['loc'])}: {err['msg']}")

    scene = generate_scene(config)
    out = Path(args.out)
    if out.suffix != ".json":
        out = out / f"{scene.scene_id}.json"
    written = formats.save_scene(scene, out)
    _log_written("synth", written)
    logger.info(f"Wrote synthetic scene {scene.scene_id} ({scene.n_frames} frames, {len(scene.tracks)} instances) to {out}")
    return 0


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------

def _forecasts_from_scenes(args, settings: Settings, spec: GridSpec, kind: str):
    visibility = settings.VISIBILITY_THRESHOLD
    for path in _scene_files(args.scenes):
        scene = formats.load_scene(path)
        for window in split_scene(scene, spec.n_past, spec.n_future):
            name = f"{scene.scene_id}_{window.present:04d}"
            if kind == "cv":
                yield name, baselines.constant_velocity_forecast(window, spec, visibility)
                continue
            prepared = to_present_frame(window)
            clouds = prepared.clouds or {}
            missing = [t for t in range(spec.n_future + 1) if t not in clouds]
            if missing:
                raise ConfigurationError(f"scene {scene.scene_id} has no labeled clouds for window frames {missing}")
            yield name, baselines.voxelize_labeled_points([clouds[t] for t in range(spec.n_future + 1)], spec)


def _baseline_forecasts(args, settings: Settings, spec: GridSpec):
    if args.kind == "static":
        if not args.samples:
            raise ConfigurationError("--kind static needs --samples DIR")
        for path in _sample_files(args.samples):
            sample = formats.load_sample(path)
            yield path.stem, baselines.static_world(sample.occupancy.present, sample.spec.n_future)
    elif args.kind in ("cv", "points"):
        if not args.scenes:
            raise ConfigurationError(f"--kind {args.kind} needs --scenes")
        yield from _forecasts_from_scenes(args, settings, spec, args.kind)
    else:
        if not args.bev:
            raise ConfigurationError("--kind bev-lift needs --bev FILE(S)")
        z_ground = args.z_ground if args.z_ground is not None else settings.BEV_Z_GROUND
        height = args.height if args.height is not None else settings.BEV_HEIGHT
        for raw in args.bev:
            path = Path(raw)
            yield path.stem, baselines.lift_bev_sequence(formats.read_bev_file(path), spec, z_ground, height)


def cmd_baseline(args, settings: Settings) -> int:
    spec = _grid_spec(args, settings)
    mode = TaskMode(args.task)
    out_dir = Path(args.out)
    count = 0
    for name, forecast in _baseline_forecasts(args, settings, spec):
        if args.flow_from:
            donor = baselines.load_external_forecast(Path(args.flow_from) / f"{name}.occ", forecast.spec)
            forecast = baselines.combine_forecasts(forecast, donor)
        _log_written("baseline", baselines.save_forecast(forecast, out_dir / f"{name}.occ", mode))
        count += 1
    logger.info(f"Wrote {count} {args.kind} forecasts to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _parse_classes(raw: Optional[str], mode: TaskMode) -> tuple[SemanticLabel, ...]:
    if not raw:
        return mode.classes
    try:
        return tuple(SemanticLabel[name.strip().upper()] for name in raw.split(",") if name.strip())
    except KeyError as e:
        raise ConfigurationError(f"unknown class {e.args[0]!r} (expected gmo and/or gso)")


def _eval_chunk(task) -> EvalAccumulator:
    gt_paths, pred_dir, classes, options = task
    accumulator = None
    for gt_path in gt_paths:
        sample = formats.load_sample(gt_path)
        if accumulator is None:
            accumulator = EvalAccumulator(sample.spec.n_future, classes)
        pred_path = pred_dir / gt_path.name
        if not pred_path.exists():
            raise ConfigurationError(f"no forecast {pred_path} for sample {gt_path.stem}")
        forecast = baselines.load_external_forecast(pred_path, sample.spec)
        accumulator.add_pair(forecast, sample, **options)
    return accumulator


def cmd_eval(args, settings: Settings) -> int:
    gt_files = _sample_files(args.gt)
    first = formats.load_sample(gt_files[0])
    mode = first.mode
    if args.task and TaskMode(args.task) != mode:
        raise ConfigurationError(f"--task {args.task} does not match ground truth task {mode.value}")
    classes = _parse_classes(args.classes, mode)
    options = {
        "vpq_threshold": args.vpq_threshold if args.vpq_threshold is not None else settings.VPQ_IOU_THRESHOLD,
        "nms_radius": args.nms_radius if args.nms_radius is not None else settings.NMS_RADIUS,
        "min_prob": args.min_prob if args.min_prob is not None else settings.MIN_PROB,
        "assoc_radius": args.assoc_radius if args.assoc_radius is not None else settings.ASSOC_RADIUS,
    }
    workers = _workers(args, settings)
    chunks = [gt_files[i::workers] for i in range(min(workers, len(gt_files)))]
    tasks = [(chunk, Path(args.pred), classes, options) for chunk in chunks]
    partials = _run_tasks(_eval_chunk, tasks, workers, "eval")

    total = EvalAccumulator(first.spec.n_future, classes)
    for partial in partials:
        total += partial
    method = args.method or Path(args.pred).name
    report = total.report(method, mode, options["vpq_threshold"])
    _log_written("eval", formats.save_report(report, args.report))

    for metrics in report.classes:
        logger.info(
            f"{metrics.label}: IoU_c={_fmt(metrics.iou_current)} IoU_f={_fmt(metrics.iou_future)} "
            f"discounted={_fmt(metrics.iou_discounted)}"
        )
    logger.info(f"VPQ={_fmt(report.vpq)} over {report.samples} samples; report at {args.report}")
    return 0


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.4f}"


# ---------------------------------------------------------------------------
# stats / inspect
# ---------------------------------------------------------------------------

def cmd_stats(args, settings: Settings) -> int:
    spec = _grid_spec(args, settings)
    visibility = args.visibility_threshold if args.visibility_threshold is not None else settings.VISIBILITY_THRESHOLD
    histogram = DurationHistogram()
    windows = 0
    for path in _scene_files(args.scenes):
        scene = formats.load_scene(path)
        for window in split_scene(scene, spec.n_past, spec.n_future):
            histogram += instance_duration_stats([prepare_window(window, spec, visibility)])
            windows += 1

    rows = [
        {"t_in": t_in, "t_out": t_out, "count": histogram.counts[(t_in, t_out)], "fraction": fraction}
        for (t_in, t_out), fraction in histogram.fractions().items()
    ]
    print(f"{'t_in':>5} {'t_out':>6} {'count':>8} {'fraction':>9}")
    for row in rows:
        print(f"{row['t_in']:>5} {row['t_out']:>6} {row['count']:>8} {row['fraction']:>9.4f}")
    print(f"{histogram.total} instances over {windows} windows")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        text = json.dumps({"windows": windows, "instances": histogram.total, "durations": rows}, indent=2)
        out.write_text(text, encoding="utf-8")
        _log_file_write(command="stats", kind="json", path=out, size=len(text.encode("utf-8")))
    return 0


def cmd_inspect(args, settings: Settings) -> int:
    path = Path(args.sample)
    if path.with_suffix(".json").exists():
        sample = formats.load_sample(path)
        occupancy, flows = sample.occupancy, sample.flows
        print(f"sample {sample.name}: task {sample.mode.value}, {len(sample.instance_ids)} instances")
    else:
        grid_file = formats.read_grid_file(path)
        occupancy = grid_file.occupancy
        flow_path = path.with_suffix(".flow")
        flows = formats.read_flow_file(flow_path) if flow_path.exists() else None
        print(f"forecast {path.stem}: task {grid_file.mode.value}")

    spec = occupancy.spec
    print(
        f"grid {spec.dims} at {spec.resolution} m, origin {tuple(spec.mins)}, "
        f"np={spec.n_past} nf={spec.n_future}"
    )
    for t, grid in enumerate(occupancy):
        line = f"  t={t}: gmo={count_label(grid, SemanticLabel.GMO)} gso={count_label(grid, SemanticLabel.GSO)}"
        if grid.has_instances:
            ids = set(grid.instance_ids[grid.instance_ids > 0].tolist())
            line += f" instances={len(ids)}"
        if flows is not None:
            line += f" valid_flow={int(flows[t].valid.sum())}"
        print(line)

    if args.export_voxels:
        frames = [args.frame] if args.frame is not None else None
        rows = formats.export_voxels(occupancy, args.export_voxels, frames)
        out = Path(args.export_voxels)
        _log_file_write(command="inspect", kind="csv", path=out, size=out.stat().st_size)
        logger.info(f"Exported {rows} voxels to {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--settings", help="dotenv-style settings file (OCC4D_* keys)")
    common.add_argument("--log-level", help="logging level (default from settings)")
    common.add_argument("--workers", type=int, help="worker processes for build/eval")

    grid = argparse.ArgumentParser(add_help=False)
    grid.add_argument("--np", type=int, help="past frames Np")
    grid.add_argument("--nf", type=int, help="future frames Nf")
    grid.add_argument("--res", type=float, help="voxel size in meters")
    grid.add_argument("--x-range", type=float, nargs=2, metavar=("MIN", "MAX"))
    grid.add_argument("--y-range", type=float, nargs=2, metavar=("MIN", "MAX"))
    grid.add_argument("--z-range", type=float, nargs=2, metavar=("MIN", "MAX"))

    tasks = [mode.value for mode in TaskMode]

    parser = argparse.ArgumentParser(prog="occ4d", description="4D occupancy forecasting benchmark toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", parents=[common, grid], help="build benchmark samples from scene documents")
    p.add_argument("scenes", nargs="+", help="scene .json files or directories of them")
    p.add_argument("--out", required=True, help="output directory for sample bundles")
    p.add_argument("--task", choices=tasks, default=TaskMode.INFLATED_GMO.value)
    p.add_argument("--preset", choices=sorted(PRESETS), help="reject tasks the dataset preset does not provide")
    p.add_argument("--visibility-threshold", type=float)
    p.set_defaults(handler=cmd_build)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic scene document")
    p.add_argument("--config", help="SynthConfig JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--fine-labels", action="store_true", help="emit per-frame fine label volumes")
    p.add_argument("--clouds", action="store_true", help="emit per-frame labeled point clouds")
    p.add_argument("--out", required=True, help="scene .json path or output directory")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("baseline", parents=[common, grid], help="produce baseline forecasts")
    p.add_argument("--kind", choices=("static", "cv", "bev-lift", "points"), required=True)
    p.add_argument("--samples", help="sample directory (static)")
    p.add_argument("--scenes", nargs="+", help="scene files (cv, points)")
    p.add_argument("--bev", nargs="+", help="BEV map files (bev-lift)")
    p.add_argument("--z-ground", type=float)
    p.add_argument("--height", type=float)
    p.add_argument("--flow-from", help="forecast directory whose flow replaces this forecast's instances")
    p.add_argument("--task", choices=tasks, default=TaskMode.INFLATED_GMO.value)
    p.add_argument("--out", required=True, help="output directory for forecasts")
    p.set_defaults(handler=cmd_baseline)

    p = sub.add_parser("eval", parents=[common], help="score forecasts against samples")
    p.add_argument("--pred", required=True, help="forecast directory")
    p.add_argument("--gt", required=True, help="sample directory")
    p.add_argument("--task", choices=tasks)
    p.add_argument("--classes", help="comma-separated subset of gmo,gso")
    p.add_argument("--report", required=True, help="report .json path (a .csv is written next to it)")
    p.add_argument("--method", help="method name recorded in the report")
    p.add_argument("--vpq-threshold", type=float)
    p.add_argument("--nms-radius", type=float)
    p.add_argument("--min-prob", type=float)
    p.add_argument("--assoc-radius", type=float)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("stats", parents=[common, grid], help="instance-duration histogram")
    p.add_argument("scenes", nargs="+")
    p.add_argument("--visibility-threshold", type=float)
    p.add_argument("--out", help="also write the histogram as JSON")
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("inspect", parents=[common], help="summarise a sample or forecast")
    p.add_argument("sample", help=".occ file of a sample or forecast")
    p.add_argument("--export-voxels", metavar="CSV", help="write non-free voxels as CSV")
    p.add_argument("--frame", type=int, help="export only this frame")
    p.set_defaults(handler=cmd_inspect)
    return parser


def cli_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    if args.settings and not Path(args.settings).is_file():
        logger.error(f"settings file {args.settings} not found")
        return ConfigurationError.exit_code
    try:
        overrides = {"LOG_LEVEL": args.log_level.upper()} if args.log_level else {}
        settings = load_settings(args.settings, **overrides)
    except ValidationError as e:
        err = e.errors()[0]
        logger.error(f"invalid settings: {'.'.join(str(p) for p in err['loc'])}: {err['msg']}")
        return ConfigurationError.exit_code
    _configure_logging(settings)

    try:
        return args.handler(args, settings)
    except Occ4dError as e:
        logger.error(f"{args.command} failed: {e.detail}")
        return e.exit_code
    except (OSError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
