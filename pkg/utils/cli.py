"""
Command-line surface for SpinFlow
Subcommands chain the pipeline stages through JSONL files in the output
directory: simulate -> track -> segment -> spin -> plot, plus bench, report,
train-toy and calibrate
"""

import argparse
import glob
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

from utils.bench import run_benchmark
from utils.config import PipelineConfig
from utils.data_generator import RallyGenerator, calibrate_shot_templates, corpus_summary, shot_features
from utils.datatypes import TableGeometry, Trajectory3D
from utils.errors import ConfigError, SchemaError, SpinFlowError
from utils.geometry import CameraCalibration, default_test_rig, load_rig, save_rig
from utils.io_formats import (read_detections, read_spin_results, read_tracks, read_trajectories, record_kind,
                              write_detections, write_spin_results, write_tracks, write_training_windows,
                              write_trajectories)
from utils.report import pipeline_report
from utils.simulator import load_scripts, render_detections, save_scripts, simulate_rally
from utils.spin import SpinCentroids, analyze_rally, class_counts, scatter_frame
from utils.toy_tracker import compare_cells, render_dataset, train_toy_tracker
from utils.tracker import StereoTracker, stitch_tracks
from utils.trajectory import sample_training_windows, segment_rally
from utils.visualization import VisualizationHelper, scatter_from_records, write_html, write_spin_svg

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ANALYSIS = 1
EXIT_USAGE = 2


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(data, handle, indent=2, sort_keys=True)
        handle.write("\n")
    logger.info(f"Wrote {path}")


def _write_csv(path: Path, frame: pd.DataFrame, index: bool = False) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=index, float_format="%.10g")
    logger.info(f"Wrote {path}")


def _rig(config: PipelineConfig) -> List[CameraCalibration]:
    cameras = load_rig(config.calibration_path) if config.calibration_path else list(default_test_rig())
    if len(cameras) < 2:
        raise ConfigError(f"a stereo rig needs two cameras, {config.calibration_path} lists {len(cameras)}")
    return cameras


def _table(config: PipelineConfig) -> TableGeometry:
    if not config.table_path:
        return TableGeometry()
    try:
        return TableGeometry.from_json(config.table_path)
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON ({e.msg})", path=config.table_path, line=e.lineno)
    except (TypeError, ValueError) as e:
        raise SchemaError(f"bad table geometry: {e}", path=config.table_path)


def cmd_simulate(config: PipelineConfig, args: argparse.Namespace) -> int:
    """Ground-truth trajectories plus one detection file per camera"""
    cameras = _rig(config)
    table = _table(config)
    if config.script_path:
        scripts = load_scripts(config.script_path)
    else:
        generator = RallyGenerator(table=table, physics=config.physics, seed=config.seed,
                                   noise_sigma=config.noise_sigma, dropout=config.dropout)
        scripts = generator.generate_corpus(args.rallies if args.rallies is not None else config.n_rallies,
                                            config.hits_per_rally, config.professional_fraction)

    truths = [simulate_rally(script, table, config.physics) for script in scripts]
    detections: Dict[str, Dict[int, list]] = {camera.camera_id: {} for camera in cameras}
    for script, truth in zip(scripts, truths):
        streams = render_detections(truth, cameras, script.detection_noise_sigma,
                                    script.dropout_probability, script.rng_seed)
        for camera_id, stream in streams.items():
            detections[camera_id][script.rally_id] = stream

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_scripts(str(out / "scripts.json"), scripts)
    save_rig(str(out / "rig.json"), cameras)
    write_trajectories(str(out / "truth.jsonl"), truths)
    for camera_id, by_rally in detections.items():
        write_detections(str(out / f"detections_{camera_id}.jsonl"), by_rally)
    _write_csv(out / "corpus.csv", corpus_summary(scripts))
    logger.info(f"Simulated {len(scripts)} rallies into {out}")
    return EXIT_OK


def _detection_paths(config: PipelineConfig, paths: Optional[Sequence[str]]) -> List[str]:
    if paths:
        return list(paths)
    found = sorted(glob.glob(str(Path(config.out_dir) / "detections_*.jsonl")))
    if not found:
        raise ConfigError(f"no detection files given and none found in {config.out_dir}")
    return found


def cmd_track(config: PipelineConfig, args: argparse.Namespace) -> int:
    """Kalman-filtered 3D tracks per rally from two cameras' detections"""
    if args.calibration:
        config = replace(config, calibration_path=args.calibration)
    cam_l, cam_r = _rig(config)[:2]
    merged: Dict[int, Dict[str, list]] = {}
    for path in _detection_paths(config, args.detections):
        for rally_id, streams in read_detections(path).items():
            for camera_id, stream in streams.items():
                merged.setdefault(rally_id, {}).setdefault(camera_id, []).extend(stream)

    tracks_by_rally = {}
    for rally_id in sorted(merged):
        tracker = StereoTracker(cam_l, cam_r, config.tracker, config.geometry)
        tracks_by_rally[rally_id] = tracker.run(merged[rally_id])
    write_tracks(str(Path(config.out_dir) / "tracks.jsonl"), tracks_by_rally)
    return EXIT_OK


def _segment_input(path: str) -> List[Trajectory3D]:
    kind = record_kind(path)
    if kind == "track":
        return [stitch_tracks(tracks, rally_id=rally_id) for rally_id, tracks in sorted(read_tracks(path).items())]
    if kind == "sample":
        return read_trajectories(path)
    raise SchemaError(f"expected track or trajectory records, got {kind!r}", path=path, line=1 if kind else None)


def cmd_segment(config: PipelineConfig, args: argparse.Namespace) -> int:
    """Bounce and return events plus bootstrap smoothing for every rally"""
    table = _table(config)
    trajectories = _segment_input(args.input)
    cameras = _rig(config) if args.windows else []
    segmented = [segment_rally(traj, table, config.trajectory, smooth=config.smooth) for traj in trajectories]
    out = Path(config.out_dir)
    write_trajectories(str(out / "trajectory.jsonl"), segmented)
    if args.windows:
        windows = [w for traj in segmented for w in sample_training_windows(traj, cameras)]
        write_training_windows(str(out / "windows.jsonl"), windows)
    return EXIT_OK


def cmd_spin(config: PipelineConfig, args: argparse.Namespace) -> int:
    """Per-hit spin features and cluster labels, plus the scatter CSV"""
    trajectories = read_trajectories(args.input)
    analyses = [a for traj in trajectories for a in analyze_rally(traj, config.spin)]
    scatter = scatter_frame(analyses)
    out = Path(config.out_dir)
    write_spin_results(str(out / "spin.jsonl"), analyses)
    _write_csv(out / "scatter.csv", scatter)
    measured = [a for a in analyses if a.reason == "ok"]
    counts = class_counts([a.spin.label for a in measured], [a.hit.player_level for a in measured])
    _write_csv(out / "class_counts.csv", counts, index=True)
    return EXIT_OK


def cmd_plot(config: PipelineConfig, args: argparse.Namespace) -> int:
    """SVG (and optionally HTML) scatter of downward acceleration against change in velocity"""
    if args.input.endswith(".jsonl"):
        scatter = scatter_from_records(read_spin_results(args.input))
    else:
        try:
            scatter = pd.read_csv(args.input)
        except (FileNotFoundError, pd.errors.EmptyDataError, pd.errors.ParserError) as e:
            raise SchemaError(f"unreadable scatter CSV ({e})", path=args.input)
    missing = {"delta_v_xy", "z_accel", "label"} - set(scatter.columns)
    if missing:
        raise SchemaError(f"scatter CSV lacks columns {sorted(missing)}", path=args.input, line=1)
    for column in ("rally_id", "frame_index", "centroid_distance", "player_level"):
        if column not in scatter.columns:
            scatter[column] = None

    out = Path(config.out_dir)
    write_spin_svg(str(out / "spin_scatter.svg"), scatter, SpinCentroids())
    if args.html:
        fig = VisualizationHelper().create_spin_scatter(scatter, SpinCentroids(), facet_by_level=args.facet_level)
        write_html(fig, str(out / "spin_scatter.html"))
    return EXIT_OK


def cmd_bench(config: PipelineConfig, args: argparse.Namespace) -> int:
    """Per-stereo-frame latency against the real-time budget; wall-clock output is not deterministic"""
    bench = config.bench
    if args.frames is not None:
        bench = replace(bench, frames=args.frames)
    if args.budget_ms is not None:
        bench = replace(bench, budget_ms=args.budget_ms)
    bench.validate()
    report = run_benchmark(replace(config, bench=bench))
    out = Path(config.out_dir)
    _write_csv(out / "bench.csv", report.stages)
    _write_json(out / "bench.json", report.summary())
    if args.html:
        write_html(VisualizationHelper().create_latency_chart(report.stages, bench.budget_ms),
                   str(out / "bench.html"))
    report.check()
    return EXIT_OK


def cmd_report(config: PipelineConfig, args: argparse.Namespace) -> int:
    """Event precision and recall, spin confusion matrix and smoothing error reduction"""
    cameras = _rig(config)
    table = _table(config)
    if config.script_path:
        scripts = load_scripts(config.script_path)
    else:
        generator = RallyGenerator(table=table, physics=config.physics, seed=config.seed,
                                   noise_sigma=config.noise_sigma, dropout=config.dropout)
        scripts = generator.generate_corpus(args.rallies if args.rallies is not None else config.n_rallies,
                                            config.hits_per_rally, config.professional_fraction)
    report = pipeline_report(scripts, config, cameras, table)
    out = Path(config.out_dir)
    _write_json(out / "report.json", report.summary())
    _write_csv(out / "confusion.csv", report.confusion, index=True)
    _write_csv(out / "class_counts.csv", report.class_counts, index=True)
    return EXIT_OK


def cmd_train_toy(config: PipelineConfig, args: argparse.Namespace) -> int:
    """Train the toy heatmap tracker and report detection AUC at 2 and 5 pixels"""
    toy = config.toy
    if args.cell:
        toy = replace(toy, cell=args.cell)
    if args.steps is not None:
        toy = replace(toy, steps=args.steps)
    toy = replace(toy, seed=config.seed)
    toy.validate()
    out = Path(config.out_dir) / "toy"
    if args.compare:
        table, results = compare_cells(toy)
        _write_csv(out / "auc.csv", table)
    else:
        train, evaluation = render_dataset(toy).split(0.2)
        results = [train_toy_tracker(train, toy, evaluation)]
    for result in results:
        result.write(str(out))
    if args.html:
        fig = VisualizationHelper().create_loss_curve({r.cell: r.history for r in results})
        write_html(fig, str(out / "loss.html"))
    return EXIT_OK


def cmd_calibrate(config: PipelineConfig, args: argparse.Namespace) -> int:
    """Fit per-class launch speed and topspin to the spin centroids"""
    table = _table(config)
    centroids = SpinCentroids()
    templates = calibrate_shot_templates(table, config.physics, centroids)
    rows = []
    for label, template in templates.items():
        delta_v, z_accel = shot_features(template, table, config.physics, config.spin)
        target = centroids.for_label(label)
        rows.append({"label": label.value, "speed": template.speed, "topspin": template.topspin,
                     "delta_v_xy": delta_v, "z_accel": z_accel,
                     "target_delta_v_xy": target[0], "target_z_accel": target[1]})
    _write_json(Path(config.out_dir) / "templates.json", {"templates": rows})
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "track": cmd_track,
    "segment": cmd_segment,
    "spin": cmd_spin,
    "plot": cmd_plot,
    "bench": cmd_bench,
    "report": cmd_report,
    "train-toy": cmd_train_toy,
    "calibrate": cmd_calibrate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spinflow",
                                     description="Stereo ball tracking, rally segmentation and spin clustering.")
    parser.add_argument("--config", "-c", type=str, default=None, help="pipeline config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", "-o", type=str, default=None, help="output directory")
    parser.add_argument("--verbose", "-v", action="count", default=0, help="-v for INFO, -vv for DEBUG")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate rallies and render detections")
    p.add_argument("--rallies", type=int, default=None, help="number of generated rallies")

    p = sub.add_parser("track", help="track 3D ball positions from detections")
    p.add_argument("detections", nargs="*", help="detection JSONL files (default: OUT/detections_*.jsonl)")
    p.add_argument("--calibration", type=str, default=None, help="rig calibration JSON")

    p = sub.add_parser("segment", help="detect bounces and returns and smooth the flight segments")
    p.add_argument("input", help="track or trajectory JSONL")
    p.add_argument("--windows", action="store_true", help="also export 30-frame training windows")

    p = sub.add_parser("spin", help="measure and classify spin per hit")
    p.add_argument("input", help="segmented trajectory JSONL")

    p = sub.add_parser("plot", help="plot the spin scatter")
    p.add_argument("input", help="scatter CSV or spin JSONL written by the spin command")
    p.add_argument("--html", action="store_true", help="also write an interactive HTML figure")
    p.add_argument("--facet-level", action="store_true", help="split the HTML figure by player level")

    p = sub.add_parser("bench", help="time the analytic pipeline per stereo frame")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--budget-ms", type=float, default=None)
    p.add_argument("--html", action="store_true")

    p = sub.add_parser("report", help="end-to-end accuracy report over simulated rallies")
    p.add_argument("--rallies", type=int, default=None)

    p = sub.add_parser("train-toy", help="train the toy recurrent heatmap tracker")
    p.add_argument("--cell", choices=("gated", "lstm", "single"), default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--compare", action="store_true", help="train every cell on the same occluded data")
    p.add_argument("--html", action="store_true")

    sub.add_parser("calibrate", help="fit shot templates to the spin centroids")
    return parser


def load_config(args: argparse.Namespace) -> PipelineConfig:
    config = PipelineConfig.from_json(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.out is not None:
        config = replace(config, out_dir=args.out)
    return config


def setup_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    try:
        config = load_config(args)
        return COMMANDS[args.command](config, args)
    except (ConfigError, SchemaError) as e:
        logger.error(str(e))
        return EXIT_USAGE
    except SpinFlowError as e:
        logger.error(f"Analysis failed: {e}")
        return EXIT_ANALYSIS
