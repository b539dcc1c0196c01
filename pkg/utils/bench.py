"""
Real-time benchmark for SpinFlow
Times stereo triangulation, tracking and amortised segmentation per stereo
frame over a generated multi-ball corpus and checks the p99 frame latency
against the 150 fps budget
"""

import logging
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from utils.config import BenchConfig, PipelineConfig
from utils.data_generator import RallyGenerator
from utils.datatypes import TableGeometry, Trajectory3D
from utils.errors import BallOutOfPlay, BudgetExceeded, ConfigError
from utils.geometry import CameraCalibration, Detection2D, default_test_rig, match_stereo_pairs
from utils.simulator import render_scene, simulate_rally
from utils.tracker import StereoTracker
from utils.trajectory import segment_rally

logger = logging.getLogger(__name__)

STAGES = ("triangulation", "tracking", "segmentation", "total")
RECENT_FRAMES = 300


@dataclass(frozen=True, eq=False)
class BenchReport:
    stages: pd.DataFrame
    frames: int
    balls: int
    fps: float
    budget_ms: float

    @property
    def p99_ms(self) -> float:
        return float(self.stages.set_index("stage").loc["total", "p99_ms"])

    @property
    def passed(self) -> bool:
        return self.p99_ms <= self.budget_ms

    def check(self) -> None:
        if not self.passed:
            raise BudgetExceeded(self.p99_ms, self.budget_ms)

    def summary(self) -> Dict:
        return {"frames": self.frames, "balls": self.balls, "fps": round(self.fps, 1),
                "budget_ms": self.budget_ms, "p99_ms": round(self.p99_ms, 4), "passed": self.passed}


def _shifted(truth: Trajectory3D, offset: int, rally_id: int) -> Trajectory3D:
    return Trajectory3D(frame_index=truth.frame_index - truth.frame_index[0] + offset, positions=truth.positions,
                        source=truth.source, rally_id=rally_id)


def bench_corpus(config: BenchConfig, seed: int = 0, table: Optional[TableGeometry] = None,
                 cameras: Optional[Sequence[CameraCalibration]] = None) -> Dict[str, List[Detection2D]]:
    """Back-to-back rallies for each ball, rendered into one stereo detection stream"""
    if config.frames <= 0:
        raise ConfigError("bench.frames is 0: the benchmark corpus would be empty")
    table = table or TableGeometry()
    cameras = cameras or default_test_rig()
    generator = RallyGenerator(table=table, seed=seed, noise_sigma=config.noise_sigma)
    truths = []
    rally_id = 0
    for ball in range(config.balls):
        # stagger the balls so their serves do not coincide
        offset = ball * 37
        while offset < config.frames:
            try:
                truth = simulate_rally(generator.generate_rally(rally_id=rally_id, n_hits=4), table)
            except BallOutOfPlay as e:
                logger.debug(f"Skipping benchmark rally {rally_id}: {e}")
                rally_id += 1
                continue
            truths.append(_shifted(truth, offset, rally_id))
            offset += len(truth) + 20
            rally_id += 1
    streams = render_scene(truths, cameras, config.noise_sigma, 0.0, seed)
    streams = {cam: [d for d in dets if d.frame_index < config.frames] for cam, dets in streams.items()}
    logger.info(f"Benchmark corpus: {config.balls} balls, {rally_id} rallies, {config.frames} frames")
    return streams


def _recent_mask(track, frame: int) -> np.ndarray:
    return track.frames > frame - RECENT_FRAMES


def _percentiles(samples_ms: np.ndarray) -> Dict[str, float]:
    series = pd.Series(samples_ms)
    return {"mean_ms": float(series.mean()), "p50_ms": float(series.quantile(0.5)),
            "p99_ms": float(series.quantile(0.99))}


def run_benchmark(config: Optional[PipelineConfig] = None,
                  streams: Optional[Dict[str, List[Detection2D]]] = None,
                  cameras: Optional[Sequence[CameraCalibration]] = None) -> BenchReport:
    """Wall-clock latency of the analytic pipeline per stereo frame"""
    config = config or PipelineConfig()
    bench = config.bench
    table = TableGeometry()
    cam_l, cam_r = cameras or default_test_rig()
    streams = streams if streams is not None else bench_corpus(bench, config.seed, table, (cam_l, cam_r))
    left: Dict[int, List[Detection2D]] = {}
    right: Dict[int, List[Detection2D]] = {}
    for det in streams.get(cam_l.camera_id, []):
        left.setdefault(det.frame_index, []).append(det)
    for det in streams.get(cam_r.camera_id, []):
        right.setdefault(det.frame_index, []).append(det)
    n_frames = max(list(left) + list(right), default=-1) + 1
    if n_frames == 0:
        raise ConfigError("benchmark corpus has no detections")

    tracker = StereoTracker(cam_l, cam_r, config.tracker, config.geometry)
    timings = np.zeros((n_frames, 3))
    started = time.perf_counter()
    for frame in range(n_frames):
        t0 = time.perf_counter()
        l_dets, r_dets = left.get(frame, []), right.get(frame, [])
        matches = []
        if l_dets and r_dets:
            matches = match_stereo_pairs(l_dets, r_dets, cam_l, cam_r, config.geometry.reprojection_gate_px)
        t1 = time.perf_counter()
        tracker.associate_and_step(frame, matches)
        t2 = time.perf_counter()
        timings[frame, 0] = t1 - t0
        timings[frame, 1] = t2 - t1

        if (frame + 1) % bench.segment_every == 0:
            t3 = time.perf_counter()
            for track in tracker.live_tracks:
                recent = track.to_trajectory().subset(_recent_mask(track, frame))
                segment_rally(recent, table, config.trajectory, smooth=config.smooth)
            block = slice(frame + 1 - bench.segment_every, frame + 1)
            timings[block, 2] += (time.perf_counter() - t3) / bench.segment_every
    elapsed = time.perf_counter() - started

    timings_ms = timings * 1000.0
    rows = [{"stage": name, **_percentiles(timings_ms[:, k])} for k, name in enumerate(STAGES[:3])]
    rows.append({"stage": "total", **_percentiles(timings_ms.sum(axis=1))})
    report = BenchReport(stages=pd.DataFrame(rows, columns=["stage", "mean_ms", "p50_ms", "p99_ms"]),
                         frames=n_frames, balls=bench.balls, fps=n_frames / elapsed if elapsed > 0 else float("inf"),
                         budget_ms=bench.budget_ms)
    logger.info(f"Benchmark: {n_frames} frames at {report.fps:.0f} fps, p99 {report.p99_ms:.3f} ms "
                f"(budget {bench.budget_ms} ms)")
    return report
