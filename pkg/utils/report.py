"""
End-to-end evaluation for SpinFlow
Runs scripted rallies through rendering, tracking, segmentation and spin
analysis, then scores event detection against the simulator tags, tabulates
the spin confusion matrix and measures how much smoothing reduces error
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from utils.config import PipelineConfig
from utils.datatypes import SpinLabel, TableGeometry, Trajectory3D
from utils.geometry import CameraCalibration, default_test_rig
from utils.simulator import RallyScript, render_detections, simulate_rally
from utils.spin import HitAnalysis, analyze_rally, class_counts, confusion_matrix
from utils.tracker import StereoTracker, stitch_tracks
from utils.trajectory import segment_rally

logger = logging.getLogger(__name__)

EVENT_TOLERANCE_FRAMES = 2


@dataclass
class EventScore:
    kind: str
    true_positives: int = 0
    false_positives: int = 0
    false_negatives: int = 0
    frame_errors: List[int] = field(default_factory=list)

    @property
    def precision(self) -> float:
        found = self.true_positives + self.false_positives
        return self.true_positives / found if found else 1.0

    @property
    def recall(self) -> float:
        expected = self.true_positives + self.false_negatives
        return self.true_positives / expected if expected else 1.0

    @property
    def max_frame_error(self) -> int:
        return max(self.frame_errors, default=0)

    def add(self, other: "EventScore") -> None:
        self.true_positives += other.true_positives
        self.false_positives += other.false_positives
        self.false_negatives += other.false_negatives
        self.frame_errors.extend(other.frame_errors)

    def to_dict(self) -> Dict:
        return {"kind": self.kind, "true_positives": self.true_positives,
                "false_positives": self.false_positives, "false_negatives": self.false_negatives,
                "precision": round(self.precision, 6), "recall": round(self.recall, 6),
                "max_frame_error": self.max_frame_error}


def match_frames(truth: Sequence[int], detected: Sequence[int],
                 tolerance: int = EVENT_TOLERANCE_FRAMES) -> List[Tuple[int, int]]:
    """One-to-one (truth index, detected index) pairs within `tolerance` frames, closest pairs first"""
    pairs = sorted((abs(d - t), i, j) for i, t in enumerate(truth) for j, d in enumerate(detected)
                   if abs(d - t) <= tolerance)
    used_t, used_d, matched = set(), set(), []
    for _, i, j in pairs:
        if i in used_t or j in used_d:
            continue
        used_t.add(i)
        used_d.add(j)
        matched.append((i, j))
    return sorted(matched)


def score_events(truth: Trajectory3D, detected: Trajectory3D, kind: str,
                 tolerance: int = EVENT_TOLERANCE_FRAMES) -> EventScore:
    truth_frames = [e.frame_index for e in truth.events if e.kind == kind]
    found_frames = [e.frame_index for e in detected.events if e.kind == kind]
    matched = match_frames(truth_frames, found_frames, tolerance)
    return EventScore(kind=kind, true_positives=len(matched),
                      false_positives=len(found_frames) - len(matched),
                      false_negatives=len(truth_frames) - len(matched),
                      frame_errors=[abs(found_frames[j] - truth_frames[i]) for i, j in matched])


def position_errors(truth: Trajectory3D, estimate: Trajectory3D) -> np.ndarray:
    """Euclidean error at every estimate frame that the truth also covers"""
    common, ti, ei = np.intersect1d(truth.frame_index, estimate.frame_index, return_indices=True)
    return np.linalg.norm(estimate.positions[ei] - truth.positions[ti], axis=1)


@dataclass(frozen=True, eq=False)
class RallyOutcome:
    truth: Trajectory3D
    tracked: Trajectory3D
    segmented: Trajectory3D
    analyses: List[HitAnalysis]


def run_rally(script: RallyScript, config: PipelineConfig, cameras: Sequence[CameraCalibration],
              table: TableGeometry) -> RallyOutcome:
    """Simulate, render, track, stitch, segment and classify one scripted rally"""
    cam_l, cam_r = cameras[0], cameras[1]
    truth = simulate_rally(script, table, config.physics)
    streams = render_detections(truth, (cam_l, cam_r), script.detection_noise_sigma,
                                script.dropout_probability, script.rng_seed)
    tracks = StereoTracker(cam_l, cam_r, config.tracker, config.geometry).run(streams)
    tracked = stitch_tracks(tracks, rally_id=script.rally_id)
    segmented = segment_rally(tracked, table, config.trajectory, smooth=config.smooth)
    return RallyOutcome(truth=truth, tracked=tracked, segmented=segmented,
                        analyses=analyze_rally(segmented, config.spin))


@dataclass(frozen=True, eq=False)
class PipelineReport:
    rallies: int
    events: Dict[str, EventScore]
    confusion: pd.DataFrame
    class_counts: pd.DataFrame
    rmse_tracked: float
    rmse_smoothed: float

    @property
    def rmse_reduction(self) -> float:
        if not self.rmse_tracked > 0:
            return 0.0
        return 1.0 - self.rmse_smoothed / self.rmse_tracked

    def summary(self) -> Dict:
        return {
            "rallies": self.rallies,
            "events": {kind: score.to_dict() for kind, score in sorted(self.events.items())},
            "spin_hits_classified": int(self.confusion.to_numpy().sum()),
            "rmse_tracked_m": round(self.rmse_tracked, 9),
            "rmse_smoothed_m": round(self.rmse_smoothed, 9),
            "rmse_reduction": round(self.rmse_reduction, 6),
        }


def _scripted_labels(outcome: RallyOutcome, tolerance: int) -> Tuple[List[SpinLabel], List[SpinLabel], List[str]]:
    """Pairs each classified hit with the simulator hit it was detected for"""
    truth_hits = outcome.truth.hits
    measured = [a for a in outcome.analyses if a.reason == "ok"]
    matched = match_frames([h.frame_index for h in truth_hits], [a.hit.frame_index for a in measured], tolerance)
    scripted, predicted, levels = [], [], []
    for i, j in matched:
        scripted.append(truth_hits[i].label)
        predicted.append(measured[j].spin.label)
        levels.append(truth_hits[i].player_level)
    return scripted, predicted, levels


def pipeline_report(scripts: Sequence[RallyScript], config: Optional[PipelineConfig] = None,
                    cameras: Optional[Sequence[CameraCalibration]] = None,
                    table: Optional[TableGeometry] = None,
                    tolerance: int = EVENT_TOLERANCE_FRAMES) -> PipelineReport:
    config = config or PipelineConfig()
    cameras = cameras or default_test_rig()
    table = table or TableGeometry()

    events = {"bounce": EventScore("bounce"), "hit": EventScore("hit")}
    scripted, predicted, levels = [], [], []
    sq_tracked, sq_smoothed, count = 0.0, 0.0, 0
    for script in scripts:
        outcome = run_rally(script, config, cameras, table)
        for kind, score in events.items():
            score.add(score_events(outcome.truth, outcome.segmented, kind, tolerance))
        s, p, l = _scripted_labels(outcome, tolerance)
        scripted += s
        predicted += p
        levels += l
        tracked_err = position_errors(outcome.truth, outcome.tracked)
        smoothed_err = position_errors(outcome.truth, outcome.segmented)
        sq_tracked += float(np.sum(tracked_err ** 2))
        sq_smoothed += float(np.sum(smoothed_err ** 2))
        count += len(tracked_err)

    report = PipelineReport(
        rallies=len(scripts), events=events,
        confusion=confusion_matrix(scripted, predicted),
        class_counts=class_counts(predicted, levels),
        rmse_tracked=math.sqrt(sq_tracked / count) if count else 0.0,
        rmse_smoothed=math.sqrt(sq_smoothed / count) if count else 0.0,
    )
    logger.info(f"Report over {len(scripts)} rallies: bounce P/R {events['bounce'].precision:.3f}/"
                f"{events['bounce'].recall:.3f}, hit P/R {events['hit'].precision:.3f}/{events['hit'].recall:.3f}, "
                f"smoothing RMSE reduction {report.rmse_reduction:.1%}")
    return report
