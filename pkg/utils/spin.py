"""
Spin measurement for SpinFlow
Two dynamics features per hit, the change in horizontal speed across the
following bounce and the downward acceleration of the flight into it,
classified by nearest centroid
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from utils.config import FRAME_DT, SpinConfig
from utils.datatypes import SCRIPTED_LABELS, BounceEvent, HitEvent, SpinLabel, Trajectory3D
from utils.errors import InsufficientContext, SegmentTooShort

logger = logging.getLogger(__name__)

TABLE_COLUMNS = [label.cluster_name for label in SpinLabel]


@dataclass(frozen=True)
class SpinFeatures:
    delta_v_xy: float
    z_accel: float

    def __post_init__(self):
        if not (math.isfinite(self.delta_v_xy) and math.isfinite(self.z_accel)):
            raise ValueError(f"spin features must be finite, got ({self.delta_v_xy}, {self.z_accel})")

    def as_array(self) -> np.ndarray:
        return np.array([self.delta_v_xy, self.z_accel])


@dataclass(frozen=True)
class SpinClass:
    label: SpinLabel
    centroid_distance: float


@dataclass(frozen=True)
class SpinCentroids:
    """(delta_v_xy m/s, z_accel m/s^2) per cluster"""
    no_spin: Tuple[float, float] = (-0.64, -9.5)
    light_topspin: Tuple[float, float] = (-0.9, -17.5)
    heavy_topspin: Tuple[float, float] = (0.016, -24.0)

    def for_label(self, label: SpinLabel) -> Tuple[float, float]:
        return self.as_dict()[label]

    def as_dict(self) -> Dict[SpinLabel, Tuple[float, float]]:
        return {
            SpinLabel.NO_SPIN: self.no_spin,
            SpinLabel.LIGHT_TOPSPIN: self.light_topspin,
            SpinLabel.HEAVY_TOPSPIN: self.heavy_topspin,
        }


@dataclass(frozen=True)
class HitAnalysis:
    """Spin result for one hit; `reason` is "ok" unless the hit could not be measured"""
    rally_id: int
    hit: HitEvent
    features: Optional[SpinFeatures]
    spin: SpinClass
    reason: str = "ok"
    landing: Optional[Tuple[float, float]] = None


def _xy_at(traj: Trajectory3D, frame: float) -> np.ndarray:
    return np.array([np.interp(frame, traj.frame_index, traj.positions[:, axis]) for axis in (0, 1)])


def bounce_velocity_change(traj: Trajectory3D, bounce: BounceEvent, context_frames: int = 10) -> float:
    """Horizontal speed over the `context_frames` after the bounce minus over the ones before"""
    frame = bounce.frame_index
    if len(traj) == 0 or traj.frame_index[0] > frame - context_frames or traj.frame_index[-1] < frame + context_frames:
        raise InsufficientContext(f"bounce at frame {frame} lacks {context_frames} frames on both sides")
    span = context_frames * FRAME_DT
    before = _xy_at(traj, frame - context_frames)
    at = _xy_at(traj, frame)
    after = _xy_at(traj, frame + context_frames)
    return float(np.linalg.norm(after - at) / span - np.linalg.norm(at - before) / span)


def downward_acceleration(segment: Trajectory3D, trim_frames: int = 5) -> float:
    """2a of a quadratic fit to z(t) after dropping `trim_frames` samples at each end"""
    needed = 2 * trim_frames + 4
    if len(segment) < needed:
        raise SegmentTooShort(f"flight segment has {len(segment)} samples, needs {needed}")
    keep = slice(trim_frames, len(segment) - trim_frames)
    t = segment.times[keep]
    z = segment.positions[keep, 2]
    a, _, _ = np.polyfit(t - t.mean(), z, 2)
    return float(2.0 * a)


def classify_spin(features: SpinFeatures, centroids: Optional[SpinCentroids] = None,
                  rejection_radius: float = 6.0) -> SpinClass:
    """Nearest centroid in raw (delta_v_xy, z_accel) units; NoCluster beyond the rejection radius.
    Exact ties go to the first of NoSpin, LightTopspin, HeavyTopspin"""
    centroids = centroids or SpinCentroids()
    point = features.as_array()
    labels = list(centroids.as_dict())
    distances = [float(np.linalg.norm(point - np.array(c))) for c in centroids.as_dict().values()]
    best = int(np.argmin(distances))
    if distances[best] > rejection_radius:
        return SpinClass(SpinLabel.NO_CLUSTER, distances[best])
    return SpinClass(labels[best], distances[best])


def _unmeasured(rally_id: int, hit: HitEvent, reason: str,
                landing: Optional[Tuple[float, float]] = None) -> HitAnalysis:
    return HitAnalysis(rally_id=rally_id, hit=hit, features=None,
                       spin=SpinClass(SpinLabel.NO_CLUSTER, math.inf), reason=reason, landing=landing)


def analyze_rally(traj: Trajectory3D, config: Optional[SpinConfig] = None,
                  centroids: Optional[SpinCentroids] = None) -> List[HitAnalysis]:
    """Features and class for every hit that is followed by a bounce"""
    config = config or SpinConfig()
    events = list(traj.events)
    results = []
    for i, event in enumerate(events):
        if not isinstance(event, HitEvent):
            continue
        following = events[i + 1] if i + 1 < len(events) else None
        if not isinstance(following, BounceEvent):
            results.append(_unmeasured(traj.rally_id, event, "no_bounce"))
            continue

        landing = (float(following.position[0]), float(following.position[1]))
        try:
            delta_v = bounce_velocity_change(traj, following, config.context_frames)
            z_accel = downward_acceleration(traj.between(event.frame_index, following.frame_index),
                                            config.trim_frames)
        except InsufficientContext:
            results.append(_unmeasured(traj.rally_id, event, "insufficient_context", landing))
            continue
        except SegmentTooShort:
            results.append(_unmeasured(traj.rally_id, event, "segment_too_short", landing))
            continue

        features = SpinFeatures(delta_v_xy=delta_v, z_accel=z_accel)
        spin = classify_spin(features, centroids, config.rejection_radius)
        results.append(HitAnalysis(rally_id=traj.rally_id, hit=event, features=features, spin=spin,
                                   landing=landing))

    skipped = sum(r.reason != "ok" for r in results)
    if skipped:
        logger.warning(f"Rally {traj.rally_id}: {skipped} of {len(results)} hits could not be measured")
    return results


def scatter_frame(analyses: Sequence[HitAnalysis]) -> pd.DataFrame:
    """One row per hit, the layout of the spin scatter CSV"""
    rows = []
    for a in analyses:
        rows.append({
            "rally_id": a.rally_id,
            "frame_index": a.hit.frame_index,
            "time": a.hit.time,
            "delta_v_xy": a.features.delta_v_xy if a.features else np.nan,
            "z_accel": a.features.z_accel if a.features else np.nan,
            "label": a.spin.label.value,
            "centroid_distance": a.spin.centroid_distance,
            "reason": a.reason,
            "landing_x": a.landing[0] if a.landing else np.nan,
            "landing_y": a.landing[1] if a.landing else np.nan,
            "scripted_label": a.hit.label.value if a.hit.label else None,
            "player_level": a.hit.player_level,
        })
    columns = ["rally_id", "frame_index", "time", "delta_v_xy", "z_accel", "label", "centroid_distance",
               "reason", "landing_x", "landing_y", "scripted_label", "player_level"]
    return pd.DataFrame(rows, columns=columns)


def class_counts(labels: Sequence[SpinLabel], levels: Optional[Sequence[Optional[str]]] = None) -> pd.DataFrame:
    """Hit counts per cluster, one row for all hits plus one per player level when levels are given"""
    if len(labels) == 0:
        return pd.DataFrame([[0] * len(TABLE_COLUMNS)], index=["all"], columns=TABLE_COLUMNS)
    frame = pd.DataFrame({
        "cluster": pd.Categorical([SpinLabel(l).cluster_name for l in labels], categories=TABLE_COLUMNS),
        "level": [level or "unknown" for level in levels] if levels is not None else ["all"] * len(labels),
    })
    counts = pd.crosstab(frame["level"], frame["cluster"], dropna=False).reindex(columns=TABLE_COLUMNS, fill_value=0)
    if levels is not None:
        counts.loc["all"] = counts.sum(axis=0)
    counts.index.name = None
    counts.columns.name = None
    return counts.astype(int)


def confusion_matrix(scripted: Sequence[SpinLabel], predicted: Sequence[SpinLabel]) -> pd.DataFrame:
    """Rows are scripted classes, columns predicted classes including NoCluster"""
    rows = [label.value for label in SCRIPTED_LABELS]
    cols = [label.value for label in SpinLabel]
    matrix = pd.crosstab(pd.Categorical([SpinLabel(s).value for s in scripted], categories=rows),
                         pd.Categorical([SpinLabel(p).value for p in predicted], categories=cols),
                         dropna=False)
    matrix = matrix.reindex(index=rows, columns=cols, fill_value=0)
    matrix.index.name = "scripted"
    matrix.columns.name = "predicted"
    return matrix.astype(int)
