"""
Trajectory computation for SpinFlow
Sliding-window polynomial fits, bounce and return inflection detection with
non-maxima suppression, and bootstrap smoothing of the flight segments
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils.config import TrajectoryConfig
from utils.datatypes import BounceEvent, HitEvent, TableGeometry, Trajectory3D
from utils.errors import RankDeficient
from utils.geometry import CameraCalibration, Point3D, project_many

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PolyFit:
    """x and y linear, z quadratic in time measured from t_ref

    coeffs_x, coeffs_y: (c0, c1) with x(t) = c0 + c1 (t - t_ref)
    coeffs_z: (a, b, c) with z(t) = a (t - t_ref)^2 + b (t - t_ref) + c
    """
    coeffs_x: Tuple[float, float]
    coeffs_y: Tuple[float, float]
    coeffs_z: Tuple[float, float, float]
    t_ref: float
    residual_rms: float

    def position(self, t: Union[float, np.ndarray]) -> np.ndarray:
        tl = np.asarray(t, dtype=float) - self.t_ref
        a, b, c = self.coeffs_z
        return np.stack([self.coeffs_x[0] + self.coeffs_x[1] * tl,
                         self.coeffs_y[0] + self.coeffs_y[1] * tl,
                         a * tl ** 2 + b * tl + c], axis=-1)

    @property
    def z_accel(self) -> float:
        return 2.0 * self.coeffs_z[0]


def _fit_arrays(times: np.ndarray, positions: np.ndarray) -> PolyFit:
    if len(np.unique(times)) < 3:
        raise RankDeficient(f"need 3 distinct times for the quadratic z fit, got {len(np.unique(times))}")
    t_ref = 0.5 * (times[0] + times[-1])
    tl = times - t_ref
    linear = np.stack([np.ones_like(tl), tl], axis=1)
    quadratic = np.stack([tl ** 2, tl, np.ones_like(tl)], axis=1)
    cxy, *_ = np.linalg.lstsq(linear, positions[:, :2], rcond=None)
    cz, *_ = np.linalg.lstsq(quadratic, positions[:, 2], rcond=None)

    fitted = np.column_stack([linear @ cxy, quadratic @ cz])
    rms = float(np.sqrt(np.mean(np.sum((positions - fitted) ** 2, axis=1))))
    return PolyFit(coeffs_x=(float(cxy[0, 0]), float(cxy[1, 0])),
                   coeffs_y=(float(cxy[0, 1]), float(cxy[1, 1])),
                   coeffs_z=(float(cz[0]), float(cz[1]), float(cz[2])),
                   t_ref=float(t_ref), residual_rms=rms)


def fit_window(points: Sequence[Point3D]) -> PolyFit:
    """Least-squares fit of consecutive samples, time re-centred at the window midpoint"""
    times = np.array([p.time for p in points], dtype=float)
    positions = np.array([p.position for p in points], dtype=float).reshape(-1, 3)
    if len(times) > 1 and np.any(np.diff(times) <= 0):
        raise ValueError("fit_window needs time-ordered points with distinct times")
    return _fit_arrays(times, positions)


def end_velocity(fit: PolyFit, t: float) -> np.ndarray:
    """Analytic derivative of the fit at time t"""
    tl = t - fit.t_ref
    a, b, _ = fit.coeffs_z
    return np.array([fit.coeffs_x[1], fit.coeffs_y[1], 2.0 * a * tl + b])


def window_end_velocities(times: np.ndarray, positions: np.ndarray, window: int) -> np.ndarray:
    """End-of-window velocity of every sliding window, fitted in one batch; row s covers samples s..s+window-1"""
    tw = sliding_window_view(times, window)
    tl = tw - tw.mean(axis=1, keepdims=True)
    pw = sliding_window_view(positions, window, axis=0)
    ones = np.ones_like(tl)
    linear = np.stack([tl, ones], axis=-1)
    quadratic = np.stack([tl ** 2, tl, ones], axis=-1)
    cxy = np.linalg.pinv(linear) @ np.transpose(pw[:, :2, :], (0, 2, 1))
    cz = np.linalg.pinv(quadratic) @ pw[:, 2, :, None]
    t_end = tl[:, -1]
    return np.column_stack([cxy[:, 0, 0], cxy[:, 0, 1], 2.0 * cz[:, 0, 0] * t_end + cz[:, 1, 0]])


def finite_difference_velocities(times: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Central differences inside, one-sided at the two ends"""
    velocity = np.empty_like(positions)
    if len(times) < 2:
        velocity[:] = 0.0
        return velocity
    velocity[1:-1] = (positions[2:] - positions[:-2]) / (times[2:] - times[:-2])[:, None]
    velocity[0] = (positions[1] - positions[0]) / (times[1] - times[0])
    velocity[-1] = (positions[-1] - positions[-2]) / (times[-1] - times[-2])
    return velocity


def _sign_changes(track: Trajectory3D, axis: int, window: int,
                  downward_only: bool) -> List[Tuple[int, int, np.ndarray, np.ndarray]]:
    """(sample index, first flipped index j, end velocity, velocity at j) per window whose
    end velocity disagrees in sign with one of the next `window` finite-difference velocities"""
    times, positions = track.times, track.positions
    v_end = window_end_velocities(times, positions, window)
    v_fd = finite_difference_velocities(times, positions)
    found = []
    for s in range(len(track) - 2 * window + 1):
        last = s + window - 1
        before = v_end[s, axis]
        if downward_only and before >= 0:
            continue
        ahead = v_fd[s + window:s + 2 * window, axis]
        flipped = np.flatnonzero(np.sign(ahead) != np.sign(before))
        if not len(flipped):
            continue
        j = s + window + int(flipped[0])
        if downward_only:
            # lowest sample between the window end and the first upward one
            k = last + int(np.argmin(positions[last:j + 1, 2]))
        else:
            # turning point: the sample furthest along the incoming direction
            k = last + int(np.argmax(np.sign(before) * positions[last:j + 1, axis]))
        found.append((k, j, v_end[s], v_fd[j]))
    return found


def _non_max_suppression(candidates: List[Tuple[float, int, object]], radius: int) -> List[object]:
    """Keep the lowest-score candidate per `radius`-frame neighbourhood"""
    kept: List[Tuple[float, int, object]] = []
    for score, frame, item in sorted(candidates, key=lambda c: (c[0], c[1])):
        if all(abs(frame - other) >= radius for _, other, _ in kept):
            kept.append((score, frame, item))
    return [item for _, _, item in sorted(kept, key=lambda c: c[1])]


def detect_bounces(track: Trajectory3D, table: TableGeometry,
                   config: Optional[TrajectoryConfig] = None) -> List[BounceEvent]:
    """Downward-to-upward flips of v_z near the table surface, inside the table x-y bounds, after NMS"""
    config = config or TrajectoryConfig()
    if len(track) < 2 * config.window:
        return []
    candidates = []
    for k, _, pre, post in _sign_changes(track, 2, config.window, downward_only=True):
        x, y, z = track.positions[k]
        height = abs(z - table.surface_height)
        if height > config.bounce_height_tolerance or not table.contains(x, y):
            continue
        frame = int(track.frame_index[k])
        event = BounceEvent(frame_index=frame, time=float(track.times[k]), position=track.positions[k].copy(),
                            pre_velocity=pre.copy(), post_velocity=post.copy())
        candidates.append((height, frame, event))
    bounces = _non_max_suppression(candidates, config.nms_radius_frames)
    logger.debug(f"Rally {track.rally_id}: {len(candidates)} bounce candidates, {len(bounces)} after NMS")
    return bounces


def _y_direction(bounce: BounceEvent) -> float:
    return float(np.sign(bounce.pre_velocity[1] + bounce.post_velocity[1]))


def detect_returns(track: Trajectory3D, bounces: Sequence[BounceEvent],
                   config: Optional[TrajectoryConfig] = None) -> List[HitEvent]:
    """y-velocity flips, at most one per interval between bounces travelling in opposite y directions"""
    config = config or TrajectoryConfig()
    if len(track) < 2 * config.window:
        return []
    boundaries = [(b.frame_index, _y_direction(b), _y_direction(b)) for b in bounces]
    if config.end_as_inflection and len(boundaries) >= 1:
        v_fd = finite_difference_velocities(track.times, track.positions)
        end_direction = float(np.sign(v_fd[-1, 1]))
        boundaries.append((int(track.frame_index[-1]) + 1, end_direction, end_direction))
    if len(boundaries) < 2:
        return []

    candidates = _sign_changes(track, 1, config.window, downward_only=False)
    hits = []
    for (start, _, leaving), (end, arriving, _) in zip(boundaries, boundaries[1:]):
        if leaving == arriving:
            continue
        best = None
        for k, _, pre, post in candidates:
            frame = int(track.frame_index[k])
            if not start < frame < end:
                continue
            jump = abs(post[1] - pre[1])
            if best is None or jump > best[0]:
                best = (jump, k, pre, post)
        if best is None:
            continue
        _, k, pre, post = best
        hits.append(HitEvent(frame_index=int(track.frame_index[k]), time=float(track.times[k]),
                             position=track.positions[k].copy(), pre_velocity=pre.copy(),
                             post_velocity=post.copy()))
    return hits


def bootstrap_smooth(segment: Trajectory3D, config: Optional[TrajectoryConfig] = None,
                     seed: Optional[int] = None) -> Trajectory3D:
    """Average of random-subset polynomial fits over sliding windows; timestamps are untouched"""
    config = config or TrajectoryConfig()
    seed = config.seed if seed is None else seed
    n = len(segment)
    k = config.subset_size
    if n < k:
        logger.debug(f"Segment of {n} samples is shorter than the {k}-point subset, left unsmoothed")
        return segment

    width = min(config.smooth_window, n)
    times, positions = segment.times, segment.positions
    totals = np.zeros_like(positions)
    counts = np.zeros(n)
    order = np.tile(np.arange(width), (config.bootstrap_samples, 1))
    for start in range(n - width + 1):
        rng = np.random.default_rng([seed, segment.rally_id, int(segment.frame_index[start])])
        picks = rng.permuted(order, axis=1)[:, :k]

        tw = times[start:start + width]
        tl = tw - tw.mean()
        pw = positions[start:start + width]
        ts = tl[picks]
        ps = pw[picks]
        ones = np.ones_like(ts)
        cxy = np.linalg.pinv(np.stack([ts, ones], axis=-1)) @ ps[:, :, :2]
        cz = np.linalg.pinv(np.stack([ts ** 2, ts, ones], axis=-1)) @ ps[:, :, 2:]

        at = np.ones_like(tl)
        xy = np.stack([tl, at], axis=-1) @ cxy
        z = np.stack([tl ** 2, tl, at], axis=-1) @ cz
        totals[start:start + width] += np.concatenate([xy, z], axis=-1).mean(axis=0)
        counts[start:start + width] += 1
    return segment.with_positions(totals / counts[:, None])


def segment_rally(track: Trajectory3D, table: TableGeometry, config: Optional[TrajectoryConfig] = None,
                  smooth: bool = True) -> Trajectory3D:
    """Detect bounces and returns, then smooth every segment strictly between consecutive events"""
    config = config or TrajectoryConfig()
    if len(track) == 0:
        return Trajectory3D.empty(source=track.source, rally_id=track.rally_id)

    bounces = detect_bounces(track, table, config)
    hits = detect_returns(track, bounces, config)
    events = sorted(bounces + hits, key=lambda e: e.frame_index)

    positions = track.positions.copy()
    if smooth:
        edges = [-np.inf] + [e.frame_index for e in events] + [np.inf]
        for start, end in zip(edges, edges[1:]):
            mask = (track.frame_index > start) & (track.frame_index < end)
            if np.count_nonzero(mask) >= config.subset_size:
                positions[mask] = bootstrap_smooth(track.subset(mask), config).positions

    logger.info(f"Rally {track.rally_id}: {len(bounces)} bounces, {len(hits)} returns over {len(track)} samples")
    return Trajectory3D(frame_index=track.frame_index, positions=positions, events=tuple(events),
                        source=track.source, rally_id=track.rally_id)


@dataclass(frozen=True, eq=False)
class TrainingWindow:
    """Consecutive-frame 2D tracking targets cut from a smoothed trajectory"""
    rally_id: int
    start_frame: int
    frames: np.ndarray
    pixels: Dict[str, np.ndarray]


def sample_training_windows(trajectory: Trajectory3D, cameras: Sequence[CameraCalibration],
                            length: int = 30, stride: int = 15) -> List[TrainingWindow]:
    """Windows of `length` consecutive frames every `stride` frames, projected into each camera"""
    windows = []
    frames = trajectory.frame_index
    for start in range(0, len(trajectory) - length + 1, stride):
        span = frames[start:start + length]
        if span[-1] - span[0] != length - 1:
            continue
        pixels = {}
        for camera in cameras:
            uv, depth = project_many(trajectory.positions[start:start + length], camera)
            if np.any(depth <= 0):
                break
            pixels[camera.camera_id] = uv
        else:
            windows.append(TrainingWindow(rally_id=trajectory.rally_id, start_frame=int(span[0]),
                                          frames=span.copy(), pixels=pixels))
    return windows
