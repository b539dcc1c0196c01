"""
Tracking by detection for SpinFlow
Stereo pairs gated by reprojection error are triangulated and chained into 3D
tracks with a constant-velocity Kalman filter; gravity is a known control input
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from utils.config import FRAME_DT, GeometryConfig, TrackerConfig
from utils.datatypes import Trajectory3D
from utils.errors import SingularInnovation
from utils.geometry import CameraCalibration, Detection2D, Point3D, StereoMatch, match_stereo_pairs

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-12


class TrackStatus(str, Enum):
    ACTIVE = "Active"
    COASTING = "Coasting"
    DEAD = "Dead"


@dataclass(frozen=True, eq=False)
class KalmanState:
    """Position and velocity (6-vector) with covariance, as of `last_update_frame`"""
    mean: np.ndarray
    covariance: np.ndarray
    last_update_frame: int

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(6)
        cov = np.array(self.covariance, dtype=float).reshape(6, 6)
        if np.max(np.abs(cov - cov.T)) > SYMMETRY_TOL * max(1.0, np.max(np.abs(cov))):
            raise ValueError("covariance is not symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("covariance is not positive-definite")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def position(self) -> np.ndarray:
        return self.mean[:3]

    @property
    def velocity(self) -> np.ndarray:
        return self.mean[3:]


def _transition(dt: float) -> np.ndarray:
    F = np.eye(6)
    F[:3, 3:] = dt * np.eye(3)
    return F


def _process_noise(dt: float, sigma_accel: float) -> np.ndarray:
    """Discrete white-acceleration noise for one axis block per coordinate"""
    q = sigma_accel ** 2
    Q = np.zeros((6, 6))
    Q[:3, :3] = 0.25 * dt ** 4 * q * np.eye(3)
    Q[:3, 3:] = Q[3:, :3] = 0.5 * dt ** 3 * q * np.eye(3)
    Q[3:, 3:] = dt ** 2 * q * np.eye(3)
    return Q


def kf_predict(state: KalmanState, dt: float, config: Optional[TrackerConfig] = None) -> KalmanState:
    """Constant-velocity transition with gravity as control input on z"""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    config = config or TrackerConfig()
    F = _transition(dt)
    mean = F @ state.mean
    if config.use_gravity:
        mean[2] -= 0.5 * config.gravity * dt ** 2
        mean[5] -= config.gravity * dt
    cov = F @ state.covariance @ F.T + _process_noise(dt, config.process_noise_accel)
    return KalmanState(mean=mean, covariance=0.5 * (cov + cov.T), last_update_frame=state.last_update_frame)


def _innovation(state: KalmanState, position: np.ndarray, R: np.ndarray):
    residual = np.asarray(position, dtype=float) - state.mean[:3]
    S = state.covariance[:3, :3] + R
    try:
        factor = cho_factor(S)
    except (LinAlgError, ValueError):
        raise SingularInnovation("innovation covariance is not positive-definite")
    return residual, factor


def mahalanobis_sq(state: KalmanState, position: np.ndarray, R: np.ndarray) -> float:
    """Squared Mahalanobis distance of a position measurement from the state"""
    residual, factor = _innovation(state, position, R)
    return float(residual @ cho_solve(factor, residual))


def kf_update(state: KalmanState, measurement: Point3D, R: np.ndarray,
              frame_index: Optional[int] = None) -> Tuple[KalmanState, float]:
    """Position-only correction in Joseph form; returns the posterior and the squared Mahalanobis distance"""
    R = np.asarray(R, dtype=float)
    residual, factor = _innovation(state, measurement.position, R)
    P = state.covariance
    K = cho_solve(factor, P[:3, :]).T
    mean = state.mean + K @ residual

    H = np.zeros((3, 6))
    H[:, :3] = np.eye(3)
    A = np.eye(6) - K @ H
    cov = A @ P @ A.T + K @ R @ K.T
    frame = int(round(measurement.time / FRAME_DT)) if frame_index is None else frame_index
    posterior = KalmanState(mean=mean, covariance=0.5 * (cov + cov.T), last_update_frame=frame)
    return posterior, float(residual @ cho_solve(factor, residual))


@dataclass(eq=False)
class Track:
    track_id: int
    states: List[KalmanState] = field(default_factory=list)
    points: List[Point3D] = field(default_factory=list)
    status: TrackStatus = TrackStatus.ACTIVE

    @property
    def state(self) -> KalmanState:
        return self.states[-1]

    @property
    def frames(self) -> np.ndarray:
        return np.array([s.last_update_frame for s in self.states], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.states)

    def append(self, state: KalmanState, point: Point3D) -> None:
        if self.status is TrackStatus.DEAD:
            raise RuntimeError(f"track {self.track_id} is dead")
        if self.states and state.last_update_frame <= self.state.last_update_frame:
            raise ValueError(f"track {self.track_id}: frame {state.last_update_frame} is not after "
                             f"{self.state.last_update_frame}")
        self.states.append(state)
        self.points.append(point)
        self.status = TrackStatus.ACTIVE

    def to_trajectory(self, rally_id: int = 0) -> Trajectory3D:
        return Trajectory3D(frame_index=self.frames, positions=np.array([s.position for s in self.states]),
                            source="tracked", rally_id=rally_id)


class StereoTracker:
    """Single-owner multi-track state, stepped once per frame in frame order"""

    def __init__(self, cam_l: CameraCalibration, cam_r: CameraCalibration,
                 config: Optional[TrackerConfig] = None, geometry: Optional[GeometryConfig] = None):
        self.cam_l = cam_l
        self.cam_r = cam_r
        self.config = config or TrackerConfig()
        self.geometry = geometry or GeometryConfig()
        self.R = self.config.measurement_sigma ** 2 * np.eye(3)
        self.tracks: List[Track] = []
        self._next_id = 0
        self._last_frame: Optional[int] = None

    @property
    def live_tracks(self) -> List[Track]:
        return [t for t in self.tracks if t.status is not TrackStatus.DEAD]

    def _birth(self, match: StereoMatch) -> Track:
        sigma_p = self.config.measurement_sigma
        sigma_v = self.config.initial_velocity_sigma
        state = KalmanState(mean=np.concatenate([match.point.position, np.zeros(3)]),
                            covariance=np.diag([sigma_p ** 2] * 3 + [sigma_v ** 2] * 3),
                            last_update_frame=match.frame_index)
        track = Track(track_id=self._next_id, states=[state], points=[match.point])
        self._next_id += 1
        self.tracks.append(track)
        logger.debug(f"Frame {match.frame_index}: track {track.track_id} born at {np.round(match.point.position, 3)}")
        return track

    def _maneuver_prior(self, track: Track, frame: int) -> KalmanState:
        """Prediction from the last posterior with its velocity uncertainty reset"""
        last = track.state
        cov = np.array(last.covariance)
        cov[3:, :] = 0.0
        cov[:, 3:] = 0.0
        cov[3:, 3:] = self.config.initial_velocity_sigma ** 2 * np.eye(3)
        reset = KalmanState(mean=last.mean, covariance=cov, last_update_frame=last.last_update_frame)
        return kf_predict(reset, (frame - last.last_update_frame) * FRAME_DT, self.config)

    def associate_and_step(self, frame: int, matches: Sequence[StereoMatch]) -> List[Track]:
        """Greedy nearest-neighbour association of one frame's stereo points; returns the live tracks"""
        if self._last_frame is not None and frame <= self._last_frame:
            raise ValueError(f"frames must be strictly increasing, got {frame} after {self._last_frame}")
        if any(m.frame_index != frame for m in matches):
            raise ValueError(f"all stereo matches must belong to frame {frame}")
        self._last_frame = frame

        live = self.live_tracks
        priors = {t.track_id: kf_predict(t.state, (frame - t.state.last_update_frame) * FRAME_DT, self.config)
                  for t in live}
        scored = []
        for t in live:
            for m, match in enumerate(matches):
                d2 = mahalanobis_sq(priors[t.track_id], match.point.position, self.R)
                if d2 <= self.config.gate_chi2:
                    scored.append((d2, t.track_id, m))
        scored.sort()

        by_id = {t.track_id: t for t in live}
        assigned: Dict[int, Tuple[int, KalmanState]] = {}
        used = set()
        for d2, track_id, m in scored:
            if track_id in assigned or m in used:
                continue
            prior = priors[track_id]
            if d2 > self.config.maneuver_threshold:
                prior = self._maneuver_prior(by_id[track_id], frame)
            assigned[track_id] = (m, prior)
            used.add(m)

        # out-of-gate points close to an unmatched track: bounce, hit or late re-acquisition
        if self.config.reacquire_radius > 0:
            near = []
            for t in live:
                if t.track_id in assigned:
                    continue
                for m, match in enumerate(matches):
                    if m in used:
                        continue
                    dist = float(np.linalg.norm(match.point.position - priors[t.track_id].position))
                    if dist <= self.config.reacquire_radius:
                        near.append((dist, t.track_id, m))
            for dist, track_id, m in sorted(near):
                if track_id in assigned or m in used:
                    continue
                assigned[track_id] = (m, self._maneuver_prior(by_id[track_id], frame))
                used.add(m)

        for track_id, (m, prior) in assigned.items():
            posterior, _ = kf_update(prior, matches[m].point, self.R, frame_index=frame)
            by_id[track_id].append(posterior, matches[m].point)

        for t in live:
            if t.track_id in assigned:
                continue
            gap = frame - t.state.last_update_frame
            if gap >= self.config.max_coast_frames:
                t.status = TrackStatus.DEAD
                logger.debug(f"Frame {frame}: track {t.track_id} dead after {gap} unmatched frames")
            else:
                t.status = TrackStatus.COASTING

        for m, match in enumerate(matches):
            if m not in used:
                self._birth(match)
        return self.live_tracks

    def step_detections(self, frame: int, left: List[Detection2D], right: List[Detection2D]) -> List[Track]:
        matches = []
        if left and right:
            matches = match_stereo_pairs(left, right, self.cam_l, self.cam_r, self.geometry.reprojection_gate_px)
        return self.associate_and_step(frame, matches)

    def run(self, streams: Dict[str, List[Detection2D]], first_frame: Optional[int] = None,
            last_frame: Optional[int] = None) -> List[Track]:
        """Step through every frame of two camera streams, empty frames included; returns all tracks"""
        left = _by_frame(streams.get(self.cam_l.camera_id, []))
        right = _by_frame(streams.get(self.cam_r.camera_id, []))
        frames = set(left) | set(right)
        if not frames:
            return self.tracks
        start = min(frames) if first_frame is None else first_frame
        stop = max(frames) if last_frame is None else last_frame
        for frame in range(start, stop + 1):
            self.step_detections(frame, left.get(frame, []), right.get(frame, []))
        logger.info(f"Tracked frames {start}..{stop}: {len(self.tracks)} tracks")
        return self.tracks


def _by_frame(detections: Iterable[Detection2D]) -> Dict[int, List[Detection2D]]:
    grouped: Dict[int, List[Detection2D]] = {}
    for det in detections:
        grouped.setdefault(det.frame_index, []).append(det)
    return grouped


def triangulate_streams(streams: Dict[str, List[Detection2D]], cam_l: CameraCalibration,
                        cam_r: CameraCalibration, gate_px: float = 3.0) -> List[StereoMatch]:
    """Raw per-frame stereo points without any filtering"""
    left = _by_frame(streams.get(cam_l.camera_id, []))
    right = _by_frame(streams.get(cam_r.camera_id, []))
    matches = []
    for frame in sorted(set(left) & set(right)):
        matches.extend(match_stereo_pairs(left[frame], right[frame], cam_l, cam_r, gate_px))
    return matches


def stitch_tracks(tracks: Sequence[Track], rally_id: int = 0, min_length: int = 5) -> Trajectory3D:
    """One trajectory from non-overlapping tracks, longest first"""
    chosen: List[Track] = []
    for track in sorted(tracks, key=lambda t: (-len(t), t.track_id)):
        if len(track) < min_length:
            continue
        first, last = track.states[0].last_update_frame, track.state.last_update_frame
        if any(first <= c.state.last_update_frame and c.states[0].last_update_frame <= last for c in chosen):
            continue
        chosen.append(track)
    if not chosen:
        return Trajectory3D.empty(rally_id=rally_id)
    chosen.sort(key=lambda t: t.states[0].last_update_frame)
    frames = np.concatenate([t.frames for t in chosen])
    positions = np.concatenate([[s.position for s in t.states] for t in chosen])
    logger.debug(f"Rally {rally_id}: stitched {len(chosen)} of {len(tracks)} tracks, {len(frames)} samples")
    return Trajectory3D(frame_index=frames, positions=positions, source="tracked", rally_id=rally_id)
