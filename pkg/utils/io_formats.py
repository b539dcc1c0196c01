"""
On-disk record formats for SpinFlow
Every stream is JSON Lines, one record per line, each record tagged with its
`kind` and the schema version. Readers validate every line and report the
offending path and line; unknown fields are ignored. Writers serialise every
record before the file is opened so a bad record never leaves a partial file.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from utils.config import FRAME_DT
from utils.datatypes import BounceEvent, HitEvent, SpinLabel, Trajectory3D
from utils.errors import SchemaError
from utils.geometry import Detection2D, Point3D
from utils.spin import HitAnalysis
from utils.tracker import KalmanState, Track, TrackStatus
from utils.trajectory import TrainingWindow

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# versioned field lists, also documented in the README
SCHEMAS: Dict[str, Tuple[str, ...]] = {
    "detection": ("rally_id", "camera_id", "frame_index", "time", "pixel", "confidence"),
    "sample": ("rally_id", "source", "frame_index", "time", "position", "velocity", "spin", "events"),
    "track": ("rally_id", "track_id", "frame_index", "time", "position", "velocity", "covariance_diag"),
    "spin": ("rally_id", "frame_index", "time", "delta_v_xy", "z_accel", "label", "centroid_distance",
             "reason", "landing", "scripted_label", "player_level"),
    "window": ("rally_id", "camera_id", "start_frame", "frames", "pixels"),
}


@dataclass(frozen=True)
class _Line:
    path: str
    number: int
    record: Dict[str, Any]

    def fail(self, message: str) -> SchemaError:
        return SchemaError(message, path=self.path, line=self.number)

    def get(self, name: str, kind: Callable, optional: bool = False):
        if name not in self.record or self.record[name] is None:
            if optional:
                return None
            raise self.fail(f"missing field '{name}'")
        value = self.record[name]
        try:
            if kind is int and (isinstance(value, bool) or not float(value).is_integer()):
                raise ValueError
            if kind in (int, float) and isinstance(value, (str, bool)):
                raise ValueError
            out = kind(value)
        except (TypeError, ValueError):
            raise self.fail(f"field '{name}' has a bad value {value!r}")
        if isinstance(out, float) and not math.isfinite(out):
            raise self.fail(f"field '{name}' must be finite")
        return out

    def vector(self, name: str, size: int, optional: bool = False) -> Optional[np.ndarray]:
        if name not in self.record or self.record[name] is None:
            if optional:
                return None
            raise self.fail(f"missing field '{name}'")
        value = self.record[name]
        if not isinstance(value, list) or len(value) != size \
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise self.fail(f"field '{name}' must be a list of {size} numbers")
        out = np.array(value, dtype=float)
        if not np.all(np.isfinite(out)):
            raise self.fail(f"field '{name}' must be finite")
        return out


def _iter_lines(path: str, kind: Optional[str] = None) -> Iterator[_Line]:
    try:
        handle = open(path, "r", encoding="utf-8")
    except FileNotFoundError:
        raise SchemaError("file not found", path=path)
    with handle:
        for number, text in enumerate(handle, start=1):
            if not text.strip():
                continue
            try:
                record = json.loads(text)
            except json.JSONDecodeError as e:
                raise SchemaError(f"invalid JSON ({e.msg})", path=path, line=number)
            if not isinstance(record, dict):
                raise SchemaError("record must be a JSON object", path=path, line=number)
            line = _Line(path, number, record)
            version = record.get("schema", SCHEMA_VERSION)
            if version != SCHEMA_VERSION:
                raise line.fail(f"unsupported schema version {version!r}")
            if kind is not None and record.get("kind") != kind:
                raise line.fail(f"expected a '{kind}' record, got {record.get('kind')!r}")
            yield line


def record_kind(path: str) -> Optional[str]:
    """Kind of the first record in a JSONL file, None when it is empty"""
    for line in _iter_lines(path):
        return line.record.get("kind")
    return None


def _number(value: float) -> Optional[float]:
    value = float(value)
    return value if math.isfinite(value) else None


def _dumps(record: Dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, allow_nan=False, separators=(",", ":"))


def _write_records(path: str, kind: str, records: Iterable[Dict[str, Any]]) -> int:
    fields = SCHEMAS[kind]
    lines = []
    for record in records:
        body = {name: record.get(name) for name in fields}
        body.update({"kind": kind, "schema": SCHEMA_VERSION})
        lines.append(_dumps(body))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for text in lines:
            handle.write(text + "\n")
    logger.info(f"Wrote {len(lines)} {kind} records to {path}")
    return len(lines)


# detections

def write_detections(path: str, streams_by_rally: Dict[int, Sequence[Detection2D]]) -> int:
    records = []
    for rally_id in sorted(streams_by_rally):
        for det in streams_by_rally[rally_id]:
            records.append({"rally_id": rally_id, "camera_id": det.camera_id, "frame_index": det.frame_index,
                            "time": det.time, "pixel": [float(det.pixel[0]), float(det.pixel[1])],
                            "confidence": det.confidence})
    return _write_records(path, "detection", records)


def read_detections(path: str) -> Dict[int, Dict[str, List[Detection2D]]]:
    """{rally_id: {camera_id: detections in frame order}}"""
    out: Dict[int, Dict[str, List[Detection2D]]] = {}
    for line in _iter_lines(path, "detection"):
        pixel = line.vector("pixel", 2)
        confidence = line.get("confidence", float, optional=True)
        camera_id, frame = line.get("camera_id", str), line.get("frame_index", int)
        try:
            det = Detection2D(camera_id=camera_id, frame_index=frame,
                              pixel=(float(pixel[0]), float(pixel[1])),
                              confidence=1.0 if confidence is None else confidence)
        except ValueError as e:
            raise line.fail(str(e))
        out.setdefault(line.get("rally_id", int), {}).setdefault(det.camera_id, []).append(det)
    for cameras in out.values():
        for detections in cameras.values():
            detections.sort(key=lambda d: d.frame_index)
    return out


# trajectory samples

def _event_record(event) -> Dict[str, Any]:
    record = {"kind": event.kind, "frame_index": int(event.frame_index), "time": float(event.time),
              "position": [float(v) for v in event.position],
              "pre_velocity": [float(v) for v in event.pre_velocity],
              "post_velocity": [float(v) for v in event.post_velocity]}
    if isinstance(event, HitEvent):
        record["label"] = event.label.value if event.label else None
        record["player_level"] = event.player_level
    return record


def _parse_event(line: _Line, data: Any):
    sub = _Line(line.path, line.number, data if isinstance(data, dict) else {})
    if not isinstance(data, dict) or data.get("kind") not in ("bounce", "hit"):
        raise line.fail("events must be objects of kind 'bounce' or 'hit'")
    fields = dict(frame_index=sub.get("frame_index", int), time=sub.get("time", float),
                  position=sub.vector("position", 3), pre_velocity=sub.vector("pre_velocity", 3),
                  post_velocity=sub.vector("post_velocity", 3))
    if data["kind"] == "bounce":
        return BounceEvent(**fields)
    label = sub.get("label", str, optional=True)
    try:
        label = SpinLabel(label) if label is not None else None
    except ValueError:
        raise line.fail(f"unknown spin label {label!r}")
    return HitEvent(**fields, label=label, player_level=sub.get("player_level", str, optional=True))


def write_trajectories(path: str, trajectories: Sequence[Trajectory3D]) -> int:
    """One sample per line; each event rides on the sample nearest its frame"""
    records = []
    for traj in trajectories:
        if len(traj) == 0:
            continue
        attached: Dict[int, List] = {}
        for event in traj.events:
            attached.setdefault(traj.index_of(event.frame_index), []).append(_event_record(event))
        for i in range(len(traj)):
            records.append({
                "rally_id": traj.rally_id, "source": traj.source, "frame_index": int(traj.frame_index[i]),
                "time": float(traj.times[i]), "position": [float(v) for v in traj.positions[i]],
                "velocity": None if traj.velocities is None else [float(v) for v in traj.velocities[i]],
                "spin": None if traj.spins is None else [float(v) for v in traj.spins[i]],
                "events": attached.get(i, []),
            })
    return _write_records(path, "sample", records)


def read_trajectories(path: str) -> List[Trajectory3D]:
    """Trajectories grouped by rally id, in order of first appearance"""
    groups: Dict[int, Dict[str, Any]] = {}
    for line in _iter_lines(path, "sample"):
        rally_id = line.get("rally_id", int)
        source = line.get("source", str)
        if source not in ("simulated", "tracked"):
            raise line.fail(f"unknown source {source!r}")
        group = groups.setdefault(rally_id, {"source": source, "frames": [], "positions": [],
                                             "velocities": [], "spins": [], "events": []})
        if group["source"] != source:
            raise line.fail(f"rally {rally_id} mixes {group['source']} and {source} samples")
        frame = line.get("frame_index", int)
        if group["frames"] and frame <= group["frames"][-1]:
            raise line.fail(f"rally {rally_id}: frame {frame} is not after {group['frames'][-1]}")
        group["frames"].append(frame)
        group["positions"].append(line.vector("position", 3))
        group["velocities"].append(line.vector("velocity", 3, optional=True))
        group["spins"].append(line.vector("spin", 3, optional=True))
        events = line.record.get("events") or []
        if not isinstance(events, list):
            raise line.fail("field 'events' must be a list")
        group["events"].extend(_parse_event(line, e) for e in events)

    trajectories = []
    for rally_id, group in groups.items():
        velocities = None if any(v is None for v in group["velocities"]) else np.array(group["velocities"])
        spins = None if any(s is None for s in group["spins"]) else np.array(group["spins"])
        trajectories.append(Trajectory3D(frame_index=np.array(group["frames"]), positions=np.array(group["positions"]),
                                         events=tuple(group["events"]), source=group["source"], rally_id=rally_id,
                                         velocities=velocities, spins=spins))
    return trajectories


# tracks

def write_tracks(path: str, tracks_by_rally: Dict[int, Sequence[Track]]) -> int:
    records = []
    for rally_id in sorted(tracks_by_rally):
        for track in tracks_by_rally[rally_id]:
            for state in track.states:
                records.append({
                    "rally_id": rally_id, "track_id": track.track_id, "frame_index": state.last_update_frame,
                    "time": state.last_update_frame * FRAME_DT,
                    "position": [float(v) for v in state.position],
                    "velocity": [float(v) for v in state.velocity],
                    "covariance_diag": [float(v) for v in np.diag(state.covariance)],
                })
    return _write_records(path, "track", records)


def read_tracks(path: str) -> Dict[int, List[Track]]:
    """Tracks per rally, rebuilt with diagonal covariances"""
    tracks: Dict[int, Dict[int, Track]] = {}
    for line in _iter_lines(path, "track"):
        rally_id, track_id = line.get("rally_id", int), line.get("track_id", int)
        frame = line.get("frame_index", int)
        position = line.vector("position", 3)
        velocity = line.vector("velocity", 3, optional=True)
        diag = line.vector("covariance_diag", 6)
        try:
            state = KalmanState(mean=np.concatenate([position, np.zeros(3) if velocity is None else velocity]),
                                covariance=np.diag(diag), last_update_frame=frame)
            track = tracks.setdefault(rally_id, {}).setdefault(track_id, Track(track_id=track_id))
            track.append(state, Point3D(position=position, time=frame * FRAME_DT))
        except ValueError as e:
            raise line.fail(str(e))
    out = {}
    for rally_id, by_id in tracks.items():
        for track in by_id.values():
            track.status = TrackStatus.DEAD
        out[rally_id] = [by_id[k] for k in sorted(by_id)]
    return out


# spin results

def write_spin_results(path: str, analyses: Sequence[HitAnalysis]) -> int:
    records = []
    for a in analyses:
        records.append({
            "rally_id": a.rally_id, "frame_index": a.hit.frame_index, "time": a.hit.time,
            "delta_v_xy": a.features.delta_v_xy if a.features else None,
            "z_accel": a.features.z_accel if a.features else None,
            "label": a.spin.label.value, "centroid_distance": _number(a.spin.centroid_distance),
            "reason": a.reason, "landing": list(a.landing) if a.landing else None,
            "scripted_label": a.hit.label.value if a.hit.label else None,
            "player_level": a.hit.player_level,
        })
    return _write_records(path, "spin", records)


def read_spin_results(path: str) -> List[Dict[str, Any]]:
    rows = []
    for line in _iter_lines(path, "spin"):
        label = line.get("label", str)
        if label not in {l.value for l in SpinLabel}:
            raise line.fail(f"unknown spin label {label!r}")
        rows.append({"rally_id": line.get("rally_id", int), "frame_index": line.get("frame_index", int),
                     "time": line.get("time", float),
                     "delta_v_xy": line.get("delta_v_xy", float, optional=True),
                     "z_accel": line.get("z_accel", float, optional=True), "label": label,
                     "centroid_distance": line.get("centroid_distance", float, optional=True),
                     "reason": line.get("reason", str, optional=True) or "ok",
                     "player_level": line.get("player_level", str, optional=True)})
    return rows


# training windows

def write_training_windows(path: str, windows: Sequence[TrainingWindow]) -> int:
    records = []
    for window in windows:
        for camera_id in sorted(window.pixels):
            records.append({"rally_id": window.rally_id, "camera_id": camera_id,
                            "start_frame": window.start_frame, "frames": [int(f) for f in window.frames],
                            "pixels": [[float(u), float(v)] for u, v in window.pixels[camera_id]]})
    return _write_records(path, "window", records)
