"""
Physics oracle for SpinFlow
Flight with drag and Magnus force, table bounces with a spin-friction kick,
scripted rallies and noisy stereo detection rendering
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils.config import FRAME_DT, PhysicsConfig
from utils.datatypes import (SCRIPTED_LABELS, BounceEvent, HitEvent, SpinLabel, TableGeometry,
                             Trajectory3D)
from utils.errors import BallOutOfPlay, BelowTable, SchemaError
from utils.geometry import CameraCalibration, Detection2D, project_many

logger = logging.getLogger(__name__)

BOUNCE_TIME_TOL = 1e-6
SURFACE_TOL = 1e-6
# play volume: outside this box (or on the floor) the ball is dead
PLAY_VOLUME = ((-4.0, 4.0), (-5.0, 5.0), (0.0, 6.0))
DEFAULT_TAIL_FRAMES = 300

Vec = Tuple[float, float, float]


@dataclass(frozen=True, eq=False)
class BallState:
    position: np.ndarray
    velocity: np.ndarray
    spin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    time: float = 0.0

    def __post_init__(self):
        for name in ("position", "velocity", "spin"):
            value = np.array(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(value)):
                raise ValueError(f"BallState.{name} must be finite")
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        if self.position[2] < 0:
            raise ValueError("BallState below the floor")

    def to_dict(self) -> Dict:
        return {"position": self.position.tolist(), "velocity": self.velocity.tolist(),
                "spin": self.spin.tolist(), "time": self.time}


@dataclass(frozen=True)
class ScriptedShot:
    time: float
    state: BallState
    label: SpinLabel = SpinLabel.NO_SPIN
    player_level: str = "professional"

    @property
    def frame_index(self) -> int:
        return int(round(self.time / FRAME_DT))

    def to_dict(self) -> Dict:
        return {"time": self.time, "position": self.state.position.tolist(),
                "velocity": self.state.velocity.tolist(), "spin": self.state.spin.tolist(),
                "label": self.label.value, "player_level": self.player_level}

    @classmethod
    def from_dict(cls, data: Dict) -> "ScriptedShot":
        time = float(data["time"])
        state = BallState(position=data["position"], velocity=data["velocity"],
                          spin=data.get("spin", [0.0, 0.0, 0.0]), time=time)
        return cls(time=time, state=state, label=SpinLabel(data.get("label", "NoSpin")),
                   player_level=str(data.get("player_level", "professional")))


@dataclass(frozen=True)
class RallyScript:
    serve: ScriptedShot
    hits: Tuple[ScriptedShot, ...] = ()
    rng_seed: int = 0
    detection_noise_sigma: float = 0.5
    dropout_probability: float = 0.0
    rally_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hits", tuple(self.hits))
        frames = [self.serve.frame_index] + [hit.frame_index for hit in self.hits]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError("scripted hit times must be strictly increasing after the serve")
        for shot in (self.serve,) + self.hits:
            if shot.label not in SCRIPTED_LABELS:
                raise ValueError(f"scripted label must be one of {[l.value for l in SCRIPTED_LABELS]}")
        if self.detection_noise_sigma < 0:
            raise ValueError("detection_noise_sigma must be >= 0")
        if not 0.0 <= self.dropout_probability < 1.0:
            raise ValueError("dropout_probability must lie in [0, 1)")

    def to_dict(self) -> Dict:
        return {"rally_id": self.rally_id, "rng_seed": self.rng_seed,
                "detection_noise_sigma": self.detection_noise_sigma,
                "dropout_probability": self.dropout_probability,
                "serve": self.serve.to_dict(), "hits": [hit.to_dict() for hit in self.hits]}

    @classmethod
    def from_dict(cls, data: Dict) -> "RallyScript":
        return cls(serve=ScriptedShot.from_dict(data["serve"]),
                   hits=tuple(ScriptedShot.from_dict(h) for h in data.get("hits", [])),
                   rng_seed=int(data.get("rng_seed", 0)),
                   detection_noise_sigma=float(data.get("detection_noise_sigma", 0.5)),
                   dropout_probability=float(data.get("dropout_probability", 0.0)),
                   rally_id=int(data.get("rally_id", 0)))


def load_scripts(path: str) -> List[RallyScript]:
    """Read one script object or {"rallies": [...]} from JSON"""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except FileNotFoundError:
        raise SchemaError("file not found", path=path)
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON ({e.msg})", path=path, line=e.lineno)
    entries = data.get("rallies", [data]) if isinstance(data, dict) else data
    scripts = []
    for k, entry in enumerate(entries):
        try:
            script = RallyScript.from_dict(entry)
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"rally {k}: {e}", path=path)
        scripts.append(script)
    return scripts


def save_scripts(path: str, scripts: Sequence[RallyScript]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump({"rallies": [s.to_dict() for s in scripts]}, handle, indent=2)
        handle.write("\n")


class _Coefficients:
    """Per-unit-mass force coefficients derived from PhysicsConfig"""

    def __init__(self, physics: PhysicsConfig):
        self.k_drag = 0.5 * physics.air_density * physics.drag_coefficient * physics.cross_section / physics.mass
        self.k_magnus = physics.magnus_coefficient / physics.mass
        self.g = physics.gravity


def _acceleration(v: Vec, w: Vec, c: _Coefficients) -> Vec:
    vx, vy, vz = v
    wx, wy, wz = w
    speed = math.sqrt(vx * vx + vy * vy + vz * vz)
    return (
        -c.k_drag * speed * vx + c.k_magnus * (wy * vz - wz * vy),
        -c.k_drag * speed * vy + c.k_magnus * (wz * vx - wx * vz),
        -c.g - c.k_drag * speed * vz + c.k_magnus * (wx * vy - wy * vx),
    )


def _rk4(p: Vec, v: Vec, w: Vec, dt: float, c: _Coefficients) -> Tuple[Vec, Vec]:
    a1 = _acceleration(v, w, c)
    v2 = tuple(v[i] + 0.5 * dt * a1[i] for i in range(3))
    a2 = _acceleration(v2, w, c)
    v3 = tuple(v[i] + 0.5 * dt * a2[i] for i in range(3))
    a3 = _acceleration(v3, w, c)
    v4 = tuple(v[i] + dt * a3[i] for i in range(3))
    a4 = _acceleration(v4, w, c)
    p_next = tuple(p[i] + dt / 6.0 * (v[i] + 2.0 * v2[i] + 2.0 * v3[i] + v4[i]) for i in range(3))
    v_next = tuple(v[i] + dt / 6.0 * (a1[i] + 2.0 * a2[i] + 2.0 * a3[i] + a4[i]) for i in range(3))
    return p_next, v_next


def step_flight(state: BallState, dt: float, physics: Optional[PhysicsConfig] = None) -> BallState:
    """Advance a ball in free flight by one RK4 step of at most one frame; a step that
    reaches the floor stops at the floor contact"""
    if not 0.0 < dt <= FRAME_DT * (1.0 + 1e-12):
        raise ValueError(f"dt must lie in (0, {FRAME_DT}], got {dt}")
    coeffs = _Coefficients(physics or PhysicsConfig())
    p0, v0, w = tuple(state.position), tuple(state.velocity), tuple(state.spin)
    p, v = _rk4(p0, v0, w, dt, coeffs)
    if p[2] >= 0.0:
        return BallState(position=p, velocity=v, spin=state.spin, time=state.time + dt)

    lo, hi = 0.0, dt
    while hi - lo > BOUNCE_TIME_TOL:
        mid = 0.5 * (lo + hi)
        pm, _ = _rk4(p0, v0, w, mid, coeffs)
        if pm[2] >= 0.0:
            lo = mid
        else:
            hi = mid
    p, v = _rk4(p0, v0, w, hi, coeffs)
    logger.debug(f"Ball reached the floor {hi:.6f} s into the step")
    return BallState(position=(p[0], p[1], 0.0), velocity=v, spin=state.spin, time=state.time + hi)


def _bounce_velocity(v: Vec, w: Vec, table: TableGeometry, physics: PhysicsConfig) -> Tuple[Vec, Vec]:
    # (w x n) for n = +z
    kick_x, kick_y = w[1], -w[0]
    keep = 1.0 - table.friction_coefficient
    v_out = (keep * v[0] + physics.spin_coupling * kick_x,
             keep * v[1] + physics.spin_coupling * kick_y,
             -table.restitution_normal * v[2])
    w_out = tuple(physics.spin_retention * wi for wi in w)
    return v_out, w_out


def bounce(state: BallState, table: TableGeometry, physics: Optional[PhysicsConfig] = None) -> BallState:
    """Table contact: reflect v_z with restitution, apply friction loss and the spin kick"""
    physics = physics or PhysicsConfig()
    x, y, z = state.position
    if z < table.surface_height - SURFACE_TOL:
        raise BelowTable(f"ball at z={z:.6f} m is below the table surface {table.surface_height} m")
    if z > table.surface_height + SURFACE_TOL:
        raise ValueError("ball is not in contact with the table")
    if state.velocity[2] >= 0:
        raise ValueError("ball must be moving down to bounce")
    if not table.contains(x, y):
        raise ValueError("contact point lies outside the table bounds")
    v_out, w_out = _bounce_velocity(tuple(state.velocity), tuple(state.spin), table, physics)
    return BallState(position=state.position, velocity=v_out, spin=w_out, time=state.time)


def _advance(p: Vec, v: Vec, w: Vec, dt: float, table: TableGeometry, physics: PhysicsConfig,
             coeffs: _Coefficients):
    """One frame of flight; bisects the step if it crosses the table surface over the table"""
    p1, v1 = _rk4(p, v, w, dt, coeffs)
    surface = table.surface_height
    if not (p[2] >= surface > p1[2]):
        return p1, v1, w, None

    lo, hi = 0.0, dt
    while hi - lo > BOUNCE_TIME_TOL:
        mid = 0.5 * (lo + hi)
        pm, _ = _rk4(p, v, w, mid, coeffs)
        if pm[2] >= surface:
            lo = mid
        else:
            hi = mid
    tau = hi
    pc, vc = _rk4(p, v, w, tau, coeffs)
    if not table.contains(pc[0], pc[1]) or vc[2] >= 0:
        return p1, v1, w, None

    pc = (pc[0], pc[1], surface)
    v_out, w_out = _bounce_velocity(vc, w, table, physics)
    remaining = dt - tau
    if remaining > 1e-12:
        p2, v2 = _rk4(pc, v_out, w_out, remaining, coeffs)
    else:
        p2, v2 = pc, v_out
    return p2, v2, w_out, (tau, pc, vc, v_out)


def _in_play(p: Vec) -> bool:
    return all(low < p[i] <= high if i == 2 else low <= p[i] <= high
               for i, (low, high) in enumerate(PLAY_VOLUME))


def simulate_rally(script: RallyScript, table: Optional[TableGeometry] = None,
                   physics: Optional[PhysicsConfig] = None,
                   tail_frames: int = DEFAULT_TAIL_FRAMES) -> Trajectory3D:
    """Ground-truth 150 Hz trajectory with every table contact and scripted hit tagged"""
    table = table or TableGeometry()
    physics = physics or PhysicsConfig()
    coeffs = _Coefficients(physics)

    frame = script.serve.frame_index
    p = tuple(script.serve.state.position)
    v = tuple(script.serve.state.velocity)
    w = tuple(script.serve.state.spin)
    pending = list(script.hits)
    end_frame = (pending[-1].frame_index if pending else frame) + tail_frames

    frames, positions, velocities, spins, events = [frame], [p], [v], [w], []
    while frame < end_frame:
        p, v, w, contact = _advance(p, v, w, FRAME_DT, table, physics, coeffs)
        frame += 1
        if not _in_play(p):
            if pending:
                raise BallOutOfPlay(f"rally {script.rally_id}: ball left play at frame {frame}, "
                                    f"hit scripted at frame {pending[0].frame_index}")
            break
        if contact is not None:
            tau, pc, vc, v_out = contact
            t_contact = (frame - 1) * FRAME_DT + tau
            tag = int(round(t_contact / FRAME_DT))
            events.append(BounceEvent(frame_index=tag, time=t_contact, position=np.array(pc),
                                      pre_velocity=np.array(vc), post_velocity=np.array(v_out)))
        if pending and pending[0].frame_index == frame:
            shot = pending.pop(0)
            pre = v
            v = tuple(shot.state.velocity)
            w = tuple(shot.state.spin)
            events.append(HitEvent(frame_index=frame, time=frame * FRAME_DT, position=np.array(p),
                                   pre_velocity=np.array(pre), post_velocity=np.array(v),
                                   label=shot.label, player_level=shot.player_level))
        frames.append(frame)
        positions.append(p)
        velocities.append(v)
        spins.append(w)

    logger.debug(f"Rally {script.rally_id}: {len(frames)} frames, "
                 f"{sum(isinstance(e, BounceEvent) for e in events)} bounces, "
                 f"{sum(isinstance(e, HitEvent) for e in events)} hits")
    return Trajectory3D(frame_index=np.array(frames), positions=np.array(positions), events=tuple(events),
                        source="simulated", rally_id=script.rally_id,
                        velocities=np.array(velocities), spins=np.array(spins))


def fly(state: BallState, table: TableGeometry, physics: PhysicsConfig, max_frames: int,
        stop_after_bounces: Optional[int] = None) -> Trajectory3D:
    """Free flight of a single shot from a frame-aligned state, bounces tagged"""
    shot = ScriptedShot(time=state.time, state=state)
    script = RallyScript(serve=shot)
    trajectory = simulate_rally(script, table, physics, tail_frames=max_frames)
    if stop_after_bounces is None:
        return trajectory
    bounces = trajectory.bounces
    if len(bounces) <= stop_after_bounces:
        return trajectory
    cut = bounces[stop_after_bounces].frame_index
    mask = trajectory.frame_index < cut
    kept = tuple(b for b in bounces[:stop_after_bounces])
    return trajectory.subset(mask).with_events(kept)


def render_detections(truth: Trajectory3D, cameras: Sequence[CameraCalibration], noise_sigma: float,
                      dropout: float, rng_seed: int) -> Dict[str, List[Detection2D]]:
    """Project every truth sample into every camera with Gaussian pixel noise and random dropout"""
    if not cameras:
        raise ValueError("render_detections needs at least one camera")
    rng = np.random.default_rng(rng_seed)
    streams: Dict[str, List[Detection2D]] = {}
    n = len(truth)
    for camera in cameras:
        pixels, depth = project_many(truth.positions, camera) if n else (np.zeros((0, 2)), np.zeros(0))
        noisy = pixels + rng.normal(0.0, 1.0, size=(n, 2)) * noise_sigma
        keep = rng.random(n) >= dropout
        width, height = camera.image_size
        visible = (depth > 0) & (noisy[:, 0] >= 0) & (noisy[:, 0] < width) & (noisy[:, 1] >= 0) & (noisy[:, 1] < height)
        out_of_view = int(np.sum(keep & ~visible))
        if out_of_view:
            logger.debug(f"Camera {camera.camera_id}: {out_of_view} samples outside the image dropped")
        streams[camera.camera_id] = [
            Detection2D(camera_id=camera.camera_id, frame_index=int(f), pixel=(float(px[0]), float(px[1])))
            for f, px, ok in zip(truth.frame_index, noisy, keep & visible) if ok
        ]
    return streams


def render_scene(truths: Sequence[Trajectory3D], cameras: Sequence[CameraCalibration], noise_sigma: float,
                 dropout: float, rng_seed: int) -> Dict[str, List[Detection2D]]:
    """Several balls in one scene; per-camera streams merged in frame order"""
    merged: Dict[str, List[Detection2D]] = {camera.camera_id: [] for camera in cameras}
    for k, truth in enumerate(truths):
        seed = int(np.random.SeedSequence([rng_seed, k]).generate_state(1)[0])
        for camera_id, detections in render_detections(truth, cameras, noise_sigma, dropout, seed).items():
            merged[camera_id].extend(detections)
    for detections in merged.values():
        detections.sort(key=lambda d: d.frame_index)
    return merged
