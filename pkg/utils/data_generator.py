"""
Rally scenario generation for SpinFlow
Builds scripted serves and rallies with known spin classes for the physics
oracle, and calibrates the per-class shot templates against the published
cluster centroids
"""

import logging
import math
from dataclasses import astuple, dataclass, replace
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import least_squares

from utils.config import FRAME_DT, PhysicsConfig, SpinConfig
from utils.datatypes import SCRIPTED_LABELS, SpinLabel, TableGeometry
from utils.errors import BallOutOfPlay
from utils.simulator import BallState, RallyScript, ScriptedShot, fly
from utils.spin import SpinCentroids, bounce_velocity_change, downward_acceleration

logger = logging.getLogger(__name__)

# centroid axis spans, used to weigh calibration residuals
AXIS_SPAN = (0.916, 14.5)
NOMINAL_ORIGIN = (0.0, -1.6, 0.95)
NOMINAL_LANDING = (0.0, 0.7)
MAX_FLIGHT_FRAMES = 400


@dataclass(frozen=True)
class ShotTemplate:
    """Launch recipe for one spin class: horizontal speed (m/s) and topspin rate (rad/s)"""
    label: SpinLabel
    speed: float
    topspin: float


INITIAL_TEMPLATES = {
    SpinLabel.NO_SPIN: ShotTemplate(SpinLabel.NO_SPIN, 4.8, 0.0),
    SpinLabel.LIGHT_TOPSPIN: ShotTemplate(SpinLabel.LIGHT_TOPSPIN, 9.3, 259.0),
    SpinLabel.HEAVY_TOPSPIN: ShotTemplate(SpinLabel.HEAVY_TOPSPIN, 7.2, 594.0),
}


def aim_shot(origin: Sequence[float], landing_xy: Sequence[float], template: ShotTemplate,
             table: TableGeometry, physics: PhysicsConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Launch velocity and topspin that carry the ball from `origin` to a table-height landing point

    Horizontal flight time comes from quadratic drag on the horizontal speed alone,
    the vertical launch speed from gravity plus the mean Magnus lift of the topspin.
    """
    origin = np.asarray(origin, dtype=float)
    delta = np.asarray(landing_xy, dtype=float) - origin[:2]
    distance = float(np.linalg.norm(delta))
    heading = delta / distance

    k_drag = 0.5 * physics.air_density * physics.drag_coefficient * physics.cross_section / physics.mass
    k_magnus = physics.magnus_coefficient / physics.mass
    u0 = template.speed
    if k_drag > 0:
        flight_time = math.expm1(k_drag * distance) / (k_drag * u0)
    else:
        flight_time = distance / u0
    mean_speed = distance / flight_time
    g_eff = physics.gravity + k_magnus * template.topspin * mean_speed
    dz = table.surface_height - origin[2]
    vz0 = (dz + 0.5 * g_eff * flight_time ** 2) / flight_time

    velocity = np.array([u0 * heading[0], u0 * heading[1], vz0])
    # topspin axis: n x v_hat with n the table normal
    spin = template.topspin * np.array([-heading[1], heading[0], 0.0])
    return velocity, spin


def shot_features(template: ShotTemplate, table: TableGeometry, physics: PhysicsConfig,
                  spin_config: Optional[SpinConfig] = None) -> Tuple[float, float]:
    """Noise-free (delta_v_xy, z_accel) of a template fired over the nominal geometry"""
    spin_config = spin_config or SpinConfig()
    velocity, spin = aim_shot(NOMINAL_ORIGIN, NOMINAL_LANDING, template, table, physics)
    state = BallState(position=NOMINAL_ORIGIN, velocity=velocity, spin=spin, time=0.0)
    flight = fly(state, table, physics, max_frames=MAX_FLIGHT_FRAMES)
    bounces = flight.bounces
    if not bounces:
        return math.nan, math.nan
    bounce = bounces[0]
    delta_v = bounce_velocity_change(flight, bounce, spin_config.context_frames)
    z_accel = downward_acceleration(flight.between(0, bounce.frame_index), spin_config.trim_frames)
    return delta_v, z_accel


@lru_cache(maxsize=8)
def _calibrate(physics_key: Tuple, table: TableGeometry, centroid_key: Tuple) -> Tuple[ShotTemplate, ...]:
    physics = PhysicsConfig(*physics_key)
    centroids = SpinCentroids(*centroid_key)
    results = []
    for label in SCRIPTED_LABELS:
        target = np.array(centroids.for_label(label))
        guess = INITIAL_TEMPLATES[label]

        if label is SpinLabel.NO_SPIN:
            def residual(params):
                features = shot_features(replace(guess, speed=params[0], topspin=0.0), table, physics)
                return (np.array(features) - target) / AXIS_SPAN

            fit = least_squares(residual, x0=[guess.speed], bounds=([2.0], [20.0]), diff_step=1e-2)
            template = replace(guess, speed=float(fit.x[0]), topspin=0.0)
        else:
            def residual(params):
                features = shot_features(replace(guess, speed=params[0], topspin=params[1]), table, physics)
                return (np.array(features) - target) / AXIS_SPAN

            fit = least_squares(residual, x0=[guess.speed, guess.topspin], bounds=([2.0, 0.0], [20.0, 1500.0]),
                                x_scale=[1.0, 100.0], diff_step=1e-2)
            template = replace(guess, speed=float(fit.x[0]), topspin=float(fit.x[1]))

        if not np.all(np.isfinite(fit.fun)) or np.max(np.abs(fit.fun)) > 0.2:
            logger.warning(f"{label.value} template calibration residual {fit.fun} above 20% of the axis span")
        logger.info(f"Calibrated {label.value}: speed {template.speed:.3f} m/s, topspin {template.topspin:.1f} rad/s")
        results.append(template)
    return tuple(results)


def calibrate_shot_templates(table: Optional[TableGeometry] = None, physics: Optional[PhysicsConfig] = None,
                             centroids=None) -> Dict[SpinLabel, ShotTemplate]:
    """Per-class launch speed and topspin whose simulated features land on the cluster centroids"""
    table = table or TableGeometry()
    physics = physics or PhysicsConfig()
    centroids = centroids or SpinCentroids()
    templates = _calibrate(astuple(physics), table, astuple(centroids))
    return {t.label: t for t in templates}


class RallyGenerator:
    """Seeded source of serve, rally and special-case scripts for the simulator"""

    def __init__(self, table: Optional[TableGeometry] = None, physics: Optional[PhysicsConfig] = None,
                 seed: int = 0, templates: Optional[Dict[SpinLabel, ShotTemplate]] = None,
                 noise_sigma: float = 0.5, dropout: float = 0.0):
        self.table = table or TableGeometry()
        self.physics = physics or PhysicsConfig()
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.templates = templates if templates is not None else calibrate_shot_templates(self.table, self.physics)
        self.noise_sigma = noise_sigma
        self.dropout = dropout

        # relative spread of speed and topspin between shots of one class
        self.speed_jitter = 0.03
        self.spin_jitter = 0.03
        self.landing_x = (-0.45, 0.45)
        self.landing_depth = (0.55, 0.85)
        self.hit_plane = (1.5, 1.7)
        self.serve_height = (0.9, 1.0)
        self.out_of_bounds_overshoot = 0.5

    def _jittered(self, label: SpinLabel) -> ShotTemplate:
        template = self.templates[label]
        speed = template.speed * (1.0 + self.speed_jitter * self.rng.standard_normal())
        topspin = template.topspin * (1.0 + self.spin_jitter * self.rng.standard_normal())
        return replace(template, speed=speed, topspin=max(0.0, topspin))

    def _landing(self, direction: int, out_of_bounds: bool = False) -> Tuple[float, float]:
        x = self.rng.uniform(*self.landing_x)
        if out_of_bounds:
            return x, direction * (self.table.y_bounds[1] + self.out_of_bounds_overshoot)
        return x, direction * self.rng.uniform(*self.landing_depth)

    def _shot(self, origin: Sequence[float], frame: int, label: SpinLabel, direction: int, level: str,
              out_of_bounds: bool = False) -> ScriptedShot:
        template = self._jittered(label)
        velocity, spin = aim_shot(origin, self._landing(direction, out_of_bounds), template, self.table, self.physics)
        time = frame * FRAME_DT
        state = BallState(position=origin, velocity=velocity, spin=spin, time=time)
        return ScriptedShot(time=time, state=state, label=label, player_level=level)

    def _next_hit(self, shot: ScriptedShot, direction: int) -> Tuple[int, np.ndarray]:
        """Frame and position where the receiver meets the ball behind the table end"""
        flight = fly(shot.state, self.table, self.physics, max_frames=MAX_FLIGHT_FRAMES)
        bounces = flight.bounces
        if not bounces:
            raise BallOutOfPlay(f"shot at frame {shot.frame_index} never reached the table")
        plane = self.rng.uniform(*self.hit_plane)
        after = flight.frame_index > bounces[0].frame_index
        reached = after & (direction * flight.positions[:, 1] >= plane)
        if not np.any(reached):
            raise BallOutOfPlay(f"shot at frame {shot.frame_index} never reached the hit plane at {plane:.2f} m")
        i = int(np.argmax(reached))
        return int(flight.frame_index[i]), flight.positions[i]

    def serve(self, rally_id: int = 0, label: SpinLabel = SpinLabel.NO_SPIN, out_of_bounds: bool = False,
              level: str = "professional") -> RallyScript:
        """Single-arc script: one serve from behind the near end and no return"""
        origin = (self.rng.uniform(-0.3, 0.3), -self.hit_plane[0] - 0.1, self.rng.uniform(*self.serve_height))
        shot = self._shot(origin, 0, label, +1, level, out_of_bounds=out_of_bounds)
        return self._script(shot, (), rally_id)

    def generate_rally(self, rally_id: int = 0, n_hits: int = 6, labels: Optional[Sequence[SpinLabel]] = None,
                       level: str = "professional", out_of_bounds_last: bool = False) -> RallyScript:
        """Serve plus `n_hits` alternating returns, each aimed at the opponent half"""
        if labels is None:
            labels = [self.pick_label(level) for _ in range(n_hits)]
        if len(labels) != n_hits:
            raise ValueError(f"{len(labels)} labels given for {n_hits} hits")

        origin = (self.rng.uniform(-0.3, 0.3), -self.hit_plane[0] - 0.1, self.rng.uniform(*self.serve_height))
        serve = self._shot(origin, 0, SpinLabel.NO_SPIN, +1, level)
        shot, direction, hits = serve, +1, []
        for k, label in enumerate(labels):
            frame, position = self._next_hit(shot, direction)
            direction = -direction
            last = k == n_hits - 1
            shot = self._shot(position, frame, label, direction, level, out_of_bounds=out_of_bounds_last and last)
            hits.append(shot)
        return self._script(serve, hits, rally_id)

    def pick_label(self, level: str) -> SpinLabel:
        # non-professional play shows a single cluster
        if level == "amateur":
            return SpinLabel.NO_SPIN
        return SCRIPTED_LABELS[int(self.rng.integers(len(SCRIPTED_LABELS)))]

    def generate_corpus(self, n_rallies: int, hits_per_rally: int,
                        professional_fraction: float = 1.0) -> List[RallyScript]:
        scripts = []
        for rally_id in range(n_rallies):
            level = "professional" if self.rng.random() < professional_fraction else "amateur"
            scripts.append(self.generate_rally(rally_id, hits_per_rally, level=level))
        logger.info(f"Generated {n_rallies} rallies with {hits_per_rally} hits each")
        return scripts

    def balanced_corpus(self, hits_per_class: int, hits_per_rally: int = 6) -> List[RallyScript]:
        """Professional rallies whose hits cycle through the three classes evenly"""
        pool = [label for label in SCRIPTED_LABELS for _ in range(hits_per_class)]
        order = self.rng.permutation(len(pool))
        pool = [pool[i] for i in order]
        scripts = []
        for rally_id, start in enumerate(range(0, len(pool), hits_per_rally)):
            labels = pool[start:start + hits_per_rally]
            scripts.append(self.generate_rally(rally_id, len(labels), labels=labels))
        return scripts

    def crossing_pair(self, height_offset: float = 0.3) -> Tuple[RallyScript, RallyScript]:
        """Two balls served at once from opposite ends, crossing mid-table `height_offset` apart"""
        template = self.templates[SpinLabel.NO_SPIN]
        origin_a = np.array([0.05, -1.6, 0.95])
        velocity, spin = aim_shot(origin_a, (0.0, 0.7), template, self.table, self.physics)
        origin_b = np.array([-0.05, 1.6, 0.95 + height_offset])
        mirror = np.array([1.0, -1.0, 1.0])

        shot_a = ScriptedShot(time=0.0, state=BallState(position=origin_a, velocity=velocity, spin=spin))
        shot_b = ScriptedShot(time=0.0, state=BallState(position=origin_b, velocity=velocity * mirror,
                                                        spin=spin * np.array([-1.0, 1.0, 1.0])))
        return self._script(shot_a, (), 0), self._script(shot_b, (), 1)

    def _script(self, serve: ScriptedShot, hits: Sequence[ScriptedShot], rally_id: int) -> RallyScript:
        rng_seed = int(np.random.SeedSequence([self.seed, rally_id]).generate_state(1)[0])
        return RallyScript(serve=serve, hits=tuple(hits), rng_seed=rng_seed,
                           detection_noise_sigma=self.noise_sigma, dropout_probability=self.dropout,
                           rally_id=rally_id)


def corpus_summary(scripts: Sequence[RallyScript]) -> pd.DataFrame:
    """One row per rally: level, hit count and scripted class counts"""
    rows = []
    for script in scripts:
        labels = [hit.label for hit in script.hits]
        rows.append({
            "rally_id": script.rally_id,
            "player_level": script.serve.player_level,
            "hits": len(labels),
            **{label.value: labels.count(label) for label in SCRIPTED_LABELS},
        })
    return pd.DataFrame(rows, columns=["rally_id", "player_level", "hits"] + [l.value for l in SCRIPTED_LABELS])
