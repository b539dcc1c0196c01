"""
Configuration for the SpinFlow pipeline
One dataclass per stage, aggregated by PipelineConfig and loaded from JSON
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Optional

from scipy.stats import chi2

from utils.errors import ConfigError

logger = logging.getLogger(__name__)

FRAME_RATE = 150.0
FRAME_DT = 1.0 / FRAME_RATE
IMAGE_SIZE = (1280, 1024)

# squared-distance gate for 3-D positions
CHI2_3DOF_99 = float(chi2.ppf(0.99, df=3))


@dataclass
class GeometryConfig:
    reprojection_gate_px: float = 3.0

    def validate(self) -> None:
        _check_range("geometry.reprojection_gate_px", self.reprojection_gate_px, 0.0, 1000.0, low_open=True)


@dataclass
class PhysicsConfig:
    """Ball and air constants; the spin terms are calibrated, not measured"""
    mass: float = 0.0027
    radius: float = 0.020
    air_density: float = 1.2
    drag_coefficient: float = 0.4
    magnus_coefficient: float = 1.0e-5
    gravity: float = 9.8
    spin_coupling: float = 1.7e-3
    spin_retention: float = 0.6

    @property
    def cross_section(self) -> float:
        return math.pi * self.radius ** 2

    def validate(self) -> None:
        _check_range("physics.mass", self.mass, 0.0, 1.0, low_open=True)
        _check_range("physics.radius", self.radius, 0.0, 1.0, low_open=True)
        _check_range("physics.air_density", self.air_density, 0.0, 10.0)
        _check_range("physics.drag_coefficient", self.drag_coefficient, 0.0, 5.0)
        _check_range("physics.magnus_coefficient", self.magnus_coefficient, 0.0, 1.0)
        _check_range("physics.gravity", self.gravity, 0.0, 100.0)
        _check_range("physics.spin_coupling", self.spin_coupling, 0.0, 1.0)
        _check_range("physics.spin_retention", self.spin_retention, 0.0, 1.0)


@dataclass
class TrackerConfig:
    process_noise_accel: float = 15.0
    measurement_sigma: float = 0.005
    gate_chi2: float = CHI2_3DOF_99
    max_coast_frames: int = 8
    maneuver_threshold: float = 9.0
    reacquire_radius: float = 0.15
    initial_velocity_sigma: float = 10.0
    use_gravity: bool = True
    gravity: float = 9.8

    def validate(self) -> None:
        _check_range("tracker.process_noise_accel", self.process_noise_accel, 0.0, 1000.0)
        _check_range("tracker.measurement_sigma", self.measurement_sigma, 0.0, 1.0, low_open=True)
        _check_range("tracker.gate_chi2", self.gate_chi2, 0.0, 1000.0, low_open=True)
        _check_range("tracker.max_coast_frames", self.max_coast_frames, 1, 1000)
        _check_range("tracker.maneuver_threshold", self.maneuver_threshold, 0.0, 1000.0, low_open=True)
        _check_range("tracker.reacquire_radius", self.reacquire_radius, 0.0, 10.0)
        _check_range("tracker.initial_velocity_sigma", self.initial_velocity_sigma, 0.0, 1000.0, low_open=True)


@dataclass
class TrajectoryConfig:
    window: int = 6
    nms_radius_frames: int = 10
    bounce_height_tolerance: float = 0.15
    smooth_window: int = 20
    bootstrap_samples: int = 25
    subset_size: int = 6
    end_as_inflection: bool = False
    seed: int = 0

    def validate(self) -> None:
        _check_range("trajectory.window", self.window, 4, 100)
        _check_range("trajectory.nms_radius_frames", self.nms_radius_frames, 1, 1000)
        _check_range("trajectory.bounce_height_tolerance", self.bounce_height_tolerance, 0.0, 10.0, low_open=True)
        _check_range("trajectory.smooth_window", self.smooth_window, 6, 1000)
        _check_range("trajectory.bootstrap_samples", self.bootstrap_samples, 1, 10000)
        _check_range("trajectory.subset_size", self.subset_size, 4, self.smooth_window)


@dataclass
class SpinConfig:
    context_frames: int = 10
    trim_frames: int = 5
    rejection_radius: float = 6.0

    def validate(self) -> None:
        _check_range("spin.context_frames", self.context_frames, 1, 1000)
        _check_range("spin.trim_frames", self.trim_frames, 0, 1000)
        _check_range("spin.rejection_radius", self.rejection_radius, 0.0, 1000.0, low_open=True)


@dataclass
class ToyTrainConfig:
    width: int = 40
    height: int = 32
    channels: int = 8
    kernel_size: int = 3
    seq_len: int = 25
    n_sequences: int = 500
    batch_size: int = 16
    steps: int = 300
    learning_rate: float = 0.5
    clip_norm: float = 5.0
    occlusion_frames: int = 3
    ball_radius: float = 1.5
    cell: str = "gated"
    smoothing: int = 20
    seed: int = 0

    def validate(self) -> None:
        _check_range("toy.width", self.width, 8, 1024)
        _check_range("toy.height", self.height, 8, 1024)
        if self.width % 2 or self.height % 2:
            raise ConfigError("toy.width and toy.height must be even")
        _check_range("toy.channels", self.channels, 1, 256)
        if self.kernel_size % 2 != 1:
            raise ConfigError("toy.kernel_size must be odd")
        _check_range("toy.seq_len", self.seq_len, 1, 1000)
        _check_range("toy.n_sequences", self.n_sequences, 1, 10 ** 6)
        _check_range("toy.batch_size", self.batch_size, 1, 4096)
        _check_range("toy.steps", self.steps, 1, 10 ** 6)
        _check_range("toy.learning_rate", self.learning_rate, 0.0, 100.0, low_open=True)
        _check_range("toy.clip_norm", self.clip_norm, 0.0, 1e6, low_open=True)
        _check_range("toy.occlusion_frames", self.occlusion_frames, 0, self.seq_len)
        if self.cell not in ("gated", "lstm", "single"):
            raise ConfigError(f"toy.cell must be gated, lstm or single, got {self.cell!r}")


@dataclass
class BenchConfig:
    frames: int = 10000
    balls: int = 2
    budget_ms: float = 6.6
    segment_every: int = 150
    noise_sigma: float = 0.5

    def validate(self) -> None:
        _check_range("bench.frames", self.frames, 0, 10 ** 8)
        _check_range("bench.balls", self.balls, 1, 16)
        _check_range("bench.budget_ms", self.budget_ms, 0.0, 1e6, low_open=True)
        _check_range("bench.segment_every", self.segment_every, 1, 10 ** 6)
        _check_range("bench.noise_sigma", self.noise_sigma, 0.0, 100.0)


@dataclass
class PipelineConfig:
    calibration_path: Optional[str] = None
    table_path: Optional[str] = None
    script_path: Optional[str] = None
    out_dir: str = "out"
    seed: int = 0
    n_rallies: int = 10
    hits_per_rally: int = 6
    professional_fraction: float = 1.0
    noise_sigma: float = 0.5
    dropout: float = 0.0
    smooth: bool = True
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    spin: SpinConfig = field(default_factory=SpinConfig)
    toy: ToyTrainConfig = field(default_factory=ToyTrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def validate(self) -> None:
        _check_range("n_rallies", self.n_rallies, 0, 10 ** 6)
        _check_range("hits_per_rally", self.hits_per_rally, 0, 1000)
        _check_range("professional_fraction", self.professional_fraction, 0.0, 1.0)
        _check_range("noise_sigma", self.noise_sigma, 0.0, 100.0)
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        for name in ("calibration_path", "table_path", "script_path"):
            value = getattr(self, name)
            if value is not None and not Path(value).is_file():
                raise ConfigError(f"{name} points to a missing file: {value}")
        for section in (self.geometry, self.physics, self.tracker, self.trajectory,
                        self.spin, self.toy, self.bench):
            section.validate()

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: Optional[Path] = None) -> "PipelineConfig":
        config = _build(cls, data, "")
        if base_dir is not None:
            for name in ("calibration_path", "table_path", "script_path"):
                value = getattr(config, name)
                if value is not None and not Path(value).is_absolute():
                    setattr(config, name, str(base_dir / value))
        config.validate()
        return config

    @classmethod
    def from_json(cls, path: str) -> "PipelineConfig":
        try:
            with open(path, "r", encoding="utf-8") as handle:
                data = json.load(handle)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})")
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        logger.info(f"Loaded pipeline config from {path}")
        return cls.from_dict(data, base_dir=Path(path).resolve().parent)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _build(cls, data: Dict[str, Any], prefix: str):
    """Instantiate a config dataclass from a dict, ignoring unknown keys"""
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object")
    defaults = cls()
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        key = f"{prefix}{f.name}"
        default = getattr(defaults, f.name)
        if is_dataclass(default):
            kwargs[f.name] = _build(type(default), value, key + ".")
            continue
        kwargs[f.name] = _coerce(key, value, default)
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        logger.debug(f"Ignoring unknown config keys under '{prefix or 'root'}': {sorted(unknown)}")
    return cls(**kwargs)


def _coerce(key: str, value: Any, default: Any) -> Any:
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    return value


def _check_range(key: str, value: float, low: float, high: float, low_open: bool = False) -> None:
    if value is None or (isinstance(value, float) and not math.isfinite(value)):
        raise ConfigError(f"{key} must be finite, got {value!r}")
    too_low = value <= low if low_open else value < low
    if too_low or value > high:
        bracket = "(" if low_open else "["
        raise ConfigError(f"{key}={value} outside {bracket}{low}, {high}]")
