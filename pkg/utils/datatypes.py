"""
Shared value types for SpinFlow
Table geometry, trajectory events and the Trajectory3D container used by the
simulator, the segmenter and the spin analysis alike
"""

import json
from dataclasses import dataclass, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.config import FRAME_DT
from utils.errors import ConfigError
from utils.geometry import Point3D


class SpinLabel(str, Enum):
    NO_SPIN = "NoSpin"
    LIGHT_TOPSPIN = "LightTopspin"
    HEAVY_TOPSPIN = "HeavyTopspin"
    NO_CLUSTER = "NoCluster"

    @property
    def cluster_name(self) -> str:
        """Column name in the class-count table"""
        return {
            SpinLabel.NO_SPIN: "Top Cluster",
            SpinLabel.LIGHT_TOPSPIN: "Middle Cluster",
            SpinLabel.HEAVY_TOPSPIN: "Bottom Cluster",
            SpinLabel.NO_CLUSTER: "No Cluster",
        }[self]


SCRIPTED_LABELS = (SpinLabel.NO_SPIN, SpinLabel.LIGHT_TOPSPIN, SpinLabel.HEAVY_TOPSPIN)


@dataclass(frozen=True)
class TableGeometry:
    """Regulation table, long axis along y, centred on the origin"""
    x_bounds: Tuple[float, float] = (-0.7625, 0.7625)
    y_bounds: Tuple[float, float] = (-1.37, 1.37)
    surface_height: float = 0.76
    restitution_normal: float = 0.9
    friction_coefficient: float = 0.12

    def __post_init__(self):
        for name in ("x_bounds", "y_bounds"):
            low, high = getattr(self, name)
            if not low < high:
                raise ConfigError(f"table.{name} needs min < max, got {(low, high)}")
            object.__setattr__(self, name, (float(low), float(high)))
        if self.surface_height < 0:
            raise ConfigError("table.surface_height must be >= 0")
        if not 0.0 < self.restitution_normal <= 1.0:
            raise ConfigError("table.restitution_normal must lie in (0, 1]")
        if not 0.0 <= self.friction_coefficient <= 1.0:
            raise ConfigError("table.friction_coefficient must lie in [0, 1]")

    def contains(self, x: float, y: float) -> bool:
        return (self.x_bounds[0] <= x <= self.x_bounds[1]) and (self.y_bounds[0] <= y <= self.y_bounds[1])

    @classmethod
    def from_json(cls, path: str) -> "TableGeometry":
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
        known = {k: data[k] for k in ("x_bounds", "y_bounds", "surface_height",
                                      "restitution_normal", "friction_coefficient") if k in data}
        return cls(**known)


@dataclass(frozen=True, eq=False)
class BounceEvent:
    frame_index: int
    time: float
    position: np.ndarray
    pre_velocity: np.ndarray
    post_velocity: np.ndarray

    kind = "bounce"


@dataclass(frozen=True, eq=False)
class HitEvent:
    frame_index: int
    time: float
    position: np.ndarray
    pre_velocity: np.ndarray
    post_velocity: np.ndarray
    label: Optional[SpinLabel] = None
    player_level: Optional[str] = None

    kind = "hit"


Event = Union[BounceEvent, HitEvent]


def _readonly(array: Optional[np.ndarray], shape_tail: Tuple[int, ...], dtype=float) -> Optional[np.ndarray]:
    if array is None:
        return None
    out = np.array(array, dtype=dtype)
    if shape_tail:
        out = out.reshape((-1,) + shape_tail)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Trajectory3D:
    """Time-ordered 3D samples on the 150 Hz frame clock, plus tagged events"""
    frame_index: np.ndarray
    positions: np.ndarray
    events: Tuple[Event, ...] = ()
    source: str = "tracked"
    rally_id: int = 0
    velocities: Optional[np.ndarray] = None
    spins: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "frame_index", _readonly(self.frame_index, (), dtype=np.int64).reshape(-1))
        object.__setattr__(self, "positions", _readonly(self.positions, (3,)))
        object.__setattr__(self, "velocities", _readonly(self.velocities, (3,)))
        object.__setattr__(self, "spins", _readonly(self.spins, (3,)))
        object.__setattr__(self, "events", tuple(sorted(self.events, key=lambda e: e.frame_index)))
        if len(self.frame_index) != len(self.positions):
            raise ValueError("frame_index and positions differ in length")
        if len(self.frame_index) > 1 and np.any(np.diff(self.frame_index) <= 0):
            raise ValueError("trajectory frames must be strictly increasing")
        if self.source not in ("simulated", "tracked"):
            raise ValueError(f"unknown trajectory source {self.source!r}")

    def __len__(self) -> int:
        return len(self.frame_index)

    @property
    def times(self) -> np.ndarray:
        return self.frame_index * FRAME_DT

    @property
    def samples(self) -> List[Point3D]:
        return [Point3D(position=p, time=t) for p, t in zip(self.positions, self.times)]

    @property
    def bounces(self) -> List[BounceEvent]:
        return [e for e in self.events if isinstance(e, BounceEvent)]

    @property
    def hits(self) -> List[HitEvent]:
        return [e for e in self.events if isinstance(e, HitEvent)]

    def index_of(self, frame: int) -> int:
        """Index of the sample nearest to a frame"""
        i = int(np.searchsorted(self.frame_index, frame))
        if i >= len(self):
            return len(self) - 1
        if i > 0 and abs(self.frame_index[i - 1] - frame) <= abs(self.frame_index[i] - frame):
            return i - 1
        return i

    def between(self, start_frame: int, end_frame: int) -> "Trajectory3D":
        """Samples with start_frame < frame < end_frame, events dropped"""
        mask = (self.frame_index > start_frame) & (self.frame_index < end_frame)
        return self.subset(mask)

    def subset(self, mask: np.ndarray) -> "Trajectory3D":
        return Trajectory3D(
            frame_index=self.frame_index[mask],
            positions=self.positions[mask],
            events=(),
            source=self.source,
            rally_id=self.rally_id,
            velocities=None if self.velocities is None else self.velocities[mask],
            spins=None if self.spins is None else self.spins[mask],
        )

    def with_events(self, events: Sequence[Event]) -> "Trajectory3D":
        return replace(self, events=tuple(events))

    def with_positions(self, positions: np.ndarray) -> "Trajectory3D":
        return replace(self, positions=positions)

    @classmethod
    def empty(cls, source: str = "tracked", rally_id: int = 0) -> "Trajectory3D":
        return cls(frame_index=np.zeros(0, dtype=np.int64), positions=np.zeros((0, 3)),
                   source=source, rally_id=rally_id)
