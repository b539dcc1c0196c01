"""
Error types for SpinFlow
Every failure the library raises derives from SpinFlowError
"""

from typing import Optional


class SpinFlowError(Exception):
    """Base class for all SpinFlow errors"""


class ConfigError(SpinFlowError, ValueError):
    """A configuration value is missing, unknown in type, or out of range"""


class SchemaError(SpinFlowError, ValueError):
    """An input record does not match its documented schema"""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")


# geometry
class PointBehindCamera(SpinFlowError, ValueError):
    pass


class DegenerateRays(SpinFlowError, ValueError):
    pass


# simulator
class BelowTable(SpinFlowError, ValueError):
    pass


class BallOutOfPlay(SpinFlowError):
    pass


# tracker
class SingularInnovation(SpinFlowError):
    pass


# trajectory
class RankDeficient(SpinFlowError, ValueError):
    pass


# spin
class InsufficientContext(SpinFlowError):
    pass


class SegmentTooShort(SpinFlowError, ValueError):
    pass


# gatedcell
class ShapeMismatch(SpinFlowError, ValueError):
    pass


class OutOfBounds(SpinFlowError, IndexError):
    pass


class DivergedLoss(SpinFlowError):
    pass


# bench
class BudgetExceeded(SpinFlowError):
    """p99 frame latency is above the real-time budget"""

    def __init__(self, p99_ms: float, budget_ms: float):
        self.p99_ms = p99_ms
        self.budget_ms = budget_ms
        super().__init__(f"p99 latency {p99_ms:.4f} ms exceeds budget {budget_ms:.4f} ms")
