"""Exception types shared across the pipeline."""

from __future__ import annotations


class DrivervalError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(DrivervalError):
    """A CSV input is missing a column or has an unparseable value."""

    def __init__(self, column: str, path: str | None = None, detail: str = ""):
        self.column = column
        self.path = path
        where = f" in {path}" if path else ""
        msg = f"missing or malformed column {column!r}{where}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class DataIntegrityError(DrivervalError):
    """Recorded data violates an invariant (e.g. non-contiguous frames)."""

    def __init__(self, message: str, track_id: int | None = None):
        self.track_id = track_id
        super().__init__(message)


class GeometryError(DrivervalError):
    """Road geometry cannot be built from the given lane markings."""


class MergeLaneRecordingError(DrivervalError):
    """Recording contains a merge lane and is excluded from extraction."""


class UnsuitableDemoError(DrivervalError):
    """Demonstration cannot be segmented for training."""


class ContractError(DrivervalError):
    """A caller violated a documented precondition."""


class IndefiniteHessianError(DrivervalError):
    """The negated reward Hessian of a segment is not positive definite.

    The Laplace likelihood needs ``log det(-H)``, which is undefined here.
    """

    def __init__(self, segment_index: int, message: str = ""):
        self.segment_index = segment_index
        super().__init__(message or f"-H is not positive definite in segment {segment_index}")


class PlanningError(DrivervalError):
    """The agent's planner produced a non-finite objective."""

    def __init__(self, frame: int, message: str = ""):
        self.frame = frame
        super().__init__(message or f"non-finite planner objective at frame {frame}")


class InsufficientDataError(DrivervalError):
    """Not enough paired samples for a statistic."""


class ContactError(DrivervalError):
    """Zero (or negative) bumper gap: TTC and time gap are degenerate."""

    def __init__(self, x_gap: float):
        self.x_gap = x_gap
        super().__init__(f"degenerate operational sample: x_gap={x_gap}")


class ConfigError(DrivervalError):
    """Pipeline configuration is invalid."""
