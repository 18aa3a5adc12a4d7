"""Plan, predict and monitor data-parallel training on heterogeneous cloud instances."""

from .core import (
    MIN_COST,
    MIN_TIME,
    DomainError,
    ModelProfile,
    PiecewiseLatencyModel,
    Plan,
    PlanEntry,
    Segment,
    TrainJob,
    UnsatError,
    VmType,
    validate_plan,
)

__version__ = "0.1.0"

__all__ = [
    "MIN_COST",
    "MIN_TIME",
    "DomainError",
    "ModelProfile",
    "PiecewiseLatencyModel",
    "Plan",
    "PlanEntry",
    "Segment",
    "TrainJob",
    "UnsatError",
    "VmType",
    "validate_plan",
]
