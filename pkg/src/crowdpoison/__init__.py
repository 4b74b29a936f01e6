"""Data poisoning attacks and defenses for continuous-label truth discovery."""

from .core import (
    AggregationState,
    CrowdError,
    DegenerateItemError,
    EvaluationReport,
    ModelKind,
    ObservationSet,
    average_estimation_error,
    squared_distance,
)
from .truth_discovery import CrhConfig, GtmConfig, run_crh, run_engine, run_gtm

__version__ = "0.1.0"

__all__ = [
    "AggregationState", "CrowdError", "DegenerateItemError", "EvaluationReport", "ModelKind",
    "ObservationSet", "average_estimation_error", "squared_distance",
    "CrhConfig", "GtmConfig", "run_crh", "run_engine", "run_gtm",
]
