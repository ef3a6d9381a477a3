"""Factorization models over multi-field categorical data.

Library plus CLI for training and inspecting logistic scorers built from a
shared embedding table: linear, factorization-machine, feed-forward,
cross-layer and compressed-interaction components in any combination.
"""

__version__ = "0.1.0"

from .errors import (
    CapacityError,
    CheckpointError,
    ConfigError,
    DataError,
    DimensionError,
    EvaluationError,
    MetricError,
    ParseError,
    TrainingError,
    XfmError,
)

__all__ = [
    "CapacityError",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "DimensionError",
    "EvaluationError",
    "MetricError",
    "ParseError",
    "TrainingError",
    "XfmError",
    "__version__",
]
