"""Pruning and knowledge-distillation experiments on micro networks."""

from ._core import (
    ConfigError,
    FormatError,
    Model,
    NumericError,
    ShapeError,
    confidence_from_stddev,
    confidence_report,
    cross_entropy,
    expand_soft_target,
    kd_loss,
    naswot_from_jacobians,
    report_markdown,
    run_experiment,
    surplus,
)

__all__ = [
    "ConfigError",
    "FormatError",
    "Model",
    "NumericError",
    "ShapeError",
    "confidence_from_stddev",
    "confidence_report",
    "cross_entropy",
    "expand_soft_target",
    "kd_loss",
    "naswot_from_jacobians",
    "report_markdown",
    "run_experiment",
    "surplus",
]
