"""Numerical heat flow for alpha-Dirac-harmonic maps on flat spin 2-tori."""

from . import analysis, cli, dirac, flow, geometry, validate
from .errors import (
    BeyondInjectivity,
    ConfigError,
    ContinuationAborted,
    DiracflowError,
    EigensolveFailure,
    KernelNotMinimal,
    NotTangent,
    ProjectionDegenerate,
    RestartExhausted,
    StepRejected,
    TubeViolation,
)

__all__ = [
    "analysis",
    "cli",
    "dirac",
    "flow",
    "geometry",
    "validate",
    "BeyondInjectivity",
    "ConfigError",
    "ContinuationAborted",
    "DiracflowError",
    "EigensolveFailure",
    "KernelNotMinimal",
    "NotTangent",
    "ProjectionDegenerate",
    "RestartExhausted",
    "StepRejected",
    "TubeViolation",
]
