"""spurfinder: automated discovery, refinement and statistical validation
of spurious-correlation failures in black-box image classifiers."""

from .core import (
    Caption,
    FailurePolicy,
    FailureRule,
    LabelHierarchy,
    Prediction,
    Sample,
    build_base_prompt,
    is_failure,
    same_parent,
)
from .discovery import BaselineResult, Hypothesis, StopRule
from .gateway import Gateway, ServiceEndpoint, WorldBackend, HttpBackend
from .store import BlobStore, RunManifest
from .synthworld import WorldConfig, default_world

__all__ = [
    "Caption",
    "FailurePolicy",
    "FailureRule",
    "LabelHierarchy",
    "Prediction",
    "Sample",
    "build_base_prompt",
    "is_failure",
    "same_parent",
    "BaselineResult",
    "Hypothesis",
    "StopRule",
    "Gateway",
    "ServiceEndpoint",
    "WorldBackend",
    "HttpBackend",
    "BlobStore",
    "RunManifest",
    "WorldConfig",
    "default_world",
]

__version__ = "0.1.0"
