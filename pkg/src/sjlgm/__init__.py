"""Approximate Bayesian joint models for longitudinal and spatial survival data."""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    AdjacencyGraph,
    DataError,
    JointDataset,
    LongitudinalRecord,
    SurvivalRecord,
    load_dataset,
    summarize_dataset,
    write_dataset,
)
from .inference import FitResult, InferenceOptions, fit  # noqa: E402
from .model import ModelSpec, preset  # noqa: E402

__all__ = [
    "AdjacencyGraph", "DataError", "JointDataset", "LongitudinalRecord", "SurvivalRecord",
    "load_dataset", "summarize_dataset", "write_dataset", "FitResult", "InferenceOptions", "fit",
    "ModelSpec", "preset", "__version__",
]
