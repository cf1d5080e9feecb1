"""Volumetric contrastive pretraining and segmentation fine-tuning toolkit."""

from .errors import (
    ConfigError,
    DataError,
    DegenerateBatchError,
    FormatError,
    MissingArtifactError,
    TrainingError,
    VolconError,
)

__all__ = [
    "ConfigError",
    "DataError",
    "DegenerateBatchError",
    "FormatError",
    "MissingArtifactError",
    "TrainingError",
    "VolconError",
]

__version__ = "0.1.0"
