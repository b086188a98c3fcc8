"""Skeleton-based action recognition with pre-processing variants and fused Bi-LSTM classifiers."""
from skelfusion.errors import (
    CacheIntegrityError,
    DataValidationError,
    FormatMixError,
    SkelfusionError,
    TrainingDivergedError,
)
from skelfusion.skeleton import Action, BodyModelDef, Dataset, FoldSplit

__all__ = [
    "Action",
    "BodyModelDef",
    "CacheIntegrityError",
    "DataValidationError",
    "Dataset",
    "FoldSplit",
    "FormatMixError",
    "SkelfusionError",
    "TrainingDivergedError",
]
__version__ = "0.1.0"
