"""Blob-heatmap detection with an asymmetric, size-invariant loss for loosely annotated findings."""

from .annotation import Annotation
from .errors import BlobsenseError, ConfigError, DimensionError, GraphError, RangeError, ValidationError
from .estimator import HeatmapDetector
from .froc import FrocPoint, froc_curve, match, operating_point
from .hourglass import HourglassConfig
from .loss import LossConfig, ReferenceBank, total_loss
from .peaks import Peak, PeakParams, find_peaks
from .pipeline import ablation_suite
from .synth import GenConfig
from .tensor import Tensor
from .trainer import TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "Annotation", "BlobsenseError", "ConfigError", "DimensionError", "FrocPoint", "GenConfig", "GraphError",
    "HeatmapDetector", "HourglassConfig", "LossConfig", "Peak", "PeakParams", "RangeError", "ReferenceBank",
    "Tensor", "TrainConfig", "Trainer", "ValidationError", "__version__", "ablation_suite", "find_peaks",
    "froc_curve", "match", "operating_point", "total_loss",
]
