"""Continuous CTR training under delayed feedback with fake-negative corrections."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    Hyperparams,
    ImpressionEvent,
    ModelSnapshot,
    SparseVector,
    TrainingExample,
)
from .estimator import CTRClassifier  # noqa: E402
from .losses import LOSS_NAMES, fn_calibrate, loss_by_name  # noqa: E402

__all__ = [
    "CTRClassifier",
    "Hyperparams",
    "ImpressionEvent",
    "LOSS_NAMES",
    "ModelSnapshot",
    "SparseVector",
    "TrainingExample",
    "fn_calibrate",
    "loss_by_name",
]
