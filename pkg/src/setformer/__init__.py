"""Squeeze-excite transformer pipeline for wearable-sensor activity windows."""

__version__ = "0.1.0"

from .model import ForwardResult, ModelConfig, ModelParams, forward
from .tensor import Tensor, grad_check, tape
from .train import Adam, TrainConfig, cross_entropy, evaluate, fit

__all__ = [
    "Adam",
    "ForwardResult",
    "ModelConfig",
    "ModelParams",
    "Tensor",
    "TrainConfig",
    "cross_entropy",
    "evaluate",
    "fit",
    "forward",
    "grad_check",
    "tape",
    "__version__",
]
