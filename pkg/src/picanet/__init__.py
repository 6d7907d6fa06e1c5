"""Pixel-wise contextual attention networks for saliency detection, in plain numpy."""

from .errors import CheckpointError, ConfigurationError, DataError, NumericalError, PicanetError
from .network import NetworkSpec, SaliencyNet
from .tensor import Tape, Tensor, backward, no_grad
from .training import TrainConfig, train

__all__ = [
    "CheckpointError", "ConfigurationError", "DataError", "NumericalError", "PicanetError",
    "NetworkSpec", "SaliencyNet", "Tape", "Tensor", "backward", "no_grad", "TrainConfig", "train",
]
__version__ = "0.1.0"
