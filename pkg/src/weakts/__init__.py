"""Weakly-labelled multivariate time-series classification.

A float64 reverse-mode autodiff core, convolutional/recurrent/attention
layers, the CNN-LSTM-attention model zoo, the weak-label data pipeline, a
synthetic corpus generator, the training protocol, and a ROCKET baseline.
"""

from .errors import (ConfigurationError, ContractError, DimensionError, NumericError, ParseError,
                     TapeError, WeakTSError)
from .tensor import Tape, Tensor, no_grad
from .zoo import MODEL_NAMES, ModelSpec, TSCModel

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "ContractError", "DimensionError", "NumericError", "ParseError",
    "TapeError", "WeakTSError", "Tape", "Tensor", "no_grad", "MODEL_NAMES", "ModelSpec",
    "TSCModel",
]
