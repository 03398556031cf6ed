"""Learnable pooling of frame-level descriptors into global video vectors."""

from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    FormatError,
    NumericError,
    PoolforgeError,
)
from .gradcheck import GradCheckReport, grad_check
from .models import ARCHITECTURES, ModelConfig, ModelParams, build_params, forward
from .tensor import (
    Gradients,
    NormState,
    Tape,
    Tensor,
    default_dtype,
    default_eps,
    set_default_dtype,
)
from .training import AdamState, TrainConfig, adam_step, evaluate, train

__version__ = "0.1.0"
