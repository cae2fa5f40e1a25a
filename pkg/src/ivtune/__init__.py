"""Frozen-backbone infrared/visible prompt tuning at toy scale."""

from .autograd import Parameter, Tensor, backward, finite_diff_check
from .backbone import ModelConfig
from .kernels import BACKEND
from .model import IVModel, model_forward, partition_params

__all__ = [
    "BACKEND",
    "IVModel",
    "ModelConfig",
    "Parameter",
    "Tensor",
    "backward",
    "finite_diff_check",
    "model_forward",
    "partition_params",
]
__version__ = "0.1.0"
