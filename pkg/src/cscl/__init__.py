"""Contextual and semantic consistency learning for multimodal manipulation detection."""

from .config import GenConfig, RunConfig, ValidationError
from .autodiff import NumericError, ParamStore, Tensor, backward, grad_check
from .model import CSCLModel

__all__ = ["GenConfig", "RunConfig", "ValidationError", "NumericError", "ParamStore", "Tensor",
           "backward", "grad_check", "CSCLModel"]
__version__ = "0.1.0"
