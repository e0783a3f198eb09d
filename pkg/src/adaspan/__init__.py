"""Character-level transformer language model with learnable attention spans."""

from .model import ModelConfig, TransformerLM, bpc
from .span import MaskConfig, effective_span, soft_mask
from .tensor import Tensor, backward, no_grad
from .trainer import OptimConfig, train

__version__ = "0.1.0"

__all__ = [
    "MaskConfig",
    "ModelConfig",
    "OptimConfig",
    "Tensor",
    "TransformerLM",
    "backward",
    "bpc",
    "effective_span",
    "no_grad",
    "soft_mask",
    "train",
]
