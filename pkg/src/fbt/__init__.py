"""Cross-architecture knowledge distillation through a fused bridge model.

The fused classifier splices the early stages of a CNN-family model onto the
late stages of an attention/MLP-family model through a trainable
local-to-global projector; teacher, fused model, and student then train
jointly under a three-pair transfer loss (target-enhanced logit matching plus
contrastive feature alignment).
"""

from . import tensor
from .tensor import Parameter, Tensor, no_grad, using_dtype, verification

__all__ = ["Parameter", "Tensor", "no_grad", "tensor", "using_dtype", "verification"]

__version__ = "0.1.0"
