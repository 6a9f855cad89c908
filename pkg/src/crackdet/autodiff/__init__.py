from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .ops import (BatchNormState, PoolIndices, batchnorm2d, bce_with_logits, concat, conv2d,
                  max_unpool2d, maxpool2d, relu, sigmoid, upsample_bilinear)
from .optim import AdamState, adam_step, he_init
from .tensor import Tensor, parameter

__all__ = [
    "AdamState", "BatchNormState", "PoolIndices", "Tensor", "adam_step", "batchnorm2d",
    "bce_with_logits", "concat", "conv2d", "grad_check", "he_init", "load_checkpoint",
    "max_unpool2d", "maxpool2d", "parameter", "relu", "save_checkpoint", "sigmoid",
    "upsample_bilinear",
]
