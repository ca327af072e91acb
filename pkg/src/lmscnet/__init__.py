"""Lightweight multiscale semantic scene completion on dense voxel grids."""
from .tensor import Tensor, no_grad, set_default_dtype, get_default_dtype
from .ops import (
    concat,
    conv2d,
    conv3d,
    conv_transpose2d,
    maxpool2d,
    nearest_upsample2d,
    relu,
    weighted_masked_cross_entropy,
)
from .optim import AdamState, Parameter, adam_step

__version__ = "0.1.0"
