from .functional import (
    batchnorm3d,
    concat,
    conv3d,
    conv3d_transposed,
    leaky_relu,
    pad,
    sigmoid,
)
from .gradcheck import gradcheck, numeric_grad, relative_error
from .layers import BatchNorm3d, Conv3d, ConvBlock, ConvSpec, Module
from .serialization import load_tensors, save_tensors
from .tensor import NonFiniteError, Tensor, no_grad

__all__ = [
    "BatchNorm3d", "Conv3d", "ConvBlock", "ConvSpec", "Module", "NonFiniteError", "Tensor",
    "batchnorm3d", "concat", "conv3d", "conv3d_transposed", "gradcheck", "leaky_relu",
    "load_tensors", "no_grad", "numeric_grad", "pad", "relative_error", "save_tensors", "sigmoid",
]
