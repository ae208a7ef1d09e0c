"""Deterministic tensor core: layers, losses, optimizer, gradient oracle."""
from .gradcheck import finite_diff_check
from .layers import (
    BatchNormParams,
    DegenerateBatchError,
    DenseParams,
    GRUParams,
    batchnorm,
    conv2d,
    conv_kernel,
    deconv2d,
    deconv_kernel,
    dense,
    gate_apply,
    gru_cell,
    hard_gate,
    he_uniform,
)
from .losses import NormalizationError, cross_entropy, kl_divergence, softmax2d
from .optim import AdamState, adam_step
from .tensor import (
    DimensionError,
    Tensor,
    add,
    as_tensor,
    assert_finite,
    concat,
    default_dtype,
    flatten,
    grad_enabled,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    sub,
    tanh,
    tsum,
    use_dtype,
)
from . import rng

__all__ = [
    "AdamState",
    "BatchNormParams",
    "DegenerateBatchError",
    "DenseParams",
    "DimensionError",
    "GRUParams",
    "NormalizationError",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "assert_finite",
    "batchnorm",
    "concat",
    "conv2d",
    "conv_kernel",
    "cross_entropy",
    "deconv2d",
    "deconv_kernel",
    "default_dtype",
    "dense",
    "finite_diff_check",
    "flatten",
    "gate_apply",
    "grad_enabled",
    "gru_cell",
    "hard_gate",
    "he_uniform",
    "kl_divergence",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "rng",
    "set_default_dtype",
    "sigmoid",
    "softmax2d",
    "sub",
    "tanh",
    "tsum",
    "use_dtype",
]
