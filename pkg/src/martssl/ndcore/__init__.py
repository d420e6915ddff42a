from .autodiff import (
    EPS_POOL,
    ContractError,
    DimensionError,
    DomainError,
    Node,
    add,
    add_bias,
    backward,
    clip_,
    concat0,
    constant,
    dropout,
    elementwise,
    gelu,
    l2_normalize,
    masked_mean_pool,
    matmul,
    mean_,
    mul,
    neg,
    param,
    reachable_params,
    relu,
    reshape,
    set_check_finite,
    sigmoid,
    slice0,
    softmax_cross_entropy,
    stopgrad,
    sub,
    sum_,
    tanh,
    transpose,
    zero_grads,
)
from .optim import AdamW, tune_allocator

__all__ = [
    "EPS_POOL", "ContractError", "DimensionError", "DomainError", "Node",
    "add", "add_bias", "backward", "clip_", "concat0", "constant", "dropout",
    "elementwise", "gelu", "l2_normalize", "masked_mean_pool", "matmul",
    "mean_", "mul", "neg", "param", "reachable_params", "relu", "reshape",
    "set_check_finite", "sigmoid", "slice0", "softmax_cross_entropy",
    "stopgrad", "sub", "sum_", "tanh", "transpose", "zero_grads", "AdamW", "tune_allocator",
]
