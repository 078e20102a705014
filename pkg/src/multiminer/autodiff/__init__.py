from .tensor import Parameter, Tensor, as_tensor, grad_enabled, no_grad, sgd_step
from .ops import (
    add, bilinear_resize, concat, conv2d, divide, elementwise_min, getitem, global_avg_pool,
    linear, log_sigmoid, masked_channel_min, matmul, max_pool, mean, multilabel_bce, multiply,
    neg, relu, reshape, resize_np, softplus, spatial_max, spatial_min, sqrt, square, sub, sum,
    tanh,
)
from .checkpoint import load_params, save_params
from .gradcheck import numerical_grad, check_gradients

__all__ = [
    "Parameter", "Tensor", "as_tensor", "grad_enabled", "no_grad", "sgd_step", "add",
    "bilinear_resize", "concat", "conv2d", "divide", "elementwise_min", "getitem",
    "global_avg_pool", "linear", "log_sigmoid", "masked_channel_min", "matmul", "max_pool",
    "mean", "multilabel_bce", "multiply", "neg", "relu", "reshape", "resize_np", "softplus",
    "spatial_max", "spatial_min", "sqrt", "square", "sub", "sum", "tanh", "load_params",
    "save_params", "numerical_grad", "check_gradients",
]
