"""Dense float64 tensors, reverse-mode autodiff, Adam and checkpoints."""
from .checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .ops import (
    action_matrix, add, bce, concat, conv2d, conv_output_size, conv_transpose2d,
    conv_transpose_output_size, getitem, gru_cell, leaky_relu, linear, matmul, mean, mse,
    mul, neg, reshape, scale, sigmoid, stack, sub, sum_, tanh, transpose,
)
from .optim import adam_step, adam_update, polyak_update, zero_grad
from .tensor import Parameter, Tensor, as_tensor, backward, checked, grad_enabled, no_grad

__all__ = [
    "Tensor", "Parameter", "as_tensor", "backward", "checked", "no_grad", "grad_enabled",
    "add", "sub", "mul", "neg", "scale", "matmul", "linear", "sum_", "mean", "reshape",
    "transpose", "getitem", "stack", "concat", "sigmoid", "tanh", "leaky_relu", "bce", "mse",
    "conv2d", "conv_transpose2d", "conv_output_size", "conv_transpose_output_size",
    "gru_cell", "action_matrix",
    "adam_step", "adam_update", "polyak_update", "zero_grad",
    "encode_checkpoint", "decode_checkpoint", "save_checkpoint", "load_checkpoint",
]
