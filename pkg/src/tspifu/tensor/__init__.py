from .autograd import (GraphError, Tensor, as_tensor, conv2d, dense, no_grad, precision,
                       softmax, softmax_rows)
from .nn import Module, MultiheadAttention, multihead_attention
from .optim import Adam, adam_step, sgd_step

__all__ = [
    "Adam", "GraphError", "Module", "MultiheadAttention", "Tensor", "adam_step", "as_tensor",
    "conv2d", "dense", "multihead_attention", "no_grad", "precision", "sgd_step", "softmax",
    "softmax_rows",
]
