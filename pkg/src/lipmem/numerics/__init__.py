from . import autodiff as ad
from .autodiff import (
    Node, abs, add, backward, clip, concat, constant, cosine_matrix, cosine_sim, detach,
    div, exp, getitem, kl_div, l1_loss, l2_normalize, log, matmul, mean, mse_loss, mul,
    neg, parameter, relu, reshape, sigmoid, softmax_scaled, square, sub, sum, tanh,
    transpose,
)
from .gradcheck import OP_SUITE, GradCheckReport, finite_diff_check, run_op_suite
from .optim import ParamStore, adam_step

__all__ = [
    "ad", "Node", "abs", "add", "backward", "clip", "concat", "constant", "cosine_matrix",
    "cosine_sim", "detach", "div", "exp", "getitem", "kl_div", "l1_loss", "l2_normalize",
    "log", "matmul", "mean", "mse_loss", "mul", "neg", "parameter", "relu", "reshape",
    "sigmoid", "softmax_scaled", "square", "sub", "sum", "tanh", "transpose",
    "OP_SUITE", "GradCheckReport", "finite_diff_check", "run_op_suite", "ParamStore", "adam_step",
]
