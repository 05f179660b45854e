from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .functional import conv2d, layer_norm, lstm, squash
from .gradcheck import check_gradients, numeric_grad, relative_error
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_to,
    concat,
    div,
    einsum,
    exp,
    l2_norm,
    leaky_relu,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    set_debug,
    sigmoid,
    softmax,
    sqrt,
    sub,
    tanh,
    transpose,
    tsum,
)

sum = tsum  # noqa: A001

__all__ = [
    "CheckpointError", "ShapeError", "Tensor", "add", "as_tensor", "backward", "broadcast_to",
    "check_gradients", "concat", "conv2d", "div", "einsum", "exp", "l2_norm", "layer_norm",
    "leaky_relu", "load_checkpoint", "log", "log_softmax", "lstm", "matmul", "mean", "mul",
    "no_grad", "numeric_grad", "power", "relative_error", "relu", "reshape", "save_checkpoint",
    "set_debug", "sigmoid", "softmax", "sqrt", "squash", "sub", "sum", "tanh", "transpose", "tsum",
]
