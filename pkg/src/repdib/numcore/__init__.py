from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .nn import Linear, Mlp, Module, forward_mlp
from .optim import Adam, adam_step
from .tensor import (
    NonFiniteError,
    Tensor,
    as_tensor,
    backward,
    clip,
    concat,
    exp,
    gather,
    l2_normalize,
    log,
    log_softmax,
    matmul,
    relu,
    softmax,
    sqrt,
    square,
    stop_gradient,
    straight_through,
    tanh,
)

__all__ = [
    "Adam", "CheckpointError", "Linear", "Mlp", "Module", "NonFiniteError", "Tensor",
    "adam_step", "as_tensor", "backward", "clip", "concat", "exp", "forward_mlp", "gather",
    "l2_normalize", "load_checkpoint", "log", "log_softmax", "matmul", "relu", "save_checkpoint",
    "softmax", "sqrt", "square", "stop_gradient", "straight_through", "tanh",
]
