from .tensor import (
    PRIMITIVES,
    Node,
    ShapeError,
    Tensor,
    UnknownOpError,
    backward,
    build_tape,
    default_dtype,
    detach,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    parameter,
    primitive_apply,
    set_default_dtype,
    tensor,
)
from .optim import Adam, AdamHyper, NonFiniteGradientError, adam_step
from .checkpoint import CheckpointError, load_arrays, save_arrays

__all__ = [
    "PRIMITIVES", "Node", "ShapeError", "Tensor", "UnknownOpError", "backward", "build_tape", "default_dtype", "detach",
    "get_default_dtype", "is_grad_enabled", "no_grad", "parameter", "primitive_apply", "set_default_dtype",
    "tensor", "Adam", "AdamHyper", "NonFiniteGradientError", "adam_step", "CheckpointError", "load_arrays",
    "save_arrays",
]
