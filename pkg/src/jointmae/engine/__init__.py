from .tensor import (
    NEG_LARGE,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    additive_mask,
    as_tensor,
    backward,
    concat,
    conv2d_3x3_s2,
    gather_rows,
    gelu,
    get_default_dtype,
    layer_norm,
    linear,
    make_node,
    masked_softmax,
    matmul,
    max_,
    mean,
    mul,
    no_grad,
    record_selection,
    reshape,
    selection_log,
    set_default_dtype,
    split,
    squared_error,
    sub,
    sum_,
    swapaxes,
    transpose,
)
from .params import ParameterTree
from .optim import OptimizerState, Schedule, adamw_step, clip_grad_norm, lr_at
from .gradcheck import GradCheckReport, NondeterministicGraph, grad_check

__all__ = [name for name in dir() if not name.startswith("_")]
