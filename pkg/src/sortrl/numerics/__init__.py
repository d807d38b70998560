from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    abs_elem,
    add,
    affine,
    argsort_desc,
    as_tensor,
    log_sum_exp,
    matmul,
    mean,
    mul,
    neg,
    pick,
    pnorm_last,
    relu,
    reshape,
    softmax,
    sort_desc,
    sortnet_contract,
    square,
    sub,
    sum_,
)
from .optim import AdamWState, ParamStore, UsageError, adamw_step
from .gradcheck import grad_check, numeric_grad
from . import checkpoint

__all__ = [
    "AdamWState", "NonFiniteError", "ParamStore", "ShapeError", "Tensor", "UsageError",
    "abs_elem", "add", "adamw_step", "affine", "argsort_desc", "as_tensor", "checkpoint",
    "grad_check", "log_sum_exp", "matmul", "mean", "mul", "neg", "numeric_grad", "pick",
    "pnorm_last", "relu", "reshape", "softmax", "sort_desc", "sortnet_contract", "square", "sub", "sum_",
]
