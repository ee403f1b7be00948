"""Differentiable primitives, optimizer, scheduler, and gradient checking."""

from slicegate.numerics.tensor import (
    Tensor,
    add,
    bce_with_logits,
    div,
    embedding_rows,
    exp,
    finite_checks,
    gelu,
    getitem,
    layer_norm,
    log,
    matmul,
    mul,
    no_grad,
    power,
    reduce_mean,
    reduce_sum,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    stack,
    transpose,
)
from slicegate.numerics.nn import (
    FeedForward,
    LayerNorm,
    MultiHeadSelfAttention,
    ParamStore,
    TransformerLayer,
    drop_path,
    drop_path_rates,
    trunc_normal,
    xavier,
)
from slicegate.numerics.optim import AdamW, ParamGroup, SchedulerState, apply_lrs, lr_at_epoch
from slicegate.numerics.gradcheck import GradCheckResult, grad_check

__all__ = [
    "Tensor", "add", "bce_with_logits", "div", "embedding_rows", "exp",
    "finite_checks", "gelu", "getitem", "layer_norm", "log", "matmul", "mul",
    "no_grad", "power", "reduce_mean", "reduce_sum", "reshape", "sigmoid",
    "softmax", "sqrt", "stack", "transpose",
    "FeedForward", "LayerNorm", "MultiHeadSelfAttention", "ParamStore",
    "TransformerLayer", "drop_path", "drop_path_rates", "trunc_normal", "xavier",
    "AdamW", "ParamGroup", "SchedulerState", "apply_lrs", "lr_at_epoch",
    "GradCheckResult", "grad_check",
]
