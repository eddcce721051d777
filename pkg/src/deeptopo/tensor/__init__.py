from .core import (OpRecord, Tensor, as_tensor, backward, is_grad_enabled, no_grad, record_branches,
                   replay_branches, topological_order)
from .gradcheck import grad_check
from .ops import (
    add,
    attention_block,
    attention_weights,
    batch_norm_2d,
    bilinear_sample,
    bilinear_upsample_x2,
    broadcast_to,
    channel_mix,
    concat,
    conv2d,
    depthwise_conv2d,
    div,
    exp,
    gelu,
    getitem,
    global_avg_pool,
    layer_norm,
    linear,
    log,
    matmul,
    mean,
    mul,
    neg,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sqrt,
    stack,
    sub,
    take_tokens,
    transpose,
)

__all__ = [
    "OpRecord", "Tensor", "as_tensor", "backward", "is_grad_enabled", "no_grad",
    "record_branches", "replay_branches",
    "topological_order", "grad_check", "add", "attention_block", "attention_weights",
    "batch_norm_2d", "bilinear_sample", "channel_mix", "bilinear_upsample_x2", "broadcast_to", "concat",
    "conv2d", "depthwise_conv2d", "div", "exp", "gelu", "getitem", "global_avg_pool",
    "layer_norm", "linear", "log", "matmul", "mean", "mul", "neg", "relu", "reshape",
    "sigmoid", "softmax", "softplus", "sqrt", "stack", "sub", "take_tokens", "transpose",
]
