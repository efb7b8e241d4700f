"""Minimal differentiable numeric kernel."""
from .adam import Adam, AdamState, adam_step
from .autograd import (
    Tensor,
    as_tensor,
    backprop,
    concat,
    log_softmax,
    logsumexp,
    ordered_mean,
    ordered_sum,
    parameter,
    softmax,
)
from .gradcheck import GradCheckReport, finite_difference_check, numeric_gradient
from .layers import (
    cosine_similarity,
    l2_normalize,
    layer_norm,
    linear,
    multi_head_self_attention,
    pairwise_sq_l2,
    sq_l2_distance,
    transformer_block,
)

__all__ = [
    "Adam", "AdamState", "adam_step", "Tensor", "as_tensor", "backprop", "concat",
    "log_softmax", "logsumexp", "ordered_mean", "ordered_sum", "parameter", "softmax",
    "GradCheckReport", "finite_difference_check", "numeric_gradient",
    "cosine_similarity", "l2_normalize", "layer_norm", "linear",
    "multi_head_self_attention", "pairwise_sq_l2", "sq_l2_distance", "transformer_block",
]
