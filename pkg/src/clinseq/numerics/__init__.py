from .autograd import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    attention_bias_add,
    concat,
    embedding,
    exp,
    gelu,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    square,
    sub,
    tabs,
    take,
    tmean,
    transpose,
    tsum,
)
from .gradcheck import check_grad, numeric_grad, relative_error
from .optim import AdamW, OptimizerState, adamw_step, clip_grad_norm, global_norm
