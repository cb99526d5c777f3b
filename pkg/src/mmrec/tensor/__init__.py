from .checkpoint import CheckpointError, load_tensors, save_tensors
from .core import (
    ShapeError,
    Tensor,
    add,
    add_rows,
    backward,
    clamp_min,
    concat,
    cross_entropy_logits,
    embedding,
    exp,
    focal_token_loss,
    gelu,
    layer_norm,
    linear,
    log,
    masked_softmax,
    matmul,
    mean_all,
    mean_axis,
    mul,
    mul_const,
    no_grad,
    parameter,
    relu,
    reshape,
    scale,
    scale_by,
    softmax,
    sub,
    sum_all,
    take_rows,
    tanh,
    transpose,
    unbind,
    weighted_sum,
)
from .optim import AdamWState, adamw_step, lr_at
