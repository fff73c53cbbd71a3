from .gradcheck import GradCheckResult, fd_gradcheck, rel_error
from .optim import AdamState, adam_update
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    abs_,
    add,
    as_tensor,
    astype,
    avg_pool2,
    backward,
    branch_record,
    broadcast_to,
    clip,
    concat,
    conv2d,
    current_tape,
    detach,
    elementwise,
    exp,
    global_avg_pool,
    l1_mean,
    l2_sq_mean,
    masked_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    record_branch,
    reduction,
    relu,
    reshape,
    softmax,
    stack,
    straight_through,
    sub,
    sum_,
    take,
    transpose,
    upsample2,
)
