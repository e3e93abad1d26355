from .tensor import (
    NonFiniteError,
    Tensor,
    add,
    as_tensor,
    check_finite,
    div,
    exp,
    is_grad_enabled,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    reshape,
    stack,
    sub,
    sum,
    transpose,
)
from .functional import (
    ACTIVATIONS,
    BatchNormState,
    activation,
    batchnorm,
    broadcast_add_channel,
    conv2d,
    cross_entropy,
    dropout,
    one_hot,
    relu,
    softmax,
    tanh,
)
from .gradcheck import GradCheckReport, grad_check, numeric_grad, rel_error
