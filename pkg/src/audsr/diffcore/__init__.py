from .gradcheck import GradCheckError, GradCheckReport, grad_check, relative_error
from .params import (
    CheckpointError,
    ParamStore,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import (
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    absolute,
    activation,
    add,
    amax,
    as_tensor,
    avgpool2,
    clip,
    concat,
    conv2d,
    conv_output_size,
    div,
    flatten,
    linear,
    log,
    matmul,
    mean,
    mul,
    power,
    relu,
    reshape,
    sigmoid,
    square,
    sub,
    tanh,
    tsum,
)

__all__ = [name for name in dir() if not name.startswith("_")]
