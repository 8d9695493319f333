from .tensor import (
    Tensor,
    ShapeError,
    no_grad,
    as_tensor,
    add,
    sub,
    mul,
    div,
    power,
    exp,
    log,
    relu,
    gelu,
    tsum,
    tmean,
    matmul,
    reshape,
    swapaxes,
    concat,
    gather,
    scatter_nd,
    softmax,
    log_softmax,
    logsumexp,
    layer_norm,
    assert_finite,
)
from .params import (
    ParamSet,
    linear_init,
    embedding_init,
    init_linear,
    linear,
    init_layernorm,
    layernorm,
    init_embedding,
    embedding,
)
from .optim import OptimizerState, make_optimizer, optimizer_step, polyak_update
from .checkpoint import save_params, load_params

__all__ = [
    "Tensor", "ShapeError", "no_grad", "as_tensor",
    "add", "sub", "mul", "div", "power", "exp", "log", "relu", "gelu",
    "tsum", "tmean", "matmul", "reshape", "swapaxes", "concat", "gather",
    "scatter_nd", "softmax", "log_softmax", "logsumexp", "layer_norm",
    "assert_finite",
    "ParamSet", "linear_init", "embedding_init", "init_linear", "linear",
    "init_layernorm", "layernorm", "init_embedding", "embedding",
    "OptimizerState", "make_optimizer", "optimizer_step", "polyak_update",
    "save_params", "load_params",
]
