from .nn import (
    ACTIVATIONS,
    LEAKY_SLOPE,
    DimensionError,
    Layer,
    MlpParams,
    init_mlp,
    mlp_forward,
    mlp_forward_traced,
    param_leaves,
)
from .optim import AdamState, adam_init, adam_step
from .serialize import (
    SerializationError,
    dump_json,
    load_json,
    load_mlp,
    mlp_from_dict,
    mlp_to_dict,
    save_mlp,
)
from .tensor import (
    AutodiffError,
    Tensor,
    as_tensor,
    broadcast_to,
    concat,
    grad,
    leaky_relu,
    matmul,
    no_grad,
    relu,
    reshape,
    row_norm,
    softplus,
    texp,
    tlog,
    tmean,
    transpose,
    tslice,
    tsum,
)
