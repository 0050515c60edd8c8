from .tensor import Tensor, backward, concat, parameter
from .layers import (
    ForwardContext,
    MlpSpec,
    context_normalize,
    l2_normalize_rows,
    mlp_apply,
)
from .gradcheck import finite_diff_gradient, relative_error

__all__ = [
    "Tensor",
    "backward",
    "concat",
    "parameter",
    "ForwardContext",
    "MlpSpec",
    "context_normalize",
    "l2_normalize_rows",
    "mlp_apply",
    "finite_diff_gradient",
    "relative_error",
]
