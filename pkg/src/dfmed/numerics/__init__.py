"""Minimal tensor library with reverse-mode autodiff."""
from . import functional
from .gradcheck import grad_check
from .nn import (
    CrossAttention,
    FeedForward,
    GRUCell,
    LayerNorm,
    Linear,
    ParamStore,
    TransformerLayer,
    scaled_dot_attention,
    sinusoidal_positions,
)
from .tensor import (
    DimensionError,
    Tensor,
    as_tensor,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "CrossAttention", "DimensionError", "FeedForward", "GRUCell", "LayerNorm", "Linear",
    "ParamStore", "Tensor", "TransformerLayer", "as_tensor", "default_dtype", "functional",
    "get_default_dtype", "grad_check", "is_grad_enabled", "no_grad", "scaled_dot_attention",
    "set_default_dtype", "sinusoidal_positions",
]
