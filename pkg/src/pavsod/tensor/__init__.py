from . import ops
from .core import (
    GraphError,
    Node,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    debug_checks,
    default_dtype,
    get_precision,
    graph_nodes,
    no_grad,
    precision,
    set_debug,
    set_precision,
)
from .gradcheck import GradCheckReport, grad_check
from .ops import stop_gradient

__all__ = [
    "GradCheckReport",
    "GraphError",
    "Node",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "debug_checks",
    "default_dtype",
    "get_precision",
    "grad_check",
    "graph_nodes",
    "no_grad",
    "ops",
    "precision",
    "set_debug",
    "set_precision",
    "stop_gradient",
]
