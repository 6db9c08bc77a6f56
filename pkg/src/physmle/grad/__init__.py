"""Minimal dense-tensor autodiff used by the model and the losses."""
from . import ops
from .gradcheck import check_gradients
from .nn import BatchNorm2d, Conv2d, InstanceNorm2d, Linear, Module, Parameter
from .ops import DimensionError
from .tensor import Graph, Node, Tensor, as_tensor, backward, no_grad, precision

__all__ = [
    "BatchNorm2d",
    "Conv2d",
    "DimensionError",
    "Graph",
    "InstanceNorm2d",
    "Linear",
    "Module",
    "Node",
    "Parameter",
    "Tensor",
    "as_tensor",
    "backward",
    "check_gradients",
    "no_grad",
    "ops",
    "precision",
]
