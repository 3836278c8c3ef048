"""Continuous convolution: learnable resampling by arbitrary scale factors."""

from .grid import BoundaryPolicy, ScaleSpec, index_plan, projected_grid
from .internal_net import InitSpec, InternalNetParams
from .layer import CCLayer, CCLayerConfig, ModeMismatchError, forward
from .tensor import Tape, Tensor, no_grad, precision

__all__ = [
    "BoundaryPolicy",
    "CCLayer",
    "CCLayerConfig",
    "InitSpec",
    "InternalNetParams",
    "ModeMismatchError",
    "ScaleSpec",
    "Tape",
    "Tensor",
    "forward",
    "index_plan",
    "no_grad",
    "precision",
    "projected_grid",
]

__version__ = "0.1.0"
