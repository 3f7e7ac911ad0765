"""Multi-site 3D lesion segmentation with domain-regularized training."""

from .tensor import GraphNode, ShapeError, Tensor, backward, concat

__version__ = "0.1.0"

__all__ = ["Tensor", "GraphNode", "ShapeError", "backward", "concat"]
