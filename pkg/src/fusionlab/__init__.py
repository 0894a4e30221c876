"""fusionlab: unsupervised meta-continual learning with attention-pooled
meta-examples (FUSION pipeline) and a class-incremental benchmark harness."""

__version__ = "0.1.0"

from .tensor import Tensor, ShapeError, DivergenceError

__all__ = ["Tensor", "ShapeError", "DivergenceError", "__version__"]
