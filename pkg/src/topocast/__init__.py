"""topocast: a desk-scale transformer forecaster that injects the input
tokens' positional and semantic structure into every encoder layer, trained
with a two-stage (inner model / outer injection-weight) optimization loop.
"""

from .backend import kernels_name
from .tensor import Graph, NumericalError, ShapeError, Tensor

__version__ = "0.1.0"

__all__ = [
    "Graph",
    "NumericalError",
    "ShapeError",
    "Tensor",
    "kernels_name",
    "__version__",
]
