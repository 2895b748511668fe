"""Answer first-order queries over incomplete knowledge graphs by message passing on query graphs."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
