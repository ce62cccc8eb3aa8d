"""Multi-view plane-sweep dense matching with geometry priors and SGM."""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
