"""Joint test-stimulus / training-history tracing for text classifiers."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
