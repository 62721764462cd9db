"""resattn: stacked-attention residual CNNs on a tape-based autodiff core."""

from . import _threads  # noqa: F401  (must precede numpy import)
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "__version__"]
