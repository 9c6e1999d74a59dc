"""Calibration-aware training under distribution shift, on a small numpy autodiff core."""

__version__ = "0.1.0"

from .autograd import Tensor, backward, grad_check, no_grad
from .errors import FalconError
from .kernels import BACKEND

__all__ = ["Tensor", "backward", "grad_check", "no_grad", "FalconError", "BACKEND", "__version__"]
