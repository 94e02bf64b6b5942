"""Universal EEG encoders on a small numpy autodiff framework."""
from ._kernels import BACKEND
from .tensor import Tape, Tensor, backward, grad_check, precision

__version__ = "0.1.0"
__all__ = ["BACKEND", "Tape", "Tensor", "backward", "grad_check", "precision"]
