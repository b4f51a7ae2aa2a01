"""Mixed Transformer U-Net built on a small numpy autodiff engine."""
from .kernels import BACKEND
from .tensor import Tensor

__version__ = "0.1.0"
