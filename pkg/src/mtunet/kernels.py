"""Hot-kernel dispatch.

The compiled extension ``_ckernels`` is used when it has been built;
otherwise the numpy implementations in ``_pykernels`` are used. Setting
``MTUNET_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _pykernels as python_kernels

try:
    from . import _ckernels as compiled_kernels
except ImportError:  # extension not built
    compiled_kernels = None

if compiled_kernels is not None and not os.environ.get("MTUNET_PURE_PYTHON"):
    BACKEND = "cython"
    _impl = compiled_kernels
else:
    BACKEND = "python"
    _impl = python_kernels

im2col = _impl.im2col
col2im = _impl.col2im
min_distances = _impl.min_distances
