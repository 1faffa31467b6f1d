"""Backend selection for the hot conv/pool kernels.

The compiled Cython extension is preferred when importable; otherwise the
NumPy implementation is used.  ``AGNET_KERNELS`` overrides the choice:
``auto`` (default), ``cython``, or ``numpy``.  Both backends produce the
same results within floating-point reassociation tolerance; see
``benchmarks/kernel_bench.py`` for the speed comparison.
"""

import os

from . import numpy_backend

try:
    from . import cython_backend
except ImportError:
    cython_backend = None

_CHOICE = os.environ.get("AGNET_KERNELS", "auto").lower()
if _CHOICE not in ("auto", "cython", "numpy"):
    raise ValueError(f"AGNET_KERNELS must be auto|cython|numpy, got {_CHOICE!r}")
if _CHOICE == "cython" and cython_backend is None:
    raise ImportError("AGNET_KERNELS=cython but the compiled extension is not available")

if _CHOICE == "numpy" or cython_backend is None:
    _impl = numpy_backend
else:
    _impl = cython_backend

BACKEND = _impl.NAME
conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
maxpool2d_forward = _impl.maxpool2d_forward
maxpool2d_backward = _impl.maxpool2d_backward
