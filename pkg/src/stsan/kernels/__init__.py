"""Kernel backend selection.

The compiled extension (`stsan.kernels._core`) is preferred when importable;
otherwise the pure-numpy fallback is used. STSAN_BACKEND forces the choice:
``compiled`` (error if unavailable), ``numpy``, or ``auto`` (default).

`benchmarks/bench_kernels.py` compares the two implementations directly.
"""

import os

from . import numpy_backend

_requested = os.environ.get("STSAN_BACKEND", "auto").lower()
if _requested not in ("auto", "compiled", "numpy"):
    raise ImportError(f"STSAN_BACKEND must be auto|compiled|numpy, got {_requested!r}")

_compiled = None
if _requested in ("auto", "compiled"):
    try:
        from . import _core as _compiled
    except ImportError:
        if _requested == "compiled":
            raise ImportError(
                "STSAN_BACKEND=compiled but stsan.kernels._core is not built; "
                "install the package (pip install -e . --no-build-isolation) or "
                "set STSAN_BACKEND=numpy"
            )

_active = _compiled if _compiled is not None else numpy_backend
BACKEND = "compiled" if _active is not numpy_backend else "numpy"

im2col = _active.im2col
col2im = _active.col2im
softmax_forward = _active.softmax_forward
softmax_backward = _active.softmax_backward
layer_norm_forward = _active.layer_norm_forward
layer_norm_backward = _active.layer_norm_backward
