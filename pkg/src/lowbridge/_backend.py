"""Select the compiled kernels if available, else the numpy fallback.

Set ``LOWBRIDGE_PURE_PYTHON=1`` before import to force the fallback.
"""

import os

from lowbridge import _pykernels

if os.environ.get("LOWBRIDGE_PURE_PYTHON", "") not in ("", "0"):
    kernels = _pykernels
    BACKEND = "python"
else:
    try:
        from lowbridge import _ckernels as kernels
        BACKEND = "cython"
    except ImportError:
        kernels = _pykernels
        BACKEND = "python"

__all__ = ["kernels", "BACKEND"]
