"""Hot-loop kernel selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementation in ``_kernels_py``.  Set ``CELLATTN_PURE_PYTHON=1`` to
force the fallback.
"""

import os

from . import _kernels_py

sigmoid = _kernels_py.sigmoid

if os.environ.get("CELLATTN_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "compiled" if _impl is not _kernels_py else "python"
lstm_forward = _impl.lstm_forward
lstm_backward = _impl.lstm_backward
