"""Hot numeric kernels with a compiled core and a numpy fallback.

The compiled extension is preferred when importable. Set
``VIEWDIFF_KERNELS=py`` to force the numpy fallback or
``VIEWDIFF_KERNELS=c`` to require the extension (ImportError if missing).
"""

from __future__ import annotations

import os

_choice = os.environ.get("VIEWDIFF_KERNELS", "auto").lower()
if _choice not in ("auto", "c", "py"):
    raise ValueError(f"VIEWDIFF_KERNELS must be 'auto', 'c' or 'py', got {_choice!r}")

if _choice == "py":
    from . import _pykernels as _impl
else:
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:
        if _choice == "c":
            raise
        from . import _pykernels as _impl  # type: ignore[no-redef]

BACKEND = _impl.BACKEND_NAME

softmax_rows = _impl.softmax_rows
softmax_rows_grad = _impl.softmax_rows_grad
layer_norm_rows = _impl.layer_norm_rows
layer_norm_rows_grad = _impl.layer_norm_rows_grad
scatter_add_rows = _impl.scatter_add_rows
kmeans_assign = _impl.kmeans_assign
adam_step = _impl.adam_step

__all__ = [
    "BACKEND",
    "softmax_rows",
    "softmax_rows_grad",
    "layer_norm_rows",
    "layer_norm_rows_grad",
    "scatter_add_rows",
    "kmeans_assign",
    "adam_step",
]
