"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``DSPR_PURE=1`` to force the numpy path (used by the benchmark and tests).
"""

import os

from . import _pure

BACKEND = "pure"
_impl = _pure

if not os.environ.get("DSPR_PURE"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _pure

moving_average = _impl.moving_average
moving_average_adjoint = _impl.moving_average_adjoint
window_bias = _impl.window_bias

__all__ = ["BACKEND", "moving_average", "moving_average_adjoint", "window_bias"]
