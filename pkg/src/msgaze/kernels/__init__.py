"""Hot inner loops, compiled when the extension is built.

The Cython extension is preferred; if it is missing (or ``MSGAZE_PURE_PYTHON``
is set) the numpy fallback is used. Both expose the same three functions and
``BACKEND`` names the one in use.
"""
import os

from . import _fallback

if os.environ.get("MSGAZE_PURE_PYTHON"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

fill_polygon = _impl.fill_polygon
draw_line = _impl.draw_line
noise_response_sumsq = _impl.noise_response_sumsq

__all__ = ["BACKEND", "fill_polygon", "draw_line", "noise_response_sumsq"]
