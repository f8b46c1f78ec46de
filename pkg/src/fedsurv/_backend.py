"""Kernel backend selection, decided once at import.

The compiled extension is used when it imported cleanly; otherwise the
numpy fallback. FEDSURV_BACKEND={auto,compiled,python} overrides:
"compiled" raises if the extension is missing, "python" forces the fallback.
"""
import os

from . import _pykernels

_choice = os.environ.get("FEDSURV_BACKEND", "auto").lower()
if _choice not in ("auto", "compiled", "python"):
    raise ValueError(f"FEDSURV_BACKEND must be auto, compiled or python, got {_choice!r}")

_ext = None
if _choice in ("auto", "compiled"):
    try:
        from . import _ckernels as _ext
    except ImportError:
        _ext = None
    if _choice == "compiled" and _ext is None:
        raise ImportError("FEDSURV_BACKEND=compiled but fedsurv._ckernels is not built")

kernels = _ext if _ext is not None else _pykernels


def backend_name() -> str:
    return "python" if kernels is _pykernels else "compiled"
