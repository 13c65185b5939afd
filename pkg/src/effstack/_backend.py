"""Pick the compiled core or the pure-Python fallback.

EFFSTACK_BACKEND=python forces the fallback; =native makes a missing
extension an import error instead of a silent fallback.
"""
import os

_choice = os.environ.get("EFFSTACK_BACKEND", "auto").strip().lower()
if _choice not in ("auto", "native", "python"):
    raise ImportError(f"EFFSTACK_BACKEND must be auto, native or python, not {_choice!r}")

impl = None
if _choice != "python":
    try:
        from . import _native as impl
    except ImportError:
        if _choice == "native":
            raise
        impl = None
if impl is None:
    from ._pure import backend as impl

NAME = impl.BACKEND
NATIVE = NAME == "native"


def native_module():
    """The compiled module even when the fallback is selected, or None."""
    if NATIVE:
        return impl
    try:
        from . import _native
    except ImportError:
        return None
    return _native
