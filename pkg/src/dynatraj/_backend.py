"""Select the compiled core when available, else the numpy fallback.

Set ``DYNATRAJ_BACKEND=python`` to force the fallback.
"""
import os

from . import _fallback

BACKENDS = {"python": _fallback}
try:
    from . import _core

    BACKENDS["cython"] = _core
except ImportError:
    pass

if os.environ.get("DYNATRAJ_BACKEND", "").lower() == "python" or "cython" not in BACKENDS:
    NAME = "python"
else:
    NAME = "cython"
impl = BACKENDS[NAME]
