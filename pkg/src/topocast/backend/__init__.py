"""Kernel backend selection.

The compiled Cython extension is preferred when importable; otherwise the
numpy implementations are used. Override with ``TOPOCAST_KERNELS=numpy``
or ``TOPOCAST_KERNELS=compiled`` (the latter raises if the extension is
missing).
"""

import os

from . import numpy_kernels

kernels = numpy_kernels
kernels_name = "numpy"

_choice = os.environ.get("TOPOCAST_KERNELS", "auto").lower()
if _choice not in ("auto", "compiled", "numpy"):
    raise ValueError(f"TOPOCAST_KERNELS must be auto/compiled/numpy, got {_choice!r}")

if _choice in ("auto", "compiled"):
    try:
        from . import _kernels as _compiled

        kernels = _compiled
        kernels_name = "compiled"
    except ImportError:
        if _choice == "compiled":
            raise


def get_kernels(name):
    """Return a specific kernel module by name ("numpy" or "compiled")."""
    if name == "numpy":
        return numpy_kernels
    if name == "compiled":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")
