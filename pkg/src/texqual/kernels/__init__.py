"""Hot numeric kernels with a compiled core and a pure-NumPy fallback.

The compiled extension (`_cyops`, Cython) is preferred when it imported
successfully; otherwise the NumPy implementations in `_npops` are used.
Selection happens once at import time and can be forced with the
environment variable ``TEXQUAL_BACKEND``:

* ``TEXQUAL_BACKEND=numpy``  - always use the pure-NumPy fallback
* ``TEXQUAL_BACKEND=cython`` - require the extension (ImportError if missing)
* unset / ``auto``           - compiled if available, else fallback

Both backends implement the same contract (see `_npops` docstrings) and
agree to floating-point rounding; a given run is deterministic for a
given backend.  ``benchmarks/bench_kernels.py`` compares their speed.
"""

from __future__ import annotations

import os

from . import _npops

_choice = os.environ.get("TEXQUAL_BACKEND", "auto").lower()

if _choice == "numpy":
    _impl = _npops
elif _choice == "cython":
    from . import _cyops as _impl
else:
    try:
        from . import _cyops as _impl
    except ImportError:
        _impl = _npops

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
bilateral_filter = _impl.bilateral_filter


def backend_name() -> str:
    """Name of the active backend: 'cython' or 'numpy'."""
    return getattr(_impl, "BACKEND", "numpy")
