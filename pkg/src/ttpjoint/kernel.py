"""Backend selection for the likelihood inner loop.

The compiled extension is used when it imported cleanly; setting the
environment variable ``TTPJOINT_NO_EXTENSION=1`` forces the pure-numpy
fallback (used by the benchmark and by the backend-equivalence tests).
"""

from __future__ import annotations

import os

from . import _kernel_fallback

if os.environ.get("TTPJOINT_NO_EXTENSION", "") == "1":
    _impl = _kernel_fallback
    BACKEND = "numpy"
else:
    try:
        from . import _kernel as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - build-environment dependent
        _impl = _kernel_fallback
        BACKEND = "numpy"

subject_logliks = _impl.subject_logliks
