"""Select the kernel backend once at import time.

The compiled extension is preferred when it imports cleanly; otherwise the
numpy fallback takes over transparently.  ``CREDITSCAN_BACKEND=python`` or
``=ext`` forces the choice (forcing ``ext`` raises if the build is absent).
"""

import os

from creditscan import _kernels_py

_forced = os.environ.get("CREDITSCAN_BACKEND", "").strip().lower()

if _forced == "python":
    _impl = _kernels_py
elif _forced == "ext":
    from creditscan import _ext as _impl
else:
    try:
        from creditscan import _ext as _impl
    except ImportError:
        _impl = _kernels_py

demean_sweeps = _impl.demean_sweeps
cluster_score_sums = _impl.cluster_score_sums


def backend_name():
    """Name of the active kernel backend: 'ext' or 'python'."""
    return _impl.BACKEND
