"""Kernel backend selection.

The compiled Cython kernel is used when it imports; otherwise the numpy reference
implementation is used. ``QUADRL_BACKEND=python`` forces the fallback.
"""

import logging
import os

from . import _pykernel

logger = logging.getLogger(__name__)

_forced = os.environ.get("QUADRL_BACKEND", "").strip().lower()

if _forced == "python":
    kernel = _pykernel
    NAME = "python"
else:
    try:
        from . import _ckernel as kernel  # type: ignore[attr-defined]

        NAME = "cython"
    except ImportError:
        if _forced == "cython":
            raise
        logger.info("compiled kernel unavailable, using the numpy fallback")
        kernel = _pykernel
        NAME = "python"

python_kernel = _pykernel
