"""Numerical core: compiled kernels with a pure-numpy fallback.

The compiled extension is preferred when present; set the environment
variable ``RULEROB_PURE_PYTHON=1`` to force the fallback (used by the
benchmark in ``benchmarks/bench_core.py`` to compare both).
"""

from __future__ import annotations

import os

if os.environ.get("RULEROB_PURE_PYTHON"):
    from rulerob._core import _kernels_py as _impl
else:
    try:
        from rulerob._core import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:
        from rulerob._core import _kernels_py as _impl  # type: ignore[no-redef]

BACKEND: str = _impl.BACKEND
HAVE_COMPILED: bool = BACKEND == "compiled"

se_ard_cross = _impl.se_ard_cross
se_ard_gram = _impl.se_ard_gram
quintic_eval = _impl.quintic_eval

__all__ = ["BACKEND", "HAVE_COMPILED", "se_ard_cross", "se_ard_gram", "quintic_eval"]
