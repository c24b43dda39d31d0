"""Kernel backend selection: compiled Cython core with a pure-numpy fallback.

The compiled module is preferred when importable; set ``FREQCTL_PURE_PYTHON=1``
to force the fallback. ``freqctl.dynamics`` looks the three entry points up on
this module at call time, so :func:`use_backend` can swap them for benchmarks.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

from . import pykernels

if os.environ.get("FREQCTL_PURE_PYTHON", "0") not in ("", "0"):
    _impl = pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl  # type: ignore[attr-defined]
        BACKEND = "compiled"
    except ImportError:
        _impl = pykernels
        BACKEND = "python"

residual_eval = _impl.residual_eval
trap_newton = _impl.trap_newton
alg_solve = _impl.alg_solve


def backends():
    """Name -> module map of the kernel backends importable right now."""
    available = {"python": pykernels}
    try:
        from . import _ckernels  # type: ignore[attr-defined]
        available["compiled"] = _ckernels
    except ImportError:
        pass
    return available


@contextmanager
def use_backend(name: str):
    """Temporarily route kernel calls to the named backend."""
    global residual_eval, trap_newton, alg_solve
    mod = backends()[name]
    saved = (residual_eval, trap_newton, alg_solve)
    residual_eval, trap_newton, alg_solve = (
        mod.residual_eval, mod.trap_newton, mod.alg_solve)
    try:
        yield mod
    finally:
        residual_eval, trap_newton, alg_solve = saved
