"""Global storage-precision switch.

Parameters and activations are stored in single precision by default;
verification code (gradient checks, algebraic identity tests) flips the
mode to double so finite-difference noise stays far below the asserted
tolerances.  The mode is read once at tensor-creation time, so tensors
built under different modes can coexist.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from ..errors import ConfigError

_MODES = {"single": np.float32, "double": np.float64}
_current = "single"


def set_precision(mode: str) -> None:
    """Select the default dtype for newly created tensors."""
    if mode not in _MODES:
        raise ConfigError(f"precision must be 'single' or 'double', got {mode!r}")
    global _current
    _current = mode


def precision() -> str:
    return _current


def dtype() -> np.dtype:
    """The numpy dtype corresponding to the active mode."""
    return np.dtype(_MODES[_current])


@contextmanager
def use_precision(mode: str):
    """Temporarily switch precision (used heavily by verification tests)."""
    previous = _current
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(previous)
