"""Backend selection for the hot convolution kernels.

The environment variable ``OSKT_BACKEND`` picks the implementation:

* ``numba`` - jit-compiled loops (the default when numba is installed)
* ``numpy`` - vectorized im2col fallback

``benchmarks/bench_kernels.py`` times the two against each other.
"""

from __future__ import annotations

import os

from ...errors import ConfigError

_requested = os.environ.get("OSKT_BACKEND", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise ConfigError(f"OSKT_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

if _requested == "numpy":
    from . import conv_numpy as _impl
else:
    try:
        from . import conv_numba as _impl
    except ImportError:
        if _requested == "numba":
            raise
        from . import conv_numpy as _impl

BACKEND = _impl.BACKEND_NAME

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_kernel = _impl.conv2d_backward_kernel


def active_backend() -> str:
    return BACKEND
