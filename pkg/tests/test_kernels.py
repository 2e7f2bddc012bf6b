"""Convolution kernel backends: numpy/numba equivalence and selection.

The jit path is optional; every equivalence test degrades to a skip when
numba is not importable, and a brute-force loop oracle pins down the
cross-correlation convention independently of either backend.
"""

import os
import subprocess
import sys

import numpy as np
import pytest

from oskt.numerics.kernels import active_backend, conv_numpy

try:
    from oskt.numerics.kernels import conv_numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an install-time choice
    conv_numba = None
    HAVE_NUMBA = False


def _brute_conv(x, w, stride, pad):
    """Direct four-loop cross-correlation; the shared oracle."""
    b, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((b, cout, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = x[:, :, i * stride : i * stride + k, j * stride : j * stride + k]
            out[:, :, i, j] = np.einsum("bckl,ockl->bo", patch, w)
    return out


_SHAPES = [
    # (batch, cin, h, w, cout, k, stride, pad)
    (2, 3, 5, 5, 4, 3, 1, 1),
    (1, 1, 4, 4, 2, 3, 1, 0),
    (3, 2, 7, 6, 5, 3, 2, 1),
    (2, 4, 4, 4, 3, 1, 1, 0),
    (1, 2, 8, 8, 2, 5, 2, 2),
]


def test_numpy_forward_matches_brute_force():
    rng = np.random.default_rng(0)
    for b, cin, h, w, cout, k, stride, pad in _SHAPES:
        x = rng.normal(size=(b, cin, h, w))
        ker = rng.normal(size=(cout, cin, k, k))
        got = conv_numpy.conv2d_forward(x, ker, stride, pad)
        np.testing.assert_allclose(got, _brute_conv(x, ker, stride, pad), rtol=1e-10)


def test_numpy_backward_matches_finite_difference():
    """Backward kernels are gradients of sum(g * forward)."""
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    stride, pad = 1, 1
    g = rng.normal(size=conv_numpy.conv2d_forward(x, w, stride, pad).shape)

    def objective(xv, wv):
        return float((g * conv_numpy.conv2d_forward(xv, wv, stride, pad)).sum())

    gx = conv_numpy.conv2d_backward_input(g, w, x.shape, stride, pad)
    gw = conv_numpy.conv2d_backward_kernel(g, x, w.shape, stride, pad)
    eps = 1e-6
    for arr, grad, other in ((x, gx, "x"), (w, gw, "w")):
        flat = arr.reshape(-1)
        for ci in rng.choice(flat.size, size=12, replace=False):
            orig = flat[ci]
            flat[ci] = orig + eps
            fp = objective(x, w)
            flat[ci] = orig - eps
            fm = objective(x, w)
            flat[ci] = orig
            num = (fp - fm) / (2 * eps)
            np.testing.assert_allclose(grad.reshape(-1)[ci], num, rtol=1e-4, atol=1e-7)


@pytest.mark.skipif(not HAVE_NUMBA, reason="numba backend unavailable")
def test_backends_agree_forward_and_backward():
    for seed, shape in enumerate(_SHAPES):
        rng = np.random.default_rng(seed)
        b, cin, h, w, cout, k, stride, pad = shape
        x = rng.normal(size=(b, cin, h, w))
        ker = rng.normal(size=(cout, cin, k, k))
        f_np = conv_numpy.conv2d_forward(x, ker, stride, pad)
        f_nb = conv_numba.conv2d_forward(x, ker, stride, pad)
        np.testing.assert_allclose(f_nb, f_np, rtol=1e-10, atol=1e-12)
        g = rng.normal(size=f_np.shape)
        np.testing.assert_allclose(
            conv_numba.conv2d_backward_input(g, ker, x.shape, stride, pad),
            conv_numpy.conv2d_backward_input(g, ker, x.shape, stride, pad),
            rtol=1e-10, atol=1e-12,
        )
        np.testing.assert_allclose(
            conv_numba.conv2d_backward_kernel(g, x, ker.shape, stride, pad),
            conv_numpy.conv2d_backward_kernel(g, x, ker.shape, stride, pad),
            rtol=1e-10, atol=1e-12,
        )


@pytest.mark.skipif(not HAVE_NUMBA, reason="numba backend unavailable")
def test_backends_agree_in_float32():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
    ker = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    a = conv_numpy.conv2d_forward(x, ker, 1, 1)
    b = conv_numba.conv2d_forward(x, ker, 1, 1)
    np.testing.assert_allclose(a, b, rtol=2e-5, atol=1e-6)


def _backend_in_subprocess(env_value):
    env = dict(os.environ)
    if env_value is None:
        env.pop("OSKT_BACKEND", None)
    else:
        env["OSKT_BACKEND"] = env_value
    proc = subprocess.run(
        [sys.executable, "-c",
         "from oskt.numerics.kernels import active_backend; print(active_backend())"],
        capture_output=True, text=True, env=env,
    )
    return proc


def test_env_flag_selects_backend():
    assert _backend_in_subprocess("numpy").stdout.strip() == "numpy"
    if HAVE_NUMBA:
        assert _backend_in_subprocess("numba").stdout.strip() == "numba"
        assert _backend_in_subprocess(None).stdout.strip() == "numba"


def test_env_flag_rejects_unknown_backend():
    proc = _backend_in_subprocess("cuda")
    assert proc.returncode != 0
    assert "OSKT_BACKEND" in proc.stderr


def test_active_backend_is_reported():
    assert active_backend() in ("numpy", "numba")
