"""Differentiable operations over :class:`~oskt.numerics.tensor.Tensor`.

Each op computes its forward result eagerly and, when a tape is active
and some input requires gradients, records a closure that maps the
output gradient to per-input gradients.  Inputs that do not require
gradients get ``None`` so expensive branches (e.g. the image gradient of
the first convolution) are skipped.

Convolution is cross-correlation with square kernels:
``H' = floor((H + 2*pad - K) / stride) + 1``.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ContractError, DimensionError
from . import kernels
from .tape import active_tape
from .tensor import Tensor


def _emit(out_data: np.ndarray, inputs: tuple, make_backward) -> Tensor:
    """Wrap op output; record on the active tape if gradients are needed."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires_grad=needs)
    tape = active_tape()
    if tape is not None and needs:
        tape.record(out, inputs, make_backward())
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def mk():
        def backward(g):
            ga = _unbroadcast(g, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g, b.shape) if b.requires_grad else None
            return ga, gb

        return backward

    return _emit(out, (a, b), mk)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def mk():
        def backward(g):
            ga = _unbroadcast(g, a.shape) if a.requires_grad else None
            gb = -_unbroadcast(g, b.shape) if b.requires_grad else None
            return ga, gb

        return backward

    return _emit(out, (a, b), mk)


def square(x: Tensor) -> Tensor:
    out = x.data * x.data

    def mk():
        def backward(g):
            return (2.0 * x.data * g,)

        return backward

    return _emit(out, (x,), mk)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * np.asarray(c, dtype=x.dtype)

    def mk():
        def backward(g):
            return (g * c,)

        return backward

    return _emit(out, (x,), mk)


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def mk():
        def backward(g):
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

        return backward

    return _emit(out, (x,), mk)


def tmean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)

    def mk():
        def backward(g):
            return (np.broadcast_to(g / n, x.shape).astype(x.dtype, copy=True),)

        return backward

    return _emit(out, (x,), mk)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)

    def mk():
        def backward(g):
            return (g.reshape(x.shape),)

        return backward

    return _emit(out, (x,), mk)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """out[i] = x[index[i]] along the first axis (scatter-add backward)."""
    index = np.asarray(index)
    if index.ndim != 1:
        raise DimensionError("gather_rows index must be 1-D")
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ContractError("gather_rows index out of range")
    out = x.data[index]

    def mk():
        def backward(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, index, g)
            return (gx,)

        return backward

    return _emit(out, (x,), mk)


def mix_middle(w: Tensor, m: np.ndarray) -> Tensor:
    """Contract the middle axis of ``w`` (M, N, O) with a fixed matrix
    ``m`` (C, N): out[a, c, o] = sum_n m[c, n] * w[a, n, o].

    This is how a student layer's input columns are built from chain
    columns; ``m`` itself is a constant (0/1 or averaging weights).
    """
    if w.ndim != 3 or m.ndim != 2 or m.shape[1] != w.shape[1]:
        raise DimensionError(f"mix_middle shapes incompatible: {w.shape} vs {m.shape}")
    m = m.astype(w.dtype, copy=False)
    out = np.einsum("cn,ano->aco", m, w.data)

    def mk():
        def backward(g):
            return (np.einsum("cn,aco->ano", m, g),)

        return backward

    return _emit(np.ascontiguousarray(out), (w,), mk)


def fixed_linear(m: np.ndarray, v: Tensor) -> Tensor:
    """out = m @ v for a constant matrix m (C, N) and vector v (N,)."""
    if v.ndim != 1 or m.ndim != 2 or m.shape[1] != v.shape[0]:
        raise DimensionError(f"fixed_linear shapes incompatible: {m.shape} vs {v.shape}")
    m = m.astype(v.dtype, copy=False)
    out = m @ v.data

    def mk():
        def backward(g):
            return (m.T @ g,)

        return backward

    return _emit(out, (v,), mk)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def mk():
        def backward(g):
            ga = g @ b.data.T if a.requires_grad else None
            gb = a.data.T @ g if b.requires_grad else None
            return ga, gb

        return backward

    return _emit(out, (a, b), mk)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Dense layer: x (B, Din) @ w (Dout, Din)^T + b."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear shapes incompatible: {x.shape} vs {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def mk():
        def backward(g):
            gx = g @ w.data if x.requires_grad else None
            gw = g.T @ x.data if w.requires_grad else None
            if b is None:
                return gx, gw
            gb = g.sum(axis=0) if b.requires_grad else None
            return gx, gw, gb

        return backward

    return _emit(out, inputs, mk)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects NCHW input and OIKK kernels")
    if w.shape[2] != w.shape[3]:
        raise DimensionError("conv2d kernels must be square")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: {x.shape} vs {w.shape}")
    if stride < 1 or pad < 0:
        raise ContractError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    k = w.shape[2]
    ho = (x.shape[2] + 2 * pad - k) // stride + 1
    wo = (x.shape[3] + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d output would be empty: input {x.shape}, kernel {k}, stride {stride}, pad {pad}"
        )
    out = kernels.conv2d_forward(x.data, w.data, stride, pad)

    def mk():
        def backward(g):
            g = np.ascontiguousarray(g)
            gx = (
                kernels.conv2d_backward_input(g, w.data, x.shape, stride, pad)
                if x.requires_grad
                else None
            )
            gw = (
                kernels.conv2d_backward_kernel(g, x.data, w.shape, stride, pad)
                if w.requires_grad
                else None
            )
            return gx, gw

        return backward

    return _emit(out, (x, w), mk)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """(B, C, H, W) + (C,) broadcast over batch and space."""
    if x.ndim != 4 or b.ndim != 1 or b.shape[0] != x.shape[1]:
        raise DimensionError(f"channel bias mismatch: {x.shape} vs {b.shape}")
    out = x.data + b.data[None, :, None, None]

    def mk():
        def backward(g):
            gx = g if x.requires_grad else None
            gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
            return gx, gb

        return backward

    return _emit(out, (x, b), mk)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C), mean over the spatial grid."""
    if x.ndim != 4:
        raise DimensionError("global_avg_pool expects NCHW input")
    h, w = x.shape[2], x.shape[3]
    out = x.data.mean(axis=(2, 3))

    def mk():
        def backward(g):
            return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(g.dtype, copy=True),)

        return backward

    return _emit(out, (x,), mk)


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def mk():
        def backward(g):
            return (g * mask,)

        return backward

    return _emit(out, (x,), mk)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-form gaussian error linear unit (its exact derivative is used
    for the backward pass, so finite differences agree to machine noise)."""
    z = x.data
    inner = _GELU_C * (z + 0.044715 * z**3)
    t = np.tanh(inner)
    out = (0.5 * z * (1.0 + t)).astype(x.dtype, copy=False)

    def mk():
        def backward(g):
            sech2 = 1.0 - t * t
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * z * z)
            grad = 0.5 * (1.0 + t) + 0.5 * z * sech2 * d_inner
            return (g * grad.astype(g.dtype, copy=False),)

        return backward

    return _emit(out, (x,), mk)


# ---------------------------------------------------------------------------
# normalization


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float,
    eps: float,
    training: bool,
    update_running: bool = True,
) -> Tensor:
    """Per-channel batch normalization over (B, H, W) of NCHW input.

    Normalization uses the biased batch variance; the running variance is
    tracked with the unbiased estimate.  Running buffers are plain arrays
    mutated in place and never differentiated through.
    """
    if x.ndim != 4:
        raise DimensionError("batch_norm expects NCHW input")
    if training and x.shape[0] < 2:
        raise ContractError("batch_norm in training mode needs batch size >= 2")
    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_running:
            unbiased = var * (n / (n - 1)) if n > 1 else var
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = (gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]).astype(
        x.dtype, copy=False
    )

    def mk():
        def backward(g):
            ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
            gbeta = g.sum(axis=axes) if beta.requires_grad else None
            if not x.requires_grad:
                return None, ggamma, gbeta
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                m1 = gxhat.mean(axis=axes)
                m2 = (gxhat * xhat).mean(axis=axes)
                gx = inv_std[None, :, None, None] * (
                    gxhat - m1[None, :, None, None] - xhat * m2[None, :, None, None]
                )
            else:
                gx = gxhat * inv_std[None, :, None, None]
            return gx.astype(g.dtype, copy=False), ggamma, gbeta

        return backward

    return _emit(out, (x, gamma, beta), mk)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Normalize over the last axis of (B, D); per-feature affine."""
    if x.ndim != 2:
        raise DimensionError("layer_norm expects (B, D) input")
    mean = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = (gamma.data * xhat + beta.data).astype(x.dtype, copy=False)

    def mk():
        def backward(g):
            ggamma = (g * xhat).sum(axis=0) if gamma.requires_grad else None
            gbeta = g.sum(axis=0) if beta.requires_grad else None
            if not x.requires_grad:
                return None, ggamma, gbeta
            gxhat = g * gamma.data
            m1 = gxhat.mean(axis=1, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
            gx = inv_std * (gxhat - m1 - xhat * m2)
            return gx.astype(g.dtype, copy=False), ggamma, gbeta

        return backward

    return _emit(out, (x, gamma, beta), mk)


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy between softmax(logits) and integer labels."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise DimensionError(f"cross entropy shapes incompatible: {logits.shape}, {labels.shape}")
    if labels.size == 0:
        raise ContractError("cross entropy needs a non-empty batch")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ContractError("cross entropy label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    expz = np.exp(z)
    probs = expz / expz.sum(axis=1, keepdims=True)
    batch = np.arange(labels.shape[0])
    losses = -np.log(np.maximum(probs[batch, labels], np.finfo(probs.dtype).tiny))
    out = np.asarray(losses.mean(), dtype=logits.dtype)

    def mk():
        def backward(g):
            gl = probs.copy()
            gl[batch, labels] -= 1.0
            gl /= labels.shape[0]
            return (gl * g,)

        return backward

    return _emit(out, (logits,), mk)


def batch_hard_triplet(features: Tensor, labels: np.ndarray, margin: float) -> Tensor:
    """Batch-hard triplet loss on raw (unnormalized) features.

    For each anchor the hardest positive (same label, largest euclidean
    distance) and hardest negative (different label, smallest distance)
    are mined inside the batch.  Anchors without a positive or without a
    negative are excluded; the loss is the mean hinge over the rest.
    """
    labels = np.asarray(labels)
    if features.ndim != 2 or labels.shape[0] != features.shape[0]:
        raise DimensionError(f"triplet shapes incompatible: {features.shape}, {labels.shape}")
    f = features.data
    n = f.shape[0]
    sq = (f * f).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (f @ f.T), 0.0)
    dist = np.sqrt(d2)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same

    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    if not valid.any():
        raise ContractError(
            "triplet loss needs at least one anchor with both a positive and a negative"
        )

    neg_inf = np.where(pos_mask, dist, -np.inf)
    pos_idx = neg_inf.argmax(axis=1)
    pos_d = neg_inf[np.arange(n), pos_idx]
    pos_inf = np.where(neg_mask, dist, np.inf)
    neg_idx = pos_inf.argmin(axis=1)
    neg_d = pos_inf[np.arange(n), neg_idx]

    hinge = np.where(valid, np.maximum(pos_d - neg_d + margin, 0.0), 0.0)
    n_valid = int(valid.sum())
    out = np.asarray(hinge[valid].mean(), dtype=features.dtype)

    def mk():
        anchors = np.flatnonzero(valid & (hinge > 0))

        def backward(g):
            gf = np.zeros_like(f)
            coeff = float(g) / n_valid
            for a in anchors:
                p = pos_idx[a]
                if dist[a, p] > 0:
                    direction = (f[a] - f[p]) / dist[a, p]
                    gf[a] += coeff * direction
                    gf[p] -= coeff * direction
                q = neg_idx[a]
                if dist[a, q] > 0:
                    direction = (f[a] - f[q]) / dist[a, q]
                    gf[a] -= coeff * direction
                    gf[q] += coeff * direction
            return (gf,)

        return backward

    return _emit(out, (features,), mk)
