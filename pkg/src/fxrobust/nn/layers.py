"""Functional layers with explicit backward passes.

Each ``*_forward`` returns ``(out, cache)`` and each ``*_backward`` takes the
upstream gradient plus that cache. Shapes follow (batch, channel, freq, time).
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
ELU_ALPHA = 1.0


class NumericalError(FloatingPointError):
    """Raised when a tensor picks up NaN or Inf."""


def check_finite(name: str, x: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NumericalError(f"tensor {name!r} has {bad} non-finite value(s)")
    return x


def conv2d_valid_forward(x, w, b):
    """Valid cross-correlation, stride 1.

    x: (N, C, H, W); w: (F, C, fh, fw); b: (F,) -> (N, F, H - fh + 1, W - fw + 1)
    """
    n, c, h, wd = x.shape
    f, cw, fh, fw = w.shape
    if cw != c or fh > h or fw > wd:
        raise ValueError(f"filter {w.shape} does not fit input {x.shape}")
    patches = sliding_window_view(x, (fh, fw), axis=(2, 3))  # N, C, Ho, Wo, fh, fw
    out = np.einsum("nchwij,fcij->nfhw", patches, w, optimize=True) + b[None, :, None, None]
    return out, (x, w)


def conv2d_valid_backward(dout, cache):
    x, w = cache
    fh, fw = w.shape[2:]
    patches = sliding_window_view(x, (fh, fw), axis=(2, 3))
    dw = np.einsum("nfhw,nchwij->fcij", dout, patches, optimize=True)
    db = dout.sum(axis=(0, 2, 3))
    dx = np.zeros_like(x)
    ho, wo = dout.shape[2:]
    for i in range(fh):
        for j in range(fw):
            dx[:, :, i : i + ho, j : j + wo] += np.einsum("nfhw,fc->nchw", dout, w[:, :, i, j])
    return dx, dw, db


def batch_norm_forward(x, gamma, beta, running_mean, running_var, train=True):
    """Per-channel normalization over (batch, freq, time).

    In train mode the running statistics arrays are updated in place.
    """
    if train:
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= BN_MOMENTUM
        running_mean += (1 - BN_MOMENTUM) * mean
        running_var *= BN_MOMENTUM
        running_var += (1 - BN_MOMENTUM) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv_std, gamma, train)


def batch_norm_backward(dout, cache):
    xhat, inv_std, gamma, train = cache
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if not train:
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    m1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
    m2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * inv_std[None, :, None, None]
    return dx, dgamma, dbeta


def elu(x):
    return np.where(x > 0, x, ELU_ALPHA * np.expm1(np.minimum(x, 0)))


def elu_grad(x):
    return np.where(x > 0, 1.0, ELU_ALPHA * np.exp(np.minimum(x, 0))).astype(x.dtype)


def elu_forward(x):
    return elu(x), x


def elu_backward(dout, x):
    return dout * elu_grad(x)


def global_max_pool_forward(x):
    """Max over each channel's whole (freq, time) map -> (N, C); ties go to the first index."""
    n, c = x.shape[:2]
    flat = x.reshape(n, c, -1)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[..., None], axis=2)[..., 0]
    return out, (x.shape, idx)


def global_max_pool_backward(dout, cache):
    shape, idx = cache
    n, c = shape[:2]
    dx = np.zeros((n, c, int(np.prod(shape[2:]))), dtype=dout.dtype)
    np.put_along_axis(dx, idx[..., None], dout[..., None], axis=2)
    return dx.reshape(shape)


def dropout_forward(x, rate, rng, train=True):
    """Inverted dropout: survivors are scaled by 1 / (1 - rate)."""
    if not train or rate == 0:
        return x, None
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def dense_forward(h, w, b):
    """h: (N, D); w: (K, D); b: (K,) -> logits (N, K)."""
    return h @ w.T + b, (h, w)


def dense_backward(dout, cache):
    h, w = cache
    return dout @ w, dout.T @ h, dout.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, labels):
    """Mean negative log-probability of the true class."""
    labels = np.asarray(labels)
    n = probs.shape[0]
    p = probs[np.arange(n), labels]
    return float(-np.mean(np.log(np.maximum(p, np.finfo(np.float64).tiny))))


def softmax_cross_entropy_backward(probs, labels):
    """Gradient of the mean cross-entropy w.r.t. the logits."""
    n = probs.shape[0]
    g = probs.copy()
    g[np.arange(n), labels] -= 1
    return g / n
