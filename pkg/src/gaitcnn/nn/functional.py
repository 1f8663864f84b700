"""Single-sample convenience wrappers over :mod:`ops` (forward only).

Inputs are ``H x W x C`` (2-d) or ``H x W x T x C`` (3-d); a leading batch
axis is also accepted.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .layers import NonFiniteError


def _batched(x, rank):
    x = np.asarray(x)
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ValueError(f"expected rank {rank} (or {rank + 1} batched), got shape {x.shape}")


def _finite(out, what):
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{what}: non-finite result")
    return out


def _conv(x, w, b, stride, padding, nd):
    w = np.asarray(w)
    if w.ndim != nd + 2:
        raise ValueError(f"conv{nd}d weights must have rank {nd + 2}, got {w.shape}")
    if np.any(np.asarray(padding) < 0):
        raise ValueError("padding must be >= 0")
    xb, single = _batched(x, nd + 1)
    b = np.zeros(w.shape[-1], w.dtype) if b is None else np.asarray(b)
    out, _ = ops.conv_forward(xb, w, b, stride, padding)
    out = _finite(out, f"conv{nd}d")
    return out[0] if single else out


def conv2d(x, w, b=None, stride=1, padding=0):
    return _conv(x, w, b, stride, padding, 2)


def conv3d(x, w, b=None, stride=1, padding=0):
    return _conv(x, w, b, stride, padding, 3)


def max_pool(x, window, stride=None):
    window = tuple(np.atleast_1d(window))
    xb, single = _batched(x, len(window) + 1)
    if any(k > n for k, n in zip(window, xb.shape[1:-1])):
        raise ValueError(f"pool window {window} larger than input {xb.shape[1:-1]}")
    out, _ = ops.max_pool_forward(xb, window, stride)
    return out[0] if single else out


def relu(x):
    return ops.relu_forward(np.asarray(x))[0]


def softmax(x):
    return ops.softmax(x, axis=-1)


def fully_connected(x, w, b):
    x = np.asarray(x)
    single = x.size == np.asarray(w).shape[0]
    out, _ = ops.fc_forward(x.reshape(1, -1) if single else x, w, b)
    out = _finite(out, "fully_connected")
    return out[0] if single else out


def lrn(x, **constants):
    kw = {**ops.LRN_DEFAULTS, **constants}
    return ops.lrn_forward(np.asarray(x), **kw)[0]


def batch_norm(x, gamma, beta, running_mean, running_var, mode="train",
               momentum=0.9, eps=1e-5):
    """Returns ``(out, new_running_mean, new_running_var)``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    out, _, m, v = ops.batch_norm_forward(np.asarray(x), gamma, beta, running_mean,
                                          running_var, mode == "train", momentum, eps)
    return out, m, v


def dropout(x, rate, mode="train", rng=None):
    if mode == "train" and rate > 0 and rng is None:
        rng = np.random.default_rng()
    return ops.dropout_forward(np.asarray(x), rate, mode == "train", rng)[0]
