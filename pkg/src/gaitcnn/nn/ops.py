"""Functional kernels with explicit backward passes.

All arrays are channels-last with a leading batch axis: ``(B, *spatial, C)``.
Forward functions return ``(out, cache)``; backward functions take the cache
and the upstream gradient. Nothing here keeps hidden state.
"""
from __future__ import annotations

import itertools

import numpy as np

LRN_DEFAULTS = dict(k=2.0, n=5, alpha=1e-4, beta=0.75)
IM2COL_MAX_CIN = 8


def _tuple(v, nd):
    if np.isscalar(v):
        return (int(v),) * nd
    v = tuple(int(a) for a in v)
    if len(v) != nd:
        raise ValueError(f"expected {nd} values, got {v}")
    return v


def conv_output_shape(spatial, kernel, stride, padding):
    out = []
    for n, k, s, p in zip(spatial, kernel, stride, padding):
        o = (n + 2 * p - k) // s + 1
        if o < 1 or k < 1 or s < 1:
            raise ValueError(
                f"kernel {kernel} stride {stride} padding {padding} "
                f"does not fit spatial shape {spatial}")
        out.append(o)
    return tuple(out)


def _pad_spatial(x, padding):
    if not any(padding):
        return x
    return np.pad(x, [(0, 0)] + [(p, p) for p in padding] + [(0, 0)])


def _window(offset, stride, out):
    return tuple(slice(o, o + s * (n - 1) + 1, s)
                 for o, s, n in zip(offset, stride, out))


def conv_forward(x, w, b, stride=1, padding=0):
    """N-d convolution, ``x: (B, *S, Cin)``, ``w: (*K, Cin, Cout)``.

    Implemented as one matmul per kernel offset, which keeps memory at
    ``O(|x|)`` instead of the ``O(|x| * prod(K))`` of im2col.
    """
    nd = w.ndim - 2
    if x.ndim != nd + 2:
        raise ValueError(f"input rank {x.ndim} does not match {nd}-d kernel")
    if x.shape[-1] != w.shape[-2]:
        raise ValueError(
            f"input has {x.shape[-1]} channels, weights expect {w.shape[-2]}")
    if b.shape != (w.shape[-1],):
        raise ValueError(f"bias shape {b.shape} != ({w.shape[-1]},)")
    kernel = w.shape[:nd]
    stride = _tuple(stride, nd)
    padding = _tuple(padding, nd)
    out_sp = conv_output_shape(x.shape[1:-1], kernel, stride, padding)
    xp = _pad_spatial(x, padding)
    B, cin, cout = x.shape[0], w.shape[-2], w.shape[-1]
    m = B * int(np.prod(out_sp))
    offsets = list(itertools.product(*(range(k) for k in kernel)))
    if cin < IM2COL_MAX_CIN:
        # thin inputs: one fat matmul beats many rank-cin updates
        cols = np.concatenate(
            [xp[(slice(None),) + _window(off, stride, out_sp)].reshape(m, cin)
             for off in offsets], axis=1)
        acc = cols @ w.reshape(-1, cout)
    else:
        acc = np.zeros((m, cout), dtype=np.result_type(x, w))
        for off in offsets:
            patch = xp[(slice(None),) + _window(off, stride, out_sp)]
            acc += patch.reshape(m, cin) @ w[off]
    acc += b
    out = acc.reshape((B,) + out_sp + (cout,))
    return out, (x.shape, xp, w, stride, padding, out_sp)


def conv_backward(dout, cache, need_dx=True):
    """Gradients ``(dx, dw, db)``; ``dx`` is None when ``need_dx`` is false."""
    x_shape, xp, w, stride, padding, out_sp = cache
    nd = w.ndim - 2
    kernel = w.shape[:nd]
    cin, cout = w.shape[-2], w.shape[-1]
    m = dout.size // cout
    g = dout.reshape(m, cout)
    offsets = list(itertools.product(*(range(k) for k in kernel)))
    if cin < IM2COL_MAX_CIN:
        cols = np.concatenate(
            [xp[(slice(None),) + _window(off, stride, out_sp)].reshape(m, cin)
             for off in offsets], axis=1)
        dw = (cols.T @ g).reshape(w.shape)
        del cols
    else:
        dw = np.empty_like(w)
    dxp = np.zeros_like(xp) if need_dx else None
    for off in offsets:
        if cin < IM2COL_MAX_CIN and not need_dx:
            break
        idx = (slice(None),) + _window(off, stride, out_sp)
        if cin >= IM2COL_MAX_CIN:
            dw[off] = xp[idx].reshape(m, cin).T @ g
        if need_dx:
            dxp[idx] += (g @ w[off].T).reshape(dxp[idx].shape)
    db = g.sum(axis=0)
    if not need_dx:
        return None, dw, db
    crop = (slice(None),) + tuple(slice(p, p + n) for p, n in
                                  zip(padding, x_shape[1:-1])) + (slice(None),)
    return dxp[crop], dw, db


def pool_output_shape(spatial, window, stride):
    return conv_output_shape(spatial, window, stride, (0,) * len(spatial))


def max_pool_forward(x, window, stride=None):
    nd = x.ndim - 2
    window = _tuple(window, nd)
    stride = window if stride is None else _tuple(stride, nd)
    out_sp = pool_output_shape(x.shape[1:-1], window, stride)
    offsets = list(itertools.product(*(range(k) for k in window)))
    out = None
    arg = np.zeros((x.shape[0],) + out_sp + (x.shape[-1],), dtype=np.int32)
    for i, off in enumerate(offsets):
        patch = x[(slice(None),) + _window(off, stride, out_sp)]
        if out is None:
            out = patch.copy()
            continue
        better = patch > out
        out[better] = patch[better]
        arg[better] = i
    return out, (x.shape, window, stride, out_sp, arg)


def max_pool_backward(dout, cache):
    x_shape, window, stride, out_sp, arg = cache
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i, off in enumerate(itertools.product(*(range(k) for k in window))):
        idx = (slice(None),) + _window(off, stride, out_sp)
        dx[idx] += np.where(arg == i, dout, 0)
    return dx


def avg_pool_forward(x, window, stride=None):
    nd = x.ndim - 2
    window = _tuple(window, nd)
    stride = window if stride is None else _tuple(stride, nd)
    out_sp = pool_output_shape(x.shape[1:-1], window, stride)
    out = np.zeros((x.shape[0],) + out_sp + (x.shape[-1],), dtype=x.dtype)
    for off in itertools.product(*(range(k) for k in window)):
        out += x[(slice(None),) + _window(off, stride, out_sp)]
    out /= np.prod(window)
    return out, (x.shape, window, stride, out_sp)


def avg_pool_backward(dout, cache):
    x_shape, window, stride, out_sp = cache
    dx = np.zeros(x_shape, dtype=dout.dtype)
    g = dout / np.prod(window)
    for off in itertools.product(*(range(k) for k in window)):
        dx[(slice(None),) + _window(off, stride, out_sp)] += g
    return dx


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def _channel_window_sum(sq, n):
    """Sum over a centred window of ``n`` channels (zero beyond the edges)."""
    c = sq.shape[-1]
    lo, hi = (n - 1) // 2, n // 2
    cs = np.cumsum(np.pad(sq, [(0, 0)] * (sq.ndim - 1) + [(1, 0)]), axis=-1)
    ends = np.minimum(np.arange(c) + hi + 1, c)
    starts = np.maximum(np.arange(c) - lo, 0)
    return cs[..., ends] - cs[..., starts]


def lrn_forward(x, k=2.0, n=5, alpha=1e-4, beta=0.75):
    """Cross-channel LRN: ``x / (k + alpha * sum_window x^2) ** beta``."""
    scale = k + alpha * _channel_window_sum(x * x, n)
    out = x * scale ** -beta
    return out, (x, scale, k, n, alpha, beta)


def lrn_backward(dout, cache):
    x, scale, k, n, alpha, beta = cache
    # d out_i / d x_j = delta_ij s_i^-b - 2 a b x_i x_j s_i^(-b-1)  for j in win(i)
    t = dout * x * scale ** (-beta - 1)
    # transpose of the centred window is the mirrored window
    lo, hi = (n - 1) // 2, n // 2
    c = x.shape[-1]
    cs = np.cumsum(np.pad(t, [(0, 0)] * (t.ndim - 1) + [(1, 0)]), axis=-1)
    ends = np.minimum(np.arange(c) + lo + 1, c)
    starts = np.maximum(np.arange(c) - hi, 0)
    back = cs[..., ends] - cs[..., starts]
    return dout * scale ** -beta - 2 * alpha * beta * x * back


def batch_norm_forward(x, gamma, beta, running_mean, running_var,
                       train=True, momentum=0.9, eps=1e-5):
    """Per-channel batch norm over every axis but the last.

    Returns ``(out, cache, new_mean, new_var)``; running statistics are
    never mutated in place.
    """
    axes = tuple(range(x.ndim - 1))
    if train:
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs a batch of >= 2")
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        cnt = x.size // x.shape[-1]
        new_mean = momentum * running_mean + (1 - momentum) * mu
        new_var = (momentum * running_var
                   + (1 - momentum) * var * cnt / max(cnt - 1, 1))
    else:
        mu, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = gamma * xhat + beta
    return out, (xhat, inv, gamma, train, axes), new_mean, new_var


def batch_norm_backward(dout, cache):
    xhat, inv, gamma, train, axes = cache
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    if not train:
        return dxhat * inv, dgamma, dbeta
    dx = inv * (dxhat - dxhat.mean(axis=axes)
                - xhat * (dxhat * xhat).mean(axis=axes))
    return dx, dgamma, dbeta


def dropout_forward(x, rate, train, rng):
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0:
        return x, None
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1 - rate)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def fc_forward(x, w, b):
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != w.shape[0]:
        raise ValueError(
            f"flattened input has {flat.shape[1]} features, "
            f"weights expect {w.shape[0]}")
    return flat @ w + b, (x.shape, flat, w)


def fc_backward(dout, cache):
    x_shape, flat, w = cache
    return (dout @ w.T).reshape(x_shape), flat.T @ dout, dout.sum(axis=0)


def softmax(x, axis=-1):
    x = np.asarray(x)
    if x.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax_backward(dout, probs):
    return probs * (dout - (dout * probs).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logz - shifted[np.arange(n), labels]))
    grad = np.exp(shifted - logz[:, None])
    grad[np.arange(n), labels] -= 1
    return loss, grad / n
