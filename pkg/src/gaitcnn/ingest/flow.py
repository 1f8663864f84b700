"""Dense optical flow: coarse-to-fine Horn-Schunck with warping.

Any callable ``(prev, next) -> (H, W, 2)`` can stand in for
``estimate_flow``; externally computed flow is read from ``.flo`` files.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

_AVG = np.array([[1, 2, 1], [2, 0, 2], [1, 2, 1]], dtype=np.float64) / 12.0


def _warp(img, u, v):
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return ndimage.map_coordinates(img, [yy + v, xx + u], order=1, mode="nearest")


def _horn_schunck(i1, i2, u, v, alpha, iterations):
    """Refine ``(u, v)`` on one level, linearising around the current flow."""
    i2w = _warp(i2, u, v)
    iy1, ix1 = np.gradient(i1)
    iy2, ix2 = np.gradient(i2w)
    ix, iy = 0.5 * (ix1 + ix2), 0.5 * (iy1 + iy2)
    # brightness constancy linearised at (u0, v0): ix*u + iy*v + it0 = 0
    it0 = (i2w - i1) - ix * u - iy * v
    denom = alpha ** 2 + ix ** 2 + iy ** 2
    for _ in range(iterations):
        ub = ndimage.convolve(u, _AVG, mode="nearest")
        vb = ndimage.convolve(v, _AVG, mode="nearest")
        r = (ix * ub + iy * vb + it0) / denom
        u = ub - ix * r
        v = vb - iy * r
    return u, v


def estimate_flow(prev, nxt, alpha=0.5, iterations=100, levels=3, warps=2, sigma=1.0,
                  value_range=255.0):
    """Per-pixel ``(u, v)`` displacement from ``prev`` to ``nxt``.

    Intensities are divided by ``value_range`` first, so ``alpha`` (the
    smoothness weight) is relative to a [0, 1] image. ``iterations`` Jacobi
    sweeps run per warp at each pyramid level.
    """
    prev = np.asarray(prev, np.float64) / value_range
    nxt = np.asarray(nxt, np.float64) / value_range
    if prev.shape != nxt.shape or prev.ndim != 2:
        raise ValueError(f"frame shapes differ or are not 2-d: {prev.shape} vs {nxt.shape}")
    if np.array_equal(prev, nxt):
        return np.zeros(prev.shape + (2,), np.float32)
    p1 = [ndimage.gaussian_filter(prev, sigma)]
    p2 = [ndimage.gaussian_filter(nxt, sigma)]
    for _ in range(levels - 1):
        if min(p1[-1].shape) < 16:
            break
        p1.append(ndimage.zoom(ndimage.gaussian_filter(p1[-1], 1.0), 0.5, order=1))
        p2.append(ndimage.zoom(ndimage.gaussian_filter(p2[-1], 1.0), 0.5, order=1))
    u = np.zeros(p1[-1].shape)
    v = np.zeros(p1[-1].shape)
    for lvl in range(len(p1) - 1, -1, -1):
        i1, i2 = p1[lvl], p2[lvl]
        if u.shape != i1.shape:
            fy, fx = i1.shape[0] / u.shape[0], i1.shape[1] / u.shape[1]
            u = _resize(u, i1.shape) * fx
            v = _resize(v, i1.shape) * fy
        for _ in range(warps):
            u, v = _horn_schunck(i1, i2, u, v, alpha, iterations)
    return np.stack([u, v], axis=-1).astype(np.float32)


def _resize(a, shape):
    return ndimage.zoom(a, (shape[0] / a.shape[0], shape[1] / a.shape[1]), order=1,
                        mode="nearest", grid_mode=True)


def sequence_flow(frames, estimator=estimate_flow):
    """Flow maps between consecutive frames: ``T`` frames give ``T - 1`` maps."""
    return np.stack([estimator(a, b) for a, b in zip(frames[:-1], frames[1:])])
