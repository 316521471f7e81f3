"""Pure-NumPy implementations of the hot kernels.

Semantics shared with the compiled backend (`_cyops`):

* ``conv2d_forward``: 3x3 correlation with implicit zero padding of one
  pixel ('same') and output size ``(H - 1) // stride + 1`` per axis.
* ``conv2d_backward``: exact gradients of that forward op.
* ``bilateral_filter``: range-weighted Gaussian smoothing with reflect
  padding; offsets are accumulated in fixed row-major order.

Numerical results of the two backends agree to floating-point rounding
but are not guaranteed bit-identical (summation order differs).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "numpy"


def _im2col(x: np.ndarray, stride: int) -> np.ndarray:
    """(N, Cin, H, W) -> (N * Ho * Wo, Cin * 9) patch matrix, zero padded."""
    n, cin, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * 9)
    return np.ascontiguousarray(cols)


def _out_size(h: int, stride: int) -> int:
    return (h - 1) // stride + 1


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    ho, wo = _out_size(h, stride), _out_size(wd, stride)
    cols = _im2col(x, stride)
    y = cols @ w.reshape(cout, cin * 9).T
    y += b
    return np.ascontiguousarray(y.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))


def conv2d_backward(x, w, dy, stride, need_dx=True):
    """Gradients of conv2d_forward w.r.t. input, weights and bias.

    Returns (dx, dw, db); dx is None when need_dx is False.
    """
    n, cin, h, wd = x.shape
    cout, _, _, _ = w.shape
    ho, wo = dy.shape[2], dy.shape[3]
    dy_mat = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)

    cols = _im2col(x, stride)
    dw = (dy_mat.T @ cols).reshape(cout, cin, 3, 3)
    db = dy_mat.sum(axis=0)

    dx = None
    if need_dx:
        dcols = dy_mat @ w.reshape(cout, cin * 9)
        d6 = dcols.reshape(n, ho, wo, cin, 3, 3).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros((n, cin, h + 2, wd + 2), dtype=x.dtype)
        for ky in range(3):
            for kx in range(3):
                dxp[
                    :,
                    :,
                    ky : ky + stride * (ho - 1) + 1 : stride,
                    kx : kx + stride * (wo - 1) + 1 : stride,
                ] += d6[:, :, :, :, ky, kx]
        dx = np.ascontiguousarray(dxp[:, :, 1 : h + 1, 1 : wd + 1])
    return dx, dw, db


def bilateral_filter(img: np.ndarray, radius: int, sigma_s: float, sigma_r: float) -> np.ndarray:
    """Edge-preserving smoothing of a 2-d float64 image."""
    h, w = img.shape
    pad = np.pad(img, radius, mode="reflect")
    acc = np.zeros((h, w), dtype=np.float64)
    wsum = np.zeros((h, w), dtype=np.float64)
    inv_s = -0.5 / (sigma_s * sigma_s)
    inv_r = -0.5 / (sigma_r * sigma_r)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            sw = np.exp((dy * dy + dx * dx) * inv_s)
            shifted = pad[radius + dy : radius + dy + h, radius + dx : radius + dx + w]
            diff = shifted - img
            wgt = sw * np.exp(diff * diff * inv_r)
            acc += wgt * shifted
            wsum += wgt
    return acc / wsum
