"""Pure-NumPy convolution kernels (im2col + BLAS) and a naive reference.

The naive six-loop implementation is the test oracle; the im2col path is
the fallback used when the compiled extension is unavailable.
"""

import numpy as np


def _im2col(x, kh, kw, pad):
    """Gather (kh*kw) shifted views of x into columns.

    Returns an array of shape (N, C*kh*kw, H_out*W_out).
    """
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    h_out = h + 2 * pad - kh + 1
    w_out = w + 2 * pad - kw + 1
    cols = np.empty((n, c, kh, kw, h_out, w_out), dtype=np.float64)
    for p in range(kh):
        for q in range(kw):
            cols[:, :, p, q] = x[:, :, p:p + h_out, q:q + w_out]
    return cols.reshape(n, c * kh * kw, h_out * w_out)


def conv2d_forward(x, k, pad=0):
    n, c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    h_out = h + 2 * pad - kh + 1
    w_out = w + 2 * pad - kw + 1
    cols = _im2col(x, kh, kw, pad)
    y = k.reshape(c_out, -1) @ cols
    return y.reshape(n, c_out, h_out, w_out)


def conv2d_backward_kernel(dy, x, pad, kh, kw):
    n, c_out, h_out, w_out = dy.shape
    cols = _im2col(x, kh, kw, pad)
    dy_flat = dy.reshape(n, c_out, h_out * w_out)
    dk = np.einsum("nop,ncp->oc", dy_flat, cols, optimize=True)
    return dk.reshape(c_out, x.shape[1], kh, kw)


def conv2d_backward_input(dy, k, pad, h, w):
    n, c_out, h_out, w_out = dy.shape
    _, c_in, kh, kw = k.shape
    # dX is a full correlation of dy with the flipped kernel; scatter-add
    # the column gradient back instead to reuse the im2col geometry.
    dcols = k.reshape(c_out, -1).T @ dy.reshape(n, c_out, h_out * w_out)
    dcols = dcols.reshape(n, c_in, kh, kw, h_out, w_out)
    dxp = np.zeros((n, c_in, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for p in range(kh):
        for q in range(kw):
            dxp[:, :, p:p + h_out, q:q + w_out] += dcols[:, :, p, q]
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv2d_forward_naive(x, k, pad=0):
    """Direct six-nested-loop cross-correlation. Slow; oracle only."""
    n, c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        h, w = h + 2 * pad, w + 2 * pad
    h_out = h - kh + 1
    w_out = w - kw + 1
    y = np.zeros((n, c_out, h_out, w_out), dtype=np.float64)
    for nn in range(n):
        for co in range(c_out):
            for i in range(h_out):
                for j in range(w_out):
                    acc = 0.0
                    for ci in range(c_in):
                        for p in range(kh):
                            for q in range(kw):
                                acc += x[nn, ci, i + p, j + q] * k[co, ci, p, q]
                    y[nn, co, i, j] = acc
    return y
