"""Dense-tensor layer primitives with explicit forward/backward passes.

All arrays are float64; every operation is a pure function of its inputs.
Convolution is cross-correlation (no kernel flip), valid padding, stride 1.
Caches returned by forward passes are opaque tuples consumed by the
matching backward pass.
"""

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes do not conform."""


def _as64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def dense_forward(x, w, b):
    """y[n] = W @ x[n] + b for a batch of row vectors.

    x: (N, d_in), w: (d_out, d_in), b: (d_out,). Returns (y, cache).
    """
    x, w, b = _as64(x), _as64(w), _as64(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(
            f"dense_forward: x {x.shape} incompatible with W {w.shape}, b {b.shape}"
        )
    y = x @ w.T + b
    return y, (x, w)


def dense_backward(dy, cache):
    """Gradients of dense_forward. Returns (dx, dw, db)."""
    if cache is None:
        raise ValueError("dense_backward: missing forward cache")
    x, w = cache
    dy = _as64(dy)
    if dy.shape != (x.shape[0], w.shape[0]):
        raise ShapeError(f"dense_backward: dy {dy.shape} vs expected {(x.shape[0], w.shape[0])}")
    dw = dy.T @ x
    db = dy.sum(axis=0)
    dx = dy @ w
    return dx, dw, db


def conv2d_forward(x, k, b, pad=0):
    """Stride-1 cross-correlation with per-output-channel bias.

    x: (N, C_in, H, W), k: (C_out, C_in, kh, kw), b: (C_out,).
    pad=0 is the valid-padding contract; pad>0 zero-pads symmetrically
    (used by residual blocks, where the shapes must round-trip).
    """
    x, k, b = _as64(x), _as64(k), _as64(b)
    if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1] or b.shape != (k.shape[0],):
        raise ShapeError(f"conv2d_forward: x {x.shape} incompatible with K {k.shape}, b {b.shape}")
    if x.shape[2] + 2 * pad < k.shape[2] or x.shape[3] + 2 * pad < k.shape[3]:
        raise ShapeError(
            f"conv2d_forward: kernel {k.shape[2:]} larger than padded input {x.shape[2:]}"
        )
    y = kernels.conv2d_forward(x, k, pad)
    y += b[None, :, None, None]
    return y, (x, k, pad)


def conv2d_backward(dy, cache):
    """Gradients of conv2d_forward. Returns (dx, dk, db)."""
    if cache is None:
        raise ValueError("conv2d_backward: missing forward cache")
    x, k, pad = cache
    dy = _as64(dy)
    db = dy.sum(axis=(0, 2, 3))
    dk = kernels.conv2d_backward_kernel(dy, x, pad, k.shape[2], k.shape[3])
    dx = kernels.conv2d_backward_input(dy, k, pad, x.shape[2], x.shape[3])
    return dx, dk, db


def relu(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0), (x,)


def relu_backward(dy, cache):
    # subgradient at exactly 0 is taken as 0
    (x,) = cache
    return np.where(x > 0.0, dy, 0.0)


def softmax_cross_entropy(logits, labels):
    """Mean NLL of a stabilized softmax.

    Returns (loss, dlogits) with dlogits = (softmax - onehot) / N.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels {labels.shape} vs batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    total = exps.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(total)
    loss = -log_probs[np.arange(n), labels].mean()
    dlogits = exps / total
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def sgd_step(params, grads, lr):
    """Plain gradient descent: p <- p - lr * g, for a dict of arrays."""
    if lr <= 0:
        raise ValueError(f"sgd_step: learning rate must be positive, got {lr}")
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"sgd_step: grad {g.shape} vs param {p.shape} for {name!r}")
        out[name] = p - lr * g
    return out


def finite_difference_grad(loss_fn, x, eps=1e-4, coords=None):
    """Central finite differences of a scalar loss at selected flat coords.

    Mutates a private copy only. coords=None differentiates every entry.
    Returns a flat array aligned with coords (or with x.ravel()).
    """
    x = np.array(x, dtype=np.float64)
    flat = x.ravel()
    if coords is None:
        coords = range(flat.size)
    g = np.empty(len(coords) if hasattr(coords, "__len__") else flat.size)
    for out_i, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_fn(x)
        flat[i] = orig - eps
        down = loss_fn(x)
        flat[i] = orig
        g[out_i] = (up - down) / (2.0 * eps)
    return g


def relative_grad_error(analytic, numeric, scale=None):
    """Max per-coordinate relative gap, floored so near-zero coords
    compare against the gradient's overall magnitude.

    scale overrides the floor reference; pass the full-model gradient
    magnitude when checking a block whose true gradient is identically
    zero (e.g. a bias feeding a shift-invariant layer)."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    if scale is None:
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    scale = max(scale, 1e-300)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6 * scale)
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0.0))
