"""Activation-normalization family: batch, fixed-batch, layer, group,
instance, and none.

Every kind applies (x - mean) / sqrt(var + eps) * gamma + beta; they differ
only in the scope the statistics are taken over:

    batch / fixed_batch   per channel, over the batch (and spatial) axes
    layer                 per sample, over channels (and spatial) axes
    group(G)              per sample, over each block of C/G channels
    instance              per sample per channel, over spatial axes
    none                  identity

Variance is the population variance. gamma/beta are per-channel for all
kinds. fixed_batch behaves exactly like batch during local training; the
difference is purely the server-side aggregation policy.
"""

from dataclasses import dataclass

import numpy as np

from .nn import ShapeError

_KIND_NAMES = ("none", "batch", "fixed_batch", "layer", "group", "instance")


@dataclass(frozen=True)
class NormKind:
    name: str
    groups: int = 1

    def __post_init__(self):
        if self.name not in _KIND_NAMES:
            raise ValueError(f"unknown normalization kind {self.name!r}; valid: {_KIND_NAMES}")
        if self.name == "group" and self.groups < 1:
            raise ValueError(f"group count must be >= 1, got {self.groups}")

    @property
    def has_running_stats(self):
        return self.name in ("batch", "fixed_batch")

    def __str__(self):
        return f"group{self.groups}" if self.name == "group" else self.name


NONE = NormKind("none")
BATCH = NormKind("batch")
FIXED_BATCH = NormKind("fixed_batch")
LAYER = NormKind("layer")
INSTANCE = NormKind("instance")


def group(groups):
    return NormKind("group", groups)


def parse_kind(text, default_groups=2):
    """Parse a config token like 'layer', 'batch', 'group' or 'group4'."""
    t = text.strip().lower().replace("-", "_")
    if t.startswith("group"):
        suffix = t[len("group"):]
        return group(int(suffix) if suffix else default_groups)
    if t in _KIND_NAMES:
        return NormKind(t)
    valid = ", ".join(_KIND_NAMES + ("groupN",))
    raise ValueError(f"unknown normalization kind {text!r}; valid kinds: {valid}")


@dataclass
class NormState:
    """Per-layer affine parameters and running statistics.

    running_mean/running_var exist for every kind but are only read (and
    updated) by batch/fixed_batch; all other kinds keep them frozen at 0/1.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels, momentum=0.1, eps=1e-5):
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self):
        return self.gamma.shape[0]

    def clone(self):
        return NormState(
            gamma=self.gamma.copy(),
            beta=self.beta.copy(),
            running_mean=self.running_mean.copy(),
            running_var=self.running_var.copy(),
            momentum=self.momentum,
            eps=self.eps,
        )


def _expand(v, ndim):
    """Reshape a per-channel vector for broadcasting over (N, C[, H, W])."""
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def norm_forward(x, state, kind, mode):
    """Apply one normalization layer. Returns (y, cache).

    x is (N, C) or (N, C, H, W). In train mode, batch/fixed_batch update
    the running statistics in place.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (2, 4):
        raise ShapeError(f"norm_forward: expected (N,C) or (N,C,H,W), got {x.shape}")
    if kind.name == "none":
        return x, ("none", mode)
    c = x.shape[1]
    if state.channels != c:
        raise ShapeError(f"norm_forward: state has {state.channels} channels, input has {c}")

    if kind.has_running_stats:
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        if mode == "train":
            if x.shape[0] < 2:
                raise ValueError("batch normalization in train mode requires N >= 2")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            update_running_stats(state, mean, var, state.momentum)
        else:
            mean = state.running_mean
            var = state.running_var
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (x - _expand(mean, x.ndim)) * _expand(inv_std, x.ndim)
        y = xhat * _expand(state.gamma, x.ndim) + _expand(state.beta, x.ndim)
        stats_mode = "batch" if mode == "train" else "frozen"
        cache = ("channel", mode, stats_mode, xhat, inv_std, state.gamma)
        return y, cache

    # per-sample scopes: layer == group(1), instance == group(C)
    if kind.name == "instance":
        if x.ndim == 2:
            raise ShapeError("instance normalization needs spatial axes; input is (N, C)")
        groups = c
    elif kind.name == "layer":
        groups = 1
    else:
        groups = kind.groups
        if c % groups != 0:
            raise ShapeError(f"group count {groups} does not divide channel count {c}")

    n = x.shape[0]
    spatial = x.shape[2:]
    xg = x.reshape(n, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = ((xg - mean) * inv_std).reshape(n, c, *spatial)
    y = xhat * _expand(state.gamma, x.ndim) + _expand(state.beta, x.ndim)
    cache = ("sample", mode, groups, xhat, inv_std, state.gamma)
    return y, cache


def norm_backward(dy, cache, mode=None):
    """Exact gradients of norm_forward. Returns (dx, dgamma, dbeta).

    Train-mode statistics are functions of the input, and that dependence
    is differentiated through. mode, when given, must match the cache.
    """
    if cache is None:
        raise ValueError("norm_backward: missing forward cache")
    scope, fwd_mode = cache[0], cache[1]
    if mode is not None and mode != fwd_mode:
        raise ValueError(f"norm_backward: cache is from {fwd_mode!r} mode, called with {mode!r}")
    dy = np.asarray(dy, dtype=np.float64)

    if scope == "none":
        return dy, None, None

    if scope == "channel":
        _, _, stats_mode, xhat, inv_std, gamma = cache
        ndim = xhat.ndim
        axes = (0,) if ndim == 2 else (0, 2, 3)
        dgamma = (dy * xhat).sum(axis=axes)
        dbeta = dy.sum(axis=axes)
        t = dy * _expand(gamma, ndim)
        if stats_mode == "frozen":
            dx = t * _expand(inv_std, ndim)
            return dx, dgamma, dbeta
        m = xhat.size // xhat.shape[1]
        dx = (
            t
            - _expand(t.sum(axis=axes) / m, ndim)
            - xhat * _expand((t * xhat).sum(axis=axes) / m, ndim)
        ) * _expand(inv_std, ndim)
        return dx, dgamma, dbeta

    # per-sample scope
    _, _, groups, xhat, inv_std, gamma = cache
    ndim = xhat.ndim
    affine_axes = (0,) if ndim == 2 else (0, 2, 3)
    dgamma = (dy * xhat).sum(axis=affine_axes)
    dbeta = dy.sum(axis=affine_axes)
    t = dy * _expand(gamma, ndim)
    n, c = xhat.shape[0], xhat.shape[1]
    tg = t.reshape(n, groups, -1)
    xg = xhat.reshape(n, groups, -1)
    m = tg.shape[2]
    dxg = (
        tg
        - tg.mean(axis=2, keepdims=True)
        - xg * (tg * xg).mean(axis=2, keepdims=True)
    ) * inv_std
    return dxg.reshape(xhat.shape), dgamma, dbeta


def update_running_stats(state, batch_mean, batch_var, momentum):
    """EMA update: running <- (1 - momentum) * running + momentum * batch."""
    state.running_mean *= 1.0 - momentum
    state.running_mean += momentum * batch_mean
    state.running_var *= 1.0 - momentum
    state.running_var += momentum * batch_var
    return state
