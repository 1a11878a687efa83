"""Quantitative probes for the analytical claims: per-channel feature
statistics across devices, scale-invariance and gradient-scaling checks,
weight/gradient orthogonality, the squared-norm SGD recurrence, the
whitened-input sigma identity, and the two-device shift experiment.

Divergence metric: per channel, the max pairwise standardized mean gap
|mu_i - mu_j| / pooled sigma plus the max pairwise sigma ratio minus one,
so byte-identical models score exactly zero.
"""

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import models as models_mod
from . import nn, norms
from .data import batch_iter, make_shifted_pair
from .fed import derive_seed
from .models import model_backward, model_forward
from .norms import NormState


@dataclass
class ShiftReport:
    """Per-device per-layer per-channel pre/post-norm statistics plus
    cross-device divergence metrics."""

    layers: list  # norm-slot names in topology order
    stats: list   # per device: {layer: {pre_mean, pre_std, post_mean, post_std}}
    divergence: dict  # {layer: {stage: {mean_gap, sigma_ratio, scalar}}}

    def scalar(self, layer, stage):
        return self.divergence[layer][stage]["scalar"]


@dataclass
class NormTrace:
    """L2 weight norms per (round, device, layer) with per-round spread."""

    entries: list  # dicts: round, device, layer, norm
    ratio: dict    # {layer: [max/min ratio per round]}


def channel_stats(model, probe_inputs, mode="train"):
    """Forward the probe and collect per-channel mean/std of every norm
    slot's input and output. Statistics are over the batch and spatial
    axes. Returns {layer: {pre_mean, pre_std, post_mean, post_std}}."""
    capture = {}
    model_forward(model, probe_inputs, mode, capture=capture)
    model._caches = []
    out = {}
    for name, (pre, post) in capture.items():
        axes = (0,) if pre.ndim == 2 else (0, 2, 3)
        out[name] = {
            "pre_mean": pre.mean(axis=axes),
            "pre_std": pre.std(axis=axes),
            "post_mean": post.mean(axis=axes),
            "post_std": post.std(axis=axes),
        }
    return out


def _pairwise_divergence(per_device, stage):
    means = np.stack([d[f"{stage}_mean"] for d in per_device])  # (D, C)
    stds = np.stack([d[f"{stage}_std"] for d in per_device])
    pooled = np.sqrt((stds ** 2).mean(axis=0))
    pooled = np.maximum(pooled, 1e-300)
    gap = np.zeros(means.shape[1])
    ratio = np.ones(means.shape[1])
    for i in range(len(per_device)):
        for j in range(i + 1, len(per_device)):
            gap = np.maximum(gap, np.abs(means[i] - means[j]) / pooled)
            hi = np.maximum(stds[i], stds[j])
            lo = np.maximum(np.minimum(stds[i], stds[j]), 1e-300)
            ratio = np.maximum(ratio, hi / lo)
    return {
        "mean_gap": gap,
        "sigma_ratio": ratio,
        "scalar": float((gap + ratio - 1.0).max()),
    }


def external_shift_report(model_list, probe, mode="train"):
    """Compare the feature statistics of >= 2 same-topology models.

    probe is one batch of inputs fed to every model, or a list with one
    probe per model (the two-device experiment probes each replica with
    data from its own distribution)."""
    if len(model_list) < 2:
        raise ValueError("external_shift_report needs at least two models")
    probes = probe if isinstance(probe, (list, tuple)) else [probe] * len(model_list)
    if len(probes) != len(model_list):
        raise ValueError(f"{len(probes)} probes for {len(model_list)} models")
    stats = [channel_stats(m, p, mode=mode) for m, p in zip(model_list, probes)]
    layers = [s.name for s in model_list[0].topology if s.kind == "norm"]
    divergence = {}
    for layer in layers:
        per_device = [s[layer] for s in stats]
        divergence[layer] = {
            "pre": _pairwise_divergence(per_device, "pre"),
            "post": _pairwise_divergence(per_device, "post"),
        }
    return ShiftReport(layers=layers, stats=stats, divergence=divergence)


def feature_histograms(model_list, probes, bins=64, mode="train"):
    """Fixed-bin histograms of every norm slot's input and output, with
    bins spanning the pooled min/max across devices per layer/stage.

    Returns rows (device, layer, channel, stage, bin_lo, bin_hi, count)."""
    captures = []
    for m, p in zip(model_list, probes):
        cap = {}
        model_forward(m, p, mode, capture=cap)
        m._caches = []
        captures.append(cap)
    rows = []
    layers = [s.name for s in model_list[0].topology if s.kind == "norm"]
    for layer in layers:
        for stage, pick in (("pre", 0), ("post", 1)):
            values = [cap[layer][pick] for cap in captures]
            lo = min(float(v.min()) for v in values)
            hi = max(float(v.max()) for v in values)
            if hi <= lo:
                hi = lo + 1e-12
            edges = np.linspace(lo, hi, bins + 1)
            for dev, v in enumerate(values):
                channels = v.shape[1]
                for ch in range(channels):
                    sample = v[:, ch] if v.ndim == 2 else v[:, ch, :, :]
                    counts, _ = np.histogram(sample.ravel(), bins=edges)
                    for b in range(bins):
                        rows.append(
                            (dev, layer, ch, stage, float(edges[b]), float(edges[b + 1]),
                             int(counts[b]))
                        )
    return rows


def toy_shift_experiment(delta, steps, seed, base=None, batch_size=8, lr=0.02,
                         probe_size=256, bins=64, identical_shuffling=False):
    """Two-device mean-shift experiment: train two replicas of the
    three-conv single-channel batch-norm model from one initialization,
    one on the base data and one on a copy shifted by delta, then probe
    each replica with a batch from its own distribution.

    Returns (ShiftReport, histogram rows)."""
    from .data import make_synthetic

    if base is None:
        base = make_synthetic(2048 + probe_size, derive_seed(seed, "toy-data"),
                              shape=(1, 20, 20))
    d0, d1 = make_shifted_pair(base, delta)
    n_train = len(base) - probe_size
    train_idx = np.arange(n_train)
    input_shape = base.images.shape[1:]

    replicas = []
    for dev, dataset in enumerate((d0, d1)):
        model = models_mod.build_toy_convnet(
            input_shape=input_shape, num_classes=base.class_count,
            seed=derive_seed(seed, "toy-init"),
        )
        shuffle_dev = 0 if identical_shuffling else dev
        done = 0
        epoch = 0
        while done < steps:
            for inputs, labels in batch_iter(
                dataset, train_idx, batch_size,
                derive_seed(seed, "toy-epoch", epoch, shuffle_dev),
            ):
                logits = model_forward(model, inputs, "train")
                _, dlogits = nn.softmax_cross_entropy(logits, labels)
                grads = model_backward(model, dlogits)
                models_mod.apply_sgd(model, grads, lr)
                done += 1
                if done >= steps:
                    break
            epoch += 1
        replicas.append(model)

    probe_idx = np.arange(n_train, len(base))
    probes = [d0.images[probe_idx], d1.images[probe_idx]]
    report = external_shift_report(replicas, probes, mode="train")
    rows = feature_histograms(replicas, probes, bins=bins, mode="train")
    return report, rows


def verify_scale_invariance(h, w, b, a, kind, eps=0.0):
    """Max |norm(dense(h, aW, ab)) - norm(dense(h, W, b))| in train mode.

    The identity is exact only at eps=0; a positive eps perturbs the two
    sides differently because the variances differ by a**2."""
    if a == 0:
        raise ValueError("scale factor must be non-zero")
    state = NormState.create(w.shape[0], eps=eps)
    y1, _ = norms.norm_forward(nn.dense_forward(h, w, b)[0], state, kind, "train")
    y2, _ = norms.norm_forward(nn.dense_forward(h, a * w, a * b)[0], state.clone(), kind, "train")
    return float(np.abs(y1 - y2).max())


def _loss_grads(h, w, b, kind, direction, eps=0.0):
    """Gradient of loss = sum(direction * norm(dense(h, w, b))) w.r.t. (w, b)."""
    state = NormState.create(w.shape[0], eps=eps)
    y, cache_d = nn.dense_forward(h, w, b)
    z, cache_n = norms.norm_forward(y, state, kind, "train")
    dz = direction
    dy, _, _ = norms.norm_backward(dz, cache_n)
    _, dw, db = nn.dense_backward(dy, cache_d)
    return dw, db, float((z * direction).sum())


def verify_gradient_scaling(h, w, b, a, kind, direction, eps=0.0):
    """Relative error of grad at aW against (1/a) * grad at W."""
    if a == 0:
        raise ValueError("scale factor must be non-zero")
    dw1, db1, _ = _loss_grads(h, w, b, kind, direction, eps=eps)
    dw2, db2, _ = _loss_grads(h, a * w, a * b, kind, direction, eps=eps)
    g1 = np.concatenate([dw1.ravel(), db1.ravel()]) / a
    g2 = np.concatenate([dw2.ravel(), db2.ravel()])
    denom = max(float(np.linalg.norm(g1)), 1e-300)
    return float(np.linalg.norm(g2 - g1)) / denom


def verify_orthogonality(w, grad_w):
    """Cosine of the angle between a parameter block and its gradient;
    zero gradient maps to cosine 0 by convention."""
    w = np.asarray(w, dtype=np.float64).ravel()
    g = np.asarray(grad_w, dtype=np.float64).ravel()
    gn = np.linalg.norm(g)
    if gn == 0.0:
        return 0.0
    return float(np.dot(w, g) / (np.linalg.norm(w) * gn))


def scale_invariant_gradient(h, w, b, kind, direction, eps=0.0):
    """Joint (W, b) vector and its gradient through a norm-capped dense
    layer, for orthogonality/recurrence checks."""
    dw, db, _ = _loss_grads(h, w, b, kind, direction, eps=eps)
    theta = np.concatenate([w.ravel(), b.ravel()])
    grad = np.concatenate([dw.ravel(), db.ravel()])
    return theta, grad


def verify_norm_recurrence(trajectory, lr):
    """Residuals of the squared-norm SGD identity along a trajectory of
    (theta_t, grad_t) pairs where theta_{t+1} = theta_t - lr * grad_t.

    Returns (max per-step relative residual, telescoped relative residual):
    per step, |theta_{t+1}|^2 should equal |theta_t|^2 + lr^2 |grad_t|^2;
    telescoped, |theta_T|^2 - |theta_0|^2 should equal lr^2 * sum |grad_t|^2.
    """
    if len(trajectory) < 1:
        raise ValueError("trajectory must contain at least one step")
    worst = 0.0
    grad_sq_sum = 0.0
    first_sq = float(np.dot(trajectory[0][0], trajectory[0][0]))
    for theta, grad in trajectory:
        theta_sq = float(np.dot(theta, theta))
        grad_sq = float(np.dot(grad, grad))
        nxt = theta - lr * grad
        nxt_sq = float(np.dot(nxt, nxt))
        residual = abs(nxt_sq - theta_sq - lr * lr * grad_sq) / theta_sq
        worst = max(worst, residual)
        grad_sq_sum += grad_sq
        last_sq = nxt_sq
    telescoped = abs(last_sq - first_sq - lr * lr * grad_sq_sum) / first_sq
    return worst, telescoped


def whitened_sigma_check(w, num_samples=10_000, seed=0):
    """Empirical std of a single bias-free neuron on whitened inputs
    against the Euclidean norm of its weights. Returns (std, norm)."""
    rng = np.random.default_rng(seed)
    w = np.asarray(w, dtype=np.float64).ravel()
    x = rng.standard_normal((num_samples, w.size))
    y = x @ w
    return float(y.std()), float(np.linalg.norm(w))


def weight_norm_trace(locals_per_round):
    """Weight norms for every (round, device, model) triple.

    locals_per_round: per round, a list of (device_id, ModelState).
    Returns a NormTrace with per-layer max/min norm ratios per round."""
    entries = []
    ratio = {}
    for rnd, local_models in enumerate(locals_per_round):
        per_layer = {}
        for dev, model in local_models:
            for name, v in model.params.items():
                if not name.endswith(".w"):
                    continue
                layer = name[:-2]
                value = float(np.linalg.norm(v))
                entries.append({"round": rnd, "device": dev, "layer": layer, "norm": value})
                per_layer.setdefault(layer, []).append(value)
        for layer, values in per_layer.items():
            ratio.setdefault(layer, []).append(max(values) / min(values))
    return NormTrace(entries=entries, ratio=ratio)


def write_stats_csv(report, path):
    """Per-device per-channel statistics table."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["device", "layer", "channel", "stage", "mean", "std"])
        for dev, stats in enumerate(report.stats):
            for layer in report.layers:
                entry = stats[layer]
                for stage in ("pre", "post"):
                    means = entry[f"{stage}_mean"]
                    stds = entry[f"{stage}_std"]
                    for ch in range(means.shape[0]):
                        writer.writerow([dev, layer, ch, stage,
                                         repr(float(means[ch])), repr(float(stds[ch]))])


def write_histograms_csv(rows, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["device", "layer", "channel", "stage", "bin_lo", "bin_hi", "count"])
        for row in rows:
            writer.writerow(row)


def write_divergence_json(report, path):
    payload = {
        layer: {
            stage: {
                "mean_gap": [float(v) for v in metrics["mean_gap"]],
                "sigma_ratio": [float(v) for v in metrics["sigma_ratio"]],
                "scalar": metrics["scalar"],
            }
            for stage, metrics in stages.items()
        }
        for layer, stages in report.divergence.items()
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
