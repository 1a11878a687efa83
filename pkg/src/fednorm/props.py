"""Randomized property suite behind `fednorm check-props` and the
acceptance tests: scale invariance, gradient 1/a-scaling, weight/gradient
orthogonality, the squared-norm SGD recurrence, the whitened-input sigma
identity, full-model gradient checks, and the aggregation oracle.

Each prop_* function returns a PropResult; run_suite collects them all.
"""

from dataclasses import dataclass

import numpy as np

from . import diagnostics as diag
from . import models as models_mod
from . import nn, norms
from .fed import aggregate, derive_seed

SCALES = (0.1, 0.5, 2.0, 10.0)
KINDS = (norms.BATCH, norms.LAYER)


@dataclass
class PropResult:
    name: str
    value: float
    bound: float
    ok: bool
    detail: str = ""

    @classmethod
    def of(cls, name, value, bound, detail="", larger_is_better=False):
        ok = value >= bound if larger_is_better else value <= bound
        return cls(name=name, value=value, bound=bound, ok=ok, detail=detail)


def _random_case(rng, n=8, d_in=6, d_out=4):
    h = rng.standard_normal((n, d_in))
    w = rng.standard_normal((d_out, d_in))
    b = rng.standard_normal(d_out)
    return h, w, b


def prop_scale_invariance(seed, trials=1000):
    """Output of a norm-capped dense layer is unchanged when (W, b) are
    scaled by any non-zero scalar (train mode, eps=0)."""
    rng = np.random.default_rng(derive_seed(seed, "scale-inv"))
    worst = 0.0
    for _ in range(trials):
        h, w, b = _random_case(rng)
        for kind in KINDS:
            for a in SCALES:
                worst = max(worst, diag.verify_scale_invariance(h, w, b, a, kind))
    return PropResult.of("scale_invariance", worst, 1e-10,
                         detail=f"{trials} cases x {len(SCALES)} scales x {len(KINDS)} kinds")


def prop_gradient_scaling(seed, trials=1000, fd_trials=50):
    """Gradient w.r.t. aW equals (1/a) x gradient w.r.t. W; analytic
    gradients agree with central finite differences."""
    rng = np.random.default_rng(derive_seed(seed, "grad-scale"))
    worst = 0.0
    worst_fd = 0.0
    for t in range(trials):
        h, w, b = _random_case(rng)
        direction = rng.standard_normal((h.shape[0], w.shape[0]))
        for kind in KINDS:
            for a in SCALES:
                worst = max(worst, diag.verify_gradient_scaling(h, w, b, a, kind, direction))
        if t < fd_trials:
            kind = KINDS[t % len(KINDS)]
            worst_fd = max(worst_fd, _fd_error(h, w, b, kind, direction))
    scaling = PropResult.of("gradient_scaling", worst, 1e-8,
                            detail=f"{trials} cases x {len(SCALES)} scales x {len(KINDS)} kinds")
    fd = PropResult.of("gradient_vs_finite_differences", worst_fd, 1e-4,
                       detail=f"{fd_trials} cases, central differences at 1e-4")
    return scaling, fd


def _fd_error(h, w, b, kind, direction, eps=1e-4):
    dw, db, _ = diag._loss_grads(h, w, b, kind, direction)
    analytic = np.concatenate([dw.ravel(), db.ravel()])

    def loss_at(theta):
        wt = theta[: w.size].reshape(w.shape)
        bt = theta[w.size:]
        return diag._loss_grads(h, wt, bt, kind, direction)[2]

    theta0 = np.concatenate([w.ravel(), b.ravel()])
    numeric = nn.finite_difference_grad(loss_at, theta0, eps=eps)
    return nn.relative_grad_error(analytic, numeric)


def prop_orthogonality(seed, trials=1000):
    """Gradients through a norm-capped layer are orthogonal to the joint
    (W, b) parameter; without the norm cap the cosine is macroscopic."""
    rng = np.random.default_rng(derive_seed(seed, "ortho"))
    worst = 0.0
    control_hits = 0
    for t in range(trials):
        h, w, b = _random_case(rng)
        direction = rng.standard_normal((h.shape[0], w.shape[0]))
        kind = KINDS[t % len(KINDS)]
        theta, grad = diag.scale_invariant_gradient(h, w, b, kind, direction)
        worst = max(worst, abs(diag.verify_orthogonality(theta, grad)))
        # negative control: plain dense layer, no normalization
        y, cache = nn.dense_forward(h, w, b)
        _, dw, db = nn.dense_backward(direction, cache)
        cos = diag.verify_orthogonality(
            np.concatenate([w.ravel(), b.ravel()]),
            np.concatenate([dw.ravel(), db.ravel()]),
        )
        if abs(cos) > 1e-3:
            control_hits += 1
    capped = PropResult.of("orthogonality", worst, 1e-8, detail=f"{trials} random losses")
    control = PropResult.of("orthogonality_negative_control", control_hits / trials, 0.95,
                            detail=f"fraction of {trials} un-normalized losses with |cos| > 1e-3",
                            larger_is_better=True)
    return capped, control


def prop_norm_recurrence(seed, steps=100, lr=0.05, kind=norms.BATCH):
    """Squared-norm SGD identity along a real training trajectory of a
    norm-preceded dense layer."""
    rng = np.random.default_rng(derive_seed(seed, "recurrence"))
    n, d_in, d_out = 16, 6, 4
    w = rng.standard_normal((d_out, d_in))
    b = rng.standard_normal(d_out)
    trajectory = []
    for _ in range(steps):
        h = rng.standard_normal((n, d_in))
        direction = rng.standard_normal((n, d_out))
        theta, grad = diag.scale_invariant_gradient(h, w, b, kind, direction)
        trajectory.append((theta, grad))
        dw, db, _ = diag._loss_grads(h, w, b, kind, direction)
        w = w - lr * dw
        b = b - lr * db
    step_res, telescoped = diag.verify_norm_recurrence(trajectory, lr)
    per_step = PropResult.of("norm_recurrence_step", step_res, 1e-6,
                             detail=f"{steps} SGD steps, lr={lr}")
    tele = PropResult.of("norm_recurrence_telescoped", telescoped, 1e-5,
                         detail=f"{steps}-step telescoped sum")
    return per_step, tele


def prop_whitened_sigma(seed, num_weights=20, num_samples=10_000):
    """Empirical output std of a bias-free neuron on whitened inputs is
    the weight norm, within Monte Carlo error."""
    rng = np.random.default_rng(derive_seed(seed, "whitened"))
    worst = 0.0
    for t in range(num_weights):
        w = rng.standard_normal(rng.integers(3, 40))
        std, wnorm = diag.whitened_sigma_check(
            w, num_samples=num_samples, seed=derive_seed(seed, "whitened-draw", t)
        )
        worst = max(worst, abs(std - wnorm) / wnorm)
    return PropResult.of("whitened_sigma", worst, 0.05,
                         detail=f"{num_weights} random weight vectors, {num_samples} samples")


def _small_model(rng):
    topo = (
        models_mod.LayerSpec("dense", "fc1", in_dim=5, out_dim=4),
        models_mod.LayerSpec("norm", "norm1", out_dim=4, norm="batch"),
        models_mod.LayerSpec("relu", "relu1"),
        models_mod.LayerSpec("dense", "fc2", in_dim=4, out_dim=3),
    )
    m = models_mod.ModelState(
        topology=topo,
        params={
            "fc1.w": rng.standard_normal((4, 5)),
            "fc1.b": rng.standard_normal(4),
            "fc2.w": rng.standard_normal((3, 4)),
            "fc2.b": rng.standard_normal(3),
        },
        norm_states={"norm1": norms.NormState.create(4)},
    )
    st = m.norm_states["norm1"]
    st.gamma = rng.standard_normal(4)
    st.beta = rng.standard_normal(4)
    st.running_mean = rng.standard_normal(4)
    st.running_var = rng.uniform(0.1, 2.0, size=4)
    return m


def brute_force_weighted_mean(local_results, stats=False):
    """Independent aggregation oracle: plain Python loop over every
    coordinate of every array."""
    total = sum(c for _, c in local_results)
    first = local_results[0][0]

    def pick(m, name):
        if stats:
            layer, leaf = name.rsplit(".", 1)
            return getattr(m.norm_states[layer], leaf)
        return m.trainable()[name]

    names = (
        [f"{k}.running_mean" for k in first.norm_states]
        + [f"{k}.running_var" for k in first.norm_states]
        if stats
        else list(first.trainable())
    )
    out = {}
    for name in names:
        blocks = [(pick(m, name).ravel(), c) for m, c in local_results]
        flat_out = []
        for i in range(blocks[0][0].size):
            acc = 0.0
            for vec, c in blocks:
                acc += (c / total) * vec[i]
            flat_out.append(acc)
        out[name] = np.array(flat_out).reshape(pick(first, name).shape)
    return out


def prop_aggregation_oracle(seed, trials=100):
    """fed.aggregate equals the brute-force weighted mean on parameters
    and, for the batch kind, on running statistics."""
    rng = np.random.default_rng(derive_seed(seed, "agg"))
    worst = 0.0
    for t in range(trials):
        k = int(rng.integers(2, 5))
        locals_ = [(_small_model(rng), int(rng.integers(1, 50))) for _ in range(k)]
        merged = aggregate(locals_, norms.BATCH)
        for name, expected in brute_force_weighted_mean(locals_).items():
            worst = max(worst, float(np.abs(merged.trainable()[name] - expected).max()))
        for name, expected in brute_force_weighted_mean(locals_, stats=True).items():
            layer, leaf = name.rsplit(".", 1)
            got = getattr(merged.norm_states[layer], leaf)
            worst = max(worst, float(np.abs(got - expected).max()))
    return PropResult.of("aggregation_oracle", worst, 1e-12, detail=f"{trials} random instances")


def prop_grad_check(seed):
    """Full-model analytic gradients vs finite differences."""
    rng = np.random.default_rng(derive_seed(seed, "gradcheck"))
    cnn = models_mod.build_cnn(norms.BATCH, input_shape=(3, 14, 14), num_classes=10,
                               seed=derive_seed(seed, "gradcheck-cnn"))
    x = rng.standard_normal((8, 3, 14, 14))
    y = rng.integers(0, 10, size=8)
    # the smaller step keeps finite differences away from ReLU kinks
    cnn_err = models_mod.grad_check(cnn, x, y, eps=1e-6, max_coords=50, seed=seed)
    single = models_mod.ModelState(
        topology=(models_mod.LayerSpec("dense", "fc", in_dim=6, out_dim=4),),
        params={
            "fc.w": rng.standard_normal((4, 6)),
            "fc.b": rng.standard_normal(4),
        },
        norm_states={},
    )
    xs = rng.standard_normal((8, 6))
    ys = rng.integers(0, 4, size=8)
    dense_err = models_mod.grad_check(single, xs, ys, eps=1e-4, seed=seed)
    return (
        PropResult.of("grad_check_cnn", cnn_err, 1e-3, detail="batch of 8, 50 coords/param"),
        PropResult.of("grad_check_dense", dense_err, 1e-5, detail="single dense layer"),
    )


def run_suite(seed, trials):
    """Run every property at the given trial count. Returns a list of
    PropResult in print order."""
    results = [prop_scale_invariance(seed, trials)]
    results += list(prop_gradient_scaling(seed, trials))
    results += list(prop_orthogonality(seed, trials))
    results += list(prop_norm_recurrence(seed))
    results.append(prop_whitened_sigma(seed))
    results.append(prop_aggregation_oracle(seed, min(trials, 100)))
    results += list(prop_grad_check(seed))
    return results
