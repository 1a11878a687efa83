"""The randomized property suite behind `fednorm check-props`."""

import numpy as np

from fednorm.models import build_cnn
from fednorm.norms import BATCH
from fednorm.props import (
    brute_force_weighted_mean, prop_aggregation_oracle, prop_grad_check,
    prop_gradient_scaling, prop_norm_recurrence, prop_orthogonality,
    prop_scale_invariance, prop_whitened_sigma, run_suite,
)


def _as_list(res):
    return list(res) if isinstance(res, (list, tuple)) else [res]


def test_scale_invariance_property():
    assert all(r.ok for r in _as_list(prop_scale_invariance(0, trials=50)))


def test_gradient_scaling_property():
    assert all(r.ok for r in _as_list(prop_gradient_scaling(0, trials=50, fd_trials=5)))


def test_orthogonality_property_and_negative_control():
    results = _as_list(prop_orthogonality(0, trials=50))
    assert all(r.ok for r in results)
    assert any("control" in r.name for r in results)


def test_norm_recurrence_property():
    assert all(r.ok for r in _as_list(prop_norm_recurrence(0, steps=50)))


def test_whitened_sigma_property():
    assert prop_whitened_sigma(0, num_weights=5, num_samples=10000).ok


def test_aggregation_oracle_property():
    assert prop_aggregation_oracle(0, trials=20).ok


def test_grad_check_property():
    cnn, dense = prop_grad_check(0)
    assert cnn.ok, cnn.value
    assert dense.ok, dense.value


def test_brute_force_weighted_mean_hand_example():
    m1 = build_cnn(BATCH, (1, 14, 14), 4, seed=0)
    m2 = build_cnn(BATCH, (1, 14, 14), 4, seed=1)
    out = brute_force_weighted_mean([(m1, 1), (m2, 3)])
    name = "fc3.b"
    expect = 0.25 * m1.params[name] + 0.75 * m2.params[name]
    np.testing.assert_allclose(out[name], expect, atol=1e-15)


def test_run_suite_reports_every_property():
    results = run_suite(seed=0, trials=10)
    assert all(r.ok for r in results), [r.name for r in results if not r.ok]
    joined = " ".join(r.name for r in results)
    for key in ("scale", "grad", "orthogonal", "recurrence", "sigma", "aggregation"):
        assert key in joined
