"""FedAvg engine: seeding, sampling, aggregation policies, determinism."""

import json

import numpy as np
import pytest

from fednorm.data import make_synthetic, partition_noniid
from fednorm.fed import (
    FedConfig, aggregate, derive_seed, evaluate, local_train, run_federated,
    sample_clients,
)
from fednorm.models import build_cnn
from fednorm.norms import BATCH, FIXED_BATCH, LAYER, parse_kind
from fednorm.props import brute_force_weighted_mean


def _small_setup(norm="layer", num_devices=4, rounds=3, threads=1, seed=0,
                 eval_every=1):
    train = make_synthetic(400, derive_seed(seed, "synthetic-train"), shape=(1, 14, 14))
    test = make_synthetic(100, derive_seed(seed, "synthetic-test"), shape=(1, 14, 14))
    manifest = partition_noniid(train, num_devices, 2, 20, seed=seed)
    cfg = FedConfig(num_devices=num_devices, devices_per_round=2, local_epochs=1,
                    batch_size=32, learning_rate=0.05, total_rounds=rounds,
                    norm_kind=parse_kind(norm), model="cnn", seed=seed,
                    eval_every=eval_every, threads=threads)
    return cfg, train, manifest, test


def _builder(shape=(1, 14, 14)):
    return lambda kind, seed: build_cnn(kind, shape, 10, seed=seed)


# ----------------------------------------------------------------- seeding

def test_derive_seed_deterministic_and_labeled():
    assert derive_seed(1, "round", 3) == derive_seed(1, "round", 3)
    assert derive_seed(1, "round", 3) != derive_seed(1, "round", 4)
    assert derive_seed(1, "round", 3) != derive_seed(1, "epoch", 3)


def test_sample_clients_sorted_unique_deterministic():
    a = sample_clients(7, 5, 100, seed=0)
    b = sample_clients(7, 5, 100, seed=0)
    assert a == b
    assert a == sorted(set(a))
    assert len(a) == 5
    assert all(0 <= d < 100 for d in a)
    assert a != sample_clients(8, 5, 100, seed=0)


# ------------------------------------------------------------- aggregation

def test_aggregate_equal_sizes_is_plain_mean():
    m1 = build_cnn(LAYER, (1, 14, 14), 10, seed=0)
    m2 = build_cnn(LAYER, (1, 14, 14), 10, seed=1)
    out = aggregate([(m1, 10), (m2, 10)], LAYER)
    for name in out.params:
        np.testing.assert_allclose(
            out.params[name], (m1.params[name] + m2.params[name]) / 2, atol=1e-15)


def test_aggregate_weights_by_sample_count():
    m1 = build_cnn(LAYER, (1, 14, 14), 10, seed=0)
    m2 = build_cnn(LAYER, (1, 14, 14), 10, seed=1)
    out = aggregate([(m1, 30), (m2, 10)], LAYER)
    expect = brute_force_weighted_mean([(m1, 30), (m2, 10)])
    for name in out.params:
        np.testing.assert_allclose(out.params[name], expect[name], atol=1e-14)


def test_aggregate_batch_kind_averages_running_stats():
    m1 = build_cnn(BATCH, (1, 14, 14), 10, seed=0)
    m2 = build_cnn(BATCH, (1, 14, 14), 10, seed=1)
    for m, fill in ((m1, 1.0), (m2, 3.0)):
        for st in m.norm_states.values():
            st.running_mean[:] = fill
            st.running_var[:] = fill * 2
    out = aggregate([(m1, 10), (m2, 30)], BATCH)
    for st in out.norm_states.values():
        np.testing.assert_allclose(st.running_mean, 0.25 * 1.0 + 0.75 * 3.0)
        np.testing.assert_allclose(st.running_var, 0.25 * 2.0 + 0.75 * 6.0)


def test_aggregate_fixed_batch_keeps_server_stats():
    prev = build_cnn(FIXED_BATCH, (1, 14, 14), 10, seed=9)
    m1 = build_cnn(FIXED_BATCH, (1, 14, 14), 10, seed=0)
    for st in m1.norm_states.values():
        st.running_mean[:] = 5.0
        st.running_var[:] = 7.0
    out = aggregate([(m1, 10)], FIXED_BATCH, prev_global=prev)
    for name, st in out.norm_states.items():
        np.testing.assert_array_equal(st.running_mean, prev.norm_states[name].running_mean)
        np.testing.assert_array_equal(st.running_var, prev.norm_states[name].running_var)


def test_aggregate_rejects_topology_mismatch():
    m1 = build_cnn(LAYER, (1, 14, 14), 10, seed=0)
    m2 = build_cnn(BATCH, (1, 14, 14), 10, seed=0)
    with pytest.raises(ValueError):
        aggregate([(m1, 1), (m2, 1)], LAYER)


# ------------------------------------------------------------ full-loop

def test_run_federated_thread_count_invariant():
    cfg1, train, manifest, test = _small_setup(threads=1)
    cfg4, *_ = _small_setup(threads=4)
    r1, g1 = run_federated(cfg1, train, manifest, test, build_model=_builder())
    r4, g4 = run_federated(cfg4, train, manifest, test, build_model=_builder())
    for name in g1.params:
        np.testing.assert_array_equal(g1.params[name], g4.params[name])
    assert [r.acc for r in r1] == [r.acc for r in r4]
    assert [r.loss for r in r1] == [r.loss for r in r4]


def test_run_federated_single_device_matches_centralized_sgd():
    train = make_synthetic(64, derive_seed(0, "synthetic-train"),
                           num_classes=2, shape=(1, 14, 14))
    test = make_synthetic(32, derive_seed(0, "synthetic-test"),
                          num_classes=2, shape=(1, 14, 14))
    manifest = partition_noniid(train, 1, 2, 32, seed=0)
    cfg = FedConfig(num_devices=1, devices_per_round=1, local_epochs=2,
                    batch_size=16, learning_rate=0.05, total_rounds=1,
                    norm_kind=LAYER, model="cnn", seed=0, eval_every=1, threads=1)
    _, fed_model = run_federated(cfg, train, manifest, test, build_model=_builder())

    # replay the identical schedule by hand with local_train
    central = build_cnn(LAYER, (1, 14, 14), 10, seed=derive_seed(0, "init"))
    round_seed = derive_seed(0, "round", 0, "device", 0)
    replay, count, _ = local_train(central, manifest.assignments[0], train,
                                   epochs=2, batch_size=16, lr=0.05,
                                   round_seed=round_seed)
    for name in fed_model.params:
        np.testing.assert_array_equal(fed_model.params[name], replay.params[name])


def test_run_federated_fixed_batch_stats_never_move():
    cfg, train, manifest, test = _small_setup(norm="fixed_batch")
    _, model = run_federated(cfg, train, manifest, test, build_model=_builder())
    for st in model.norm_states.values():
        np.testing.assert_array_equal(st.running_mean, np.zeros_like(st.running_mean))
        np.testing.assert_array_equal(st.running_var, np.ones_like(st.running_var))


def test_round_records_schema_and_streaming():
    cfg, train, manifest, test = _small_setup(rounds=2)
    streamed = []
    records, _ = run_federated(cfg, train, manifest, test,
                               build_model=_builder(),
                               record_sink=streamed.append,
                               clock=lambda: 0.0)
    assert len(records) == 2
    assert streamed == records
    line = json.loads(records[0].to_json())
    assert set(line) == {"round", "devices", "acc", "loss", "norms", "secs"}
    assert line["round"] == 1
    assert line["secs"] == 0.0
    assert all(isinstance(d, int) for d in line["devices"])


def test_eval_every_skips_intermediate_rounds():
    cfg, train, manifest, test = _small_setup(rounds=4, eval_every=2)
    records, _ = run_federated(cfg, train, manifest, test, build_model=_builder())
    evaluated = [r.round for r in records if r.acc is not None]
    assert evaluated == [2, 4]


def test_evaluate_range():
    model = build_cnn(LAYER, (1, 14, 14), 10, seed=0)
    test = make_synthetic(50, seed=0, shape=(1, 14, 14))
    acc, loss = evaluate(model, test)
    assert 0.0 <= acc <= 1.0
    assert loss > 0.0


def test_fed_config_validation():
    with pytest.raises(ValueError):
        FedConfig(num_devices=4, devices_per_round=5, local_epochs=1,
                  batch_size=8, learning_rate=0.1, total_rounds=1,
                  norm_kind=LAYER, model="cnn", seed=0)
