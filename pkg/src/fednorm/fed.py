"""The federated-averaging engine: client sampling, multi-epoch local
training, sample-count-weighted aggregation with per-kind policies for the
batch-statistics, and global evaluation.

Determinism contract: every random stream is derived by labeled hashing of
(seed, round, device), the aggregation reduction runs in ascending
device-id order, and BLAS is pinned to one thread inside run_federated, so
the output is invariant to the number of worker threads.
"""

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import models as models_mod
from . import norms
from .data import batch_iter
from .models import model_backward, model_forward
from .nn import softmax_cross_entropy


def derive_seed(*parts):
    """Deterministic 63-bit seed from labeled parts (ints/strings)."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class FedConfig:
    num_devices: int = 100
    devices_per_round: int = 10
    local_epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.01
    total_rounds: int = 5000
    norm_kind: norms.NormKind = norms.BATCH
    model: str = "cnn"
    seed: int = 0
    eval_every: int = 1
    threads: int = 1

    def __post_init__(self):
        if self.devices_per_round > self.num_devices:
            raise ValueError("devices_per_round exceeds num_devices")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class RoundRecord:
    round: int
    devices: list
    acc: float
    loss: float
    norms: dict  # per-layer L2 norm of the global weights
    secs: float

    def to_json(self):
        return json.dumps(
            {
                "round": self.round,
                "devices": self.devices,
                "acc": self.acc,
                "loss": self.loss,
                "norms": self.norms,
                "secs": self.secs,
            },
            sort_keys=True,
        )


def sample_clients(round_index, m, num_devices, seed):
    """m distinct device ids, uniform without replacement, deterministic
    from (seed, round)."""
    rng = np.random.default_rng(derive_seed(seed, "sample", round_index))
    return sorted(int(d) for d in rng.choice(num_devices, size=m, replace=False))


def local_train(global_model, shard_indices, dataset, epochs, batch_size, lr, round_seed):
    """Clone the global model and run E epochs of mini-batch SGD on the
    device's shard. Returns (local_model, sample_count, metrics)."""
    if len(shard_indices) == 0:
        raise ValueError("local_train: empty shard")
    local = global_model.clone()
    epoch_losses = []
    for epoch in range(epochs):
        total, count = 0.0, 0
        for inputs, labels in batch_iter(
            dataset, shard_indices, batch_size, derive_seed(round_seed, "epoch", epoch)
        ):
            logits = model_forward(local, inputs, "train")
            loss, dlogits = softmax_cross_entropy(logits, labels)
            grads = model_backward(local, dlogits)
            models_mod.apply_sgd(local, grads, lr)
            total += loss * len(labels)
            count += len(labels)
        epoch_losses.append(total / count)
    return local, len(shard_indices), {"epoch_loss": epoch_losses}


def aggregate(local_results, norm_kind, prev_global=None):
    """Sample-count-weighted FedAvg over a list of (ModelState, count).

    Trainable parameters (weights, biases, gamma, beta) are always
    averaged. Running statistics follow the kind's policy: batch averages
    them too; fixed_batch keeps the previous global stats untouched
    (prev_global required); the per-sample kinds have none to aggregate.
    Reduction runs in list order, which callers keep sorted by device id.
    """
    if not local_results:
        raise ValueError("aggregate: no local models")
    first = local_results[0][0]
    for m, _ in local_results[1:]:
        if m.topology != first.topology:
            raise ValueError("aggregate: topology mismatch between local models")
    total = float(sum(c for _, c in local_results))
    weights = [c / total for _, c in local_results]

    out = first.clone()
    for name in out.trainable():
        acc = np.zeros_like(out.trainable()[name])
        for (m, _), w in zip(local_results, weights):
            acc += w * m.trainable()[name]
        out.set_param(name, acc)

    if norm_kind.name == "batch":
        for key in out.norm_states:
            for stat in ("running_mean", "running_var"):
                acc = np.zeros_like(getattr(out.norm_states[key], stat))
                for (m, _), w in zip(local_results, weights):
                    acc += w * getattr(m.norm_states[key], stat)
                setattr(out.norm_states[key], stat, acc)
    elif norm_kind.name == "fixed_batch":
        if prev_global is None:
            raise ValueError("aggregate: fixed_batch policy needs the previous global model")
        for key in out.norm_states:
            st, prev = out.norm_states[key], prev_global.norm_states[key]
            st.running_mean = prev.running_mean.copy()
            st.running_var = prev.running_var.copy()
    else:
        # layer/group/instance/none never touched their running stats
        for key in out.norm_states:
            st = out.norm_states[key]
            st.running_mean = first.norm_states[key].running_mean.copy()
            st.running_var = first.norm_states[key].running_var.copy()
    return out


def evaluate(model, dataset, batch_size=256):
    """Eval-mode accuracy and mean loss over a full dataset."""
    correct, total, loss_sum = 0, 0, 0.0
    for start in range(0, len(dataset), batch_size):
        inputs = dataset.images[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        logits = model_forward(model, inputs, "eval")
        model._caches = []
        loss, _ = softmax_cross_entropy(logits, labels)
        correct += int((logits.argmax(axis=1) == labels).sum())
        loss_sum += loss * len(labels)
        total += len(labels)
    return correct / total, loss_sum / total


def _layer_norms(model):
    return {
        name: float(np.linalg.norm(w))
        for name, w in model.params.items()
        if name.endswith(".w")
    }


def run_federated(config, train_dataset, manifest, test_dataset,
                  build_model=None, record_sink=None, clock=time.perf_counter):
    """Run the full FedAvg loop. Returns (records, final_global_model).

    record_sink, when given, receives each RoundRecord as it is produced
    (streaming JSONL writers hook in here). clock is injectable so tests
    can pin wall-clock durations.
    """
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        from contextlib import nullcontext

        def threadpool_limits(limits):
            return nullcontext()

    if manifest.num_devices != config.num_devices:
        raise ValueError(
            f"manifest has {manifest.num_devices} devices, config expects {config.num_devices}"
        )
    if build_model is None:
        def build_model(kind, seed):
            return models_mod.build_cnn(
                kind, input_shape=train_dataset.images.shape[1:], num_classes=train_dataset.class_count,
                seed=seed,
            )

    global_model = build_model(config.norm_kind, derive_seed(config.seed, "init"))
    records = []

    def train_one(round_index, dev):
        return dev, local_train(
            global_model,
            manifest.assignments[dev],
            train_dataset,
            config.local_epochs,
            config.batch_size,
            config.learning_rate,
            derive_seed(config.seed, "round", round_index, "device", dev),
        )

    with threadpool_limits(limits=1):
        for round_index in range(config.total_rounds):
            t0 = clock()
            sampled = sample_clients(
                round_index, config.devices_per_round, config.num_devices, config.seed
            )
            if config.threads > 1:
                with ThreadPoolExecutor(max_workers=config.threads) as ex:
                    results = list(ex.map(lambda d: train_one(round_index, d), sampled))
            else:
                results = [train_one(round_index, d) for d in sampled]
            results.sort(key=lambda r: r[0])
            locals_ = [(m, c) for _, (m, c, _) in results]
            global_model = aggregate(locals_, config.norm_kind, prev_global=global_model)

            if (round_index + 1) % config.eval_every == 0 or round_index == config.total_rounds - 1:
                acc, loss = evaluate(global_model, test_dataset)
            else:
                acc, loss = None, None  # not evaluated this round
            record = RoundRecord(
                round=round_index + 1,
                devices=sampled,
                acc=acc,
                loss=loss,
                norms=_layer_norms(global_model),
                secs=clock() - t0,
            )
            records.append(record)
            if record_sink is not None:
                record_sink(record)
    return records, global_model
