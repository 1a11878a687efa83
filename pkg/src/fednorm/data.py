"""Dataset loading (CIFAR-10 binary, MNIST IDX, synthetic), the non-IID
shard partitioner, batch iteration, and the mean-shifted dataset pair.

Pixels are scaled to [0, 1] with no further standardization: per-channel
standardization would partially absorb the injected mean shift that the
two-device experiment relies on.
"""

import struct
from dataclasses import dataclass

import numpy as np

CIFAR_RECORD = 3073  # 1 label byte + 3 channel-major 1024-byte planes


class FormatError(ValueError):
    """A dataset file does not match its documented binary format."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64
    labels: np.ndarray  # (N,) int64
    class_count: int

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise FormatError(
                f"image/label count mismatch: {self.images.shape[0]} vs {self.labels.shape[0]}"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise FormatError(f"labels out of range [0, {self.class_count})")

    def __len__(self):
        return self.images.shape[0]


@dataclass
class PartitionManifest:
    assignments: list  # per-device sorted index arrays
    seed: int
    classes_per_device: int
    samples_per_class: int

    @property
    def num_devices(self):
        return len(self.assignments)


def load_cifar10(directory, split="train"):
    """Load the CIFAR-10 binary batches from a directory.

    train reads data_batch_1..5.bin, test reads test_batch.bin."""
    from pathlib import Path

    directory = Path(directory)
    if split == "train":
        paths = [directory / f"data_batch_{i}.bin" for i in range(1, 6)]
    elif split == "test":
        paths = [directory / "test_batch.bin"]
    else:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    return load_cifar10_files(paths)


def load_cifar10_files(paths):
    """Parse CIFAR-10 binary batch files (3073-byte records: label byte
    then R, G, B planes of 1024 bytes). paths is an iterable of files."""
    images, labels = [], []
    for path in paths:
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD != 0:
            raise FormatError(
                f"{path}: size {raw.size} is not a positive multiple of {CIFAR_RECORD}"
            )
        records = raw.reshape(-1, CIFAR_RECORD)
        lab = records[:, 0]
        if lab.max() > 9:
            raise FormatError(f"{path}: label byte {int(lab.max())} > 9")
        images.append(records[:, 1:].reshape(-1, 3, 32, 32))
        labels.append(lab)
    images = np.concatenate(images).astype(np.float64) / 255.0
    labels = np.concatenate(labels).astype(np.int64)
    return Dataset(images=images, labels=labels, class_count=10)


def _read_idx(path, magic_expected, ndim):
    with open(path, "rb") as f:
        header = f.read(4 * (1 + ndim))
        fields = struct.unpack(f">{1 + ndim}I", header)
        if fields[0] != magic_expected:
            raise FormatError(
                f"{path}: bad IDX magic 0x{fields[0]:08x}, expected 0x{magic_expected:08x}"
            )
        dims = fields[1:]
        data = np.frombuffer(f.read(), dtype=np.uint8)
    if data.size != int(np.prod(dims)):
        raise FormatError(f"{path}: payload {data.size} bytes, header promises {dims}")
    return data.reshape(dims)


def load_mnist(directory, split="train"):
    """Load an MNIST IDX image/label pair from a directory."""
    from pathlib import Path

    directory = Path(directory)
    prefix = "train" if split == "train" else "t10k"
    return load_mnist_files(
        directory / f"{prefix}-images-idx3-ubyte",
        directory / f"{prefix}-labels-idx1-ubyte",
    )


def load_mnist_files(image_path, label_path):
    """Parse an MNIST IDX image/label pair into an (N, 1, 28, 28) dataset."""
    images = _read_idx(image_path, 0x00000803, 3)
    labels = _read_idx(label_path, 0x00000801, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"image/label count mismatch: {images.shape[0]} vs {labels.shape[0]}"
        )
    n, h, w = images.shape
    return Dataset(
        images=images.reshape(n, 1, h, w).astype(np.float64) / 255.0,
        labels=labels.astype(np.int64),
        class_count=10,
    )


def make_synthetic(num_samples, seed, num_classes=10, shape=(3, 16, 16),
                   noise=0.35, jitter=3):
    """Class-templated synthetic images: each class is a smooth random
    field; samples are circularly jittered copies plus Gaussian noise,
    squashed into roughly [0, 1].

    Deliberately hard enough that a small CNN lands mid-range instead of
    memorizing, so accuracy comparisons between normalization kinds have
    headroom in both directions.
    """
    rng = np.random.default_rng(seed)
    c, h, w = shape
    base = rng.normal(size=(num_classes, c, h + 8, w + 8))
    # smooth with a separable box blur to create spatial structure
    for _ in range(3):
        base = (np.roll(base, 1, axis=2) + base + np.roll(base, -1, axis=2)) / 3.0
        base = (np.roll(base, 1, axis=3) + base + np.roll(base, -1, axis=3)) / 3.0
    base = base / base.std(axis=(1, 2, 3), keepdims=True)
    # distinct per-class gain and offset: label skew across devices then
    # implies genuinely different input statistics per device
    gain = rng.uniform(0.5, 1.5, size=(num_classes, 1, 1, 1))
    offset = rng.uniform(-1.0, 1.0, size=(num_classes, 1, 1, 1))
    base = base * gain + offset
    # balanced by construction so shard partitioning is always feasible;
    # blockwise permutations keep every block-aligned prefix balanced too,
    # which lets split_dataset carve off a balanced held-out set
    blocks = -(-num_samples // num_classes)
    labels = np.concatenate([rng.permutation(num_classes) for _ in range(blocks)])
    labels = labels[:num_samples]
    images = np.empty((num_samples, c, h, w))
    for i, lab in enumerate(labels):
        dy, dx = rng.integers(-jitter, jitter + 1, size=2)
        tpl = np.roll(np.roll(base[lab], dy, axis=1), dx, axis=2)[:, :h, :w]
        images[i] = tpl + rng.normal(scale=noise * 3.0, size=(c, h, w))
    images = 1.0 / (1.0 + np.exp(-images))  # squash into (0, 1)
    return Dataset(images=images, labels=labels.astype(np.int64), class_count=num_classes)


def split_dataset(dataset, count):
    """Head/tail split, e.g. to carve a held-out set from one synthetic
    draw so both halves share the class templates."""
    if not 0 < count < len(dataset.images):
        raise ValueError(f"split point {count} outside dataset of {len(dataset.images)}")
    head = Dataset(images=dataset.images[:count], labels=dataset.labels[:count],
                   class_count=dataset.class_count)
    tail = Dataset(images=dataset.images[count:], labels=dataset.labels[count:],
                   class_count=dataset.class_count)
    return head, tail


def make_shifted_pair(base, delta):
    """Two copies of a dataset differing only by a constant pixel offset.
    No clamping, so the injected mean difference is exact."""
    first = Dataset(images=base.images.copy(), labels=base.labels.copy(),
                    class_count=base.class_count)
    second = Dataset(images=base.images + delta, labels=base.labels.copy(),
                     class_count=base.class_count)
    return first, second


def partition_noniid(dataset, num_devices, classes_per_device, samples_per_class, seed):
    """Shard partitioner: group indices by label, shuffle within label,
    cut into shards of samples_per_class, deal classes_per_device shards
    per device from distinct labels."""
    rng = np.random.default_rng(seed)
    labels = dataset.labels
    shards = []  # (label, index array)
    for lab in range(dataset.class_count):
        idx = np.flatnonzero(labels == lab)
        rng.shuffle(idx)
        n_shards = len(idx) // samples_per_class
        for s in range(n_shards):
            shards.append((lab, idx[s * samples_per_class:(s + 1) * samples_per_class]))

    need = num_devices * classes_per_device
    if need > len(shards):
        raise ValueError(
            f"infeasible partition: need {need} shards of {samples_per_class} "
            f"samples, only {len(shards)} available"
        )
    order = rng.permutation(len(shards))

    # deal shards so each device draws from distinct labels; always drawing
    # from the labels with the most shards left never strands a device
    # behind duplicate labels when a feasible deal exists
    by_label = {}
    for i in order:
        lab, idx = shards[i]
        by_label.setdefault(lab, []).append(idx)
    assignments = []
    for dev in range(num_devices):
        richest = sorted(by_label, key=lambda lab: -len(by_label[lab]))
        picks = richest[:classes_per_device]
        if len(picks) < classes_per_device:
            raise ValueError(
                f"infeasible partition: device {dev} can only draw "
                f"{len(picks)} distinct-label shards of {classes_per_device} required"
            )
        taken = []
        for lab in picks:
            taken.append(by_label[lab].pop())
            if not by_label[lab]:
                del by_label[lab]
        assignments.append(np.sort(np.concatenate(taken)))
    return PartitionManifest(
        assignments=assignments,
        seed=seed,
        classes_per_device=classes_per_device,
        samples_per_class=samples_per_class,
    )


def batch_iter(dataset, indices, batch_size, epoch_seed):
    """Shuffle indices by epoch_seed and yield (inputs, labels) batches.
    A final 1-sample remainder is dropped (batch statistics are undefined
    at N=1); remainders of >= 2 samples are yielded."""
    rng = np.random.default_rng(epoch_seed)
    order = np.array(indices, copy=True)
    rng.shuffle(order)
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        if len(chunk) < 2:
            break
        yield dataset.images[chunk], dataset.labels[chunk]


def save_manifest(manifest, path):
    """Line-oriented text format: one header line with the parameters,
    then device_id<TAB>comma-separated-indices per device."""
    with open(path, "w") as f:
        f.write(
            f"# seed={manifest.seed} classes_per_device={manifest.classes_per_device} "
            f"samples_per_class={manifest.samples_per_class} "
            f"num_devices={manifest.num_devices}\n"
        )
        for dev, idx in enumerate(manifest.assignments):
            f.write(f"{dev}\t{','.join(str(i) for i in idx)}\n")


def load_manifest(path):
    with open(path) as f:
        header = f.readline()
        if not header.startswith("#"):
            raise FormatError(f"{path}: missing manifest header line")
        meta = dict(tok.split("=") for tok in header[1:].split())
        assignments = []
        for line in f:
            dev, csv = line.rstrip("\n").split("\t")
            if int(dev) != len(assignments):
                raise FormatError(f"{path}: device ids out of order at {dev}")
            assignments.append(np.array([int(t) for t in csv.split(",")], dtype=np.int64))
    return PartitionManifest(
        assignments=assignments,
        seed=int(meta["seed"]),
        classes_per_device=int(meta["classes_per_device"]),
        samples_per_class=int(meta["samples_per_class"]),
    )
