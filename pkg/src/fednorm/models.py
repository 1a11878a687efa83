"""Model assembly: the 5-layer CNN, a small residual network, and the
topology executor with explicit forward/backward passes.

A ModelState is an ordered set of named parameter arrays plus one
NormState per norm slot. Two ModelStates built from the same topology have
identical parameter names and shapes and therefore support elementwise
linear combination (the aggregation contract).
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn, norms
from .norms import NormKind, NormState

_MAGIC = b"FEDNORM1"


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv5x5 | dense | norm | relu | flatten | residual_begin | residual_add
    name: str
    in_dim: int = 0
    out_dim: int = 0
    pad: int = 0
    norm: str = ""  # NormKind token for norm layers ("" means identity slot)

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ModelState:
    topology: tuple
    params: dict
    norm_states: dict
    _caches: list = field(default_factory=list, repr=False)

    def clone(self):
        return ModelState(
            topology=self.topology,
            params={k: v.copy() for k, v in self.params.items()},
            norm_states={k: s.clone() for k, s in self.norm_states.items()},
        )

    def trainable(self):
        """Ordered name -> array map of every SGD-updated parameter."""
        out = {}
        for spec in self.topology:
            if spec.kind in ("conv5x5", "dense"):
                out[spec.name + ".w"] = self.params[spec.name + ".w"]
                out[spec.name + ".b"] = self.params[spec.name + ".b"]
            elif spec.kind == "norm" and spec.name in self.norm_states:
                st = self.norm_states[spec.name]
                out[spec.name + ".gamma"] = st.gamma
                out[spec.name + ".beta"] = st.beta
        return out

    def set_param(self, name, value):
        """Write a trainable parameter back by name (shape-checked)."""
        base, leaf = name.rsplit(".", 1)
        if leaf in ("gamma", "beta"):
            st = self.norm_states[base]
            cur = getattr(st, leaf)
            if cur.shape != value.shape:
                raise nn.ShapeError(f"{name}: shape {value.shape} != {cur.shape}")
            setattr(st, leaf, np.asarray(value, dtype=np.float64))
        else:
            cur = self.params[name]
            if cur.shape != value.shape:
                raise nn.ShapeError(f"{name}: shape {value.shape} != {cur.shape}")
            self.params[name] = np.asarray(value, dtype=np.float64)

    def param_count(self):
        return sum(v.size for v in self.trainable().values())


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_model(topology, seed, eps=1e-5, momentum=0.1):
    rng = np.random.default_rng(seed)
    params = {}
    norm_states = {}
    for spec in topology:
        if spec.kind == "conv5x5":
            fan_in = spec.in_dim * 25
            params[spec.name + ".w"] = _kaiming_uniform(
                rng, (spec.out_dim, spec.in_dim, 5, 5), fan_in
            )
            params[spec.name + ".b"] = np.zeros(spec.out_dim)
        elif spec.kind == "dense":
            params[spec.name + ".w"] = _kaiming_uniform(
                rng, (spec.out_dim, spec.in_dim), spec.in_dim
            )
            params[spec.name + ".b"] = np.zeros(spec.out_dim)
        elif spec.kind == "norm" and spec.norm:
            kind = norms.parse_kind(spec.norm)
            if kind.name != "none":
                norm_states[spec.name] = NormState.create(spec.out_dim, momentum=momentum, eps=eps)
    return ModelState(topology=tuple(topology), params=params, norm_states=norm_states)


def _norm_token(norm_kind, channels, spatial):
    """Resolve the norm slot token for one layer, validating group counts.

    Instance normalization has no spatial axes on dense layers, so dense
    slots degrade to identity for that kind.
    """
    if norm_kind.name == "none":
        return ""
    if norm_kind.name == "group" and channels % norm_kind.groups != 0:
        raise ValueError(
            f"group count {norm_kind.groups} does not divide {channels} channels"
        )
    if norm_kind.name == "instance" and not spatial:
        return ""
    return str(norm_kind)


def build_cnn(norm_kind, input_shape=(3, 32, 32), num_classes=10, seed=0,
              eps=1e-5, momentum=0.1):
    """The 5x5-conv CNN: conv 3-6 / norm / conv 6-16 / norm / FC-120 /
    norm / FC-84 / FC-10, ReLU after each norm slot and after FC-84.

    Valid padding and no pooling, so spatial size shrinks by 4 per conv;
    input spatial extent must be at least 13.
    """
    c, h, w = input_shape
    if h < 13 or w < 13:
        raise ValueError(f"input spatial size must be >= 13, got {h}x{w}")
    h2, w2 = h - 8, w - 8
    flat = 16 * h2 * w2
    topo = [
        LayerSpec("conv5x5", "conv1", in_dim=c, out_dim=6),
        LayerSpec("norm", "norm1", out_dim=6, norm=_norm_token(norm_kind, 6, True)),
        LayerSpec("relu", "relu1"),
        LayerSpec("conv5x5", "conv2", in_dim=6, out_dim=16),
        LayerSpec("norm", "norm2", out_dim=16, norm=_norm_token(norm_kind, 16, True)),
        LayerSpec("relu", "relu2"),
        LayerSpec("flatten", "flatten"),
        LayerSpec("dense", "fc1", in_dim=flat, out_dim=120),
        LayerSpec("norm", "norm3", out_dim=120, norm=_norm_token(norm_kind, 120, False)),
        LayerSpec("relu", "relu3"),
        LayerSpec("dense", "fc2", in_dim=120, out_dim=84),
        LayerSpec("relu", "relu4"),
        LayerSpec("dense", "fc3", in_dim=84, out_dim=num_classes),
    ]
    return _init_model(topo, seed, eps=eps, momentum=momentum)


def build_miniresnet(norm_kind, input_shape=(3, 16, 16), num_classes=10, seed=0,
                     eps=1e-5, momentum=0.1, width=8):
    """Small residual model: valid-conv stem, two identity-shortcut blocks
    of same-padded 5x5 convs, flatten, dense head. Probes whether identity
    shortcuts keep no-normalization training stable.
    """
    c, h, w = input_shape
    if h < 5 or w < 5:
        raise ValueError(f"input spatial size must be >= 5, got {h}x{w}")
    hs, ws = h - 4, w - 4
    topo = [
        LayerSpec("conv5x5", "stem", in_dim=c, out_dim=width),
        LayerSpec("norm", "norm0", out_dim=width, norm=_norm_token(norm_kind, width, True)),
        LayerSpec("relu", "relu0"),
    ]
    for b in (1, 2):
        topo += [
            LayerSpec("residual_begin", f"res{b}"),
            LayerSpec("conv5x5", f"block{b}_conv1", in_dim=width, out_dim=width, pad=2),
            LayerSpec("norm", f"block{b}_norm1", out_dim=width,
                      norm=_norm_token(norm_kind, width, True)),
            LayerSpec("relu", f"block{b}_relu1"),
            LayerSpec("conv5x5", f"block{b}_conv2", in_dim=width, out_dim=width, pad=2),
            LayerSpec("norm", f"block{b}_norm2", out_dim=width,
                      norm=_norm_token(norm_kind, width, True)),
            LayerSpec("residual_add", f"res{b}_add"),
            LayerSpec("relu", f"block{b}_relu2"),
        ]
    topo += [
        LayerSpec("flatten", "flatten"),
        LayerSpec("dense", "head", in_dim=width * hs * ws, out_dim=num_classes),
    ]
    model = _init_model(topo, seed, eps=eps, momentum=momentum)
    if model.param_count() >= 500_000:
        raise AssertionError("mini-resnet budget exceeded")
    return model


def build_toy_convnet(input_shape=(1, 20, 20), num_classes=10, seed=0,
                      norm="batch", eps=1e-5, momentum=0.1):
    """Three single-channel 5x5 conv layers, each capped by a norm slot,
    plus a dense classifier head. The two-device shift experiment trains
    two replicas of this model."""
    c, h, w = input_shape
    if h < 13 or w < 13:
        raise ValueError(f"input spatial size must be >= 13, got {h}x{w}")
    hs, ws = h - 12, w - 12
    topo = []
    for i in (1, 2, 3):
        topo += [
            LayerSpec("conv5x5", f"conv{i}", in_dim=1 if i > 1 else c, out_dim=1),
            LayerSpec("norm", f"norm{i}", out_dim=1, norm=norm),
            LayerSpec("relu", f"relu{i}"),
        ]
    topo += [
        LayerSpec("flatten", "flatten"),
        LayerSpec("dense", "head", in_dim=hs * ws, out_dim=num_classes),
    ]
    return _init_model(topo, seed, eps=eps, momentum=momentum)


def model_forward(model, x, mode, capture=None):
    """Run the topology in order; caches intermediates on the model for a
    subsequent model_backward. Returns the logits.

    capture, when a dict is passed, collects (input, output) pairs of
    every norm slot keyed by layer name (diagnostics hook)."""
    caches = []
    h = np.asarray(x, dtype=np.float64)
    skip_stack = []
    for spec in model.topology:
        if spec.kind == "conv5x5":
            h, cache = nn.conv2d_forward(
                h, model.params[spec.name + ".w"], model.params[spec.name + ".b"], pad=spec.pad
            )
            caches.append(cache)
        elif spec.kind == "dense":
            h, cache = nn.dense_forward(
                h, model.params[spec.name + ".w"], model.params[spec.name + ".b"]
            )
            caches.append(cache)
        elif spec.kind == "norm":
            pre = h
            if spec.norm:
                h, cache = norms.norm_forward(
                    h, model.norm_states[spec.name], norms.parse_kind(spec.norm), mode
                )
                caches.append(cache)
            else:
                caches.append(None)
            if capture is not None:
                capture[spec.name] = (pre, h)
        elif spec.kind == "relu":
            h, cache = nn.relu(h)
            caches.append(cache)
        elif spec.kind == "flatten":
            caches.append(h.shape)
            h = h.reshape(h.shape[0], -1)
        elif spec.kind == "residual_begin":
            skip_stack.append(h)
            caches.append(None)
        elif spec.kind == "residual_add":
            h = h + skip_stack.pop()
            caches.append(None)
        else:
            raise ValueError(f"unknown layer kind {spec.kind!r}")
    model._caches = caches
    return h


def model_backward(model, dlogits):
    """Backpropagate dlogits through the cached forward pass. Returns a
    dict of gradients keyed like trainable()."""
    if not model._caches:
        raise RuntimeError("model_backward called without a prior model_forward")
    grads = {}
    dh = np.asarray(dlogits, dtype=np.float64)
    skip_grads = []
    for spec, cache in zip(reversed(model.topology), reversed(model._caches)):
        if spec.kind == "conv5x5":
            dh, dw, db = nn.conv2d_backward(dh, cache)
            grads[spec.name + ".w"] = dw
            grads[spec.name + ".b"] = db
        elif spec.kind == "dense":
            dh, dw, db = nn.dense_backward(dh, cache)
            grads[spec.name + ".w"] = dw
            grads[spec.name + ".b"] = db
        elif spec.kind == "norm":
            if spec.norm:
                dh, dgamma, dbeta = norms.norm_backward(dh, cache)
                grads[spec.name + ".gamma"] = dgamma
                grads[spec.name + ".beta"] = dbeta
        elif spec.kind == "relu":
            dh = nn.relu_backward(dh, cache)
        elif spec.kind == "flatten":
            dh = dh.reshape(cache)
        elif spec.kind == "residual_add":
            skip_grads.append(dh)
        elif spec.kind == "residual_begin":
            dh = dh + skip_grads.pop()
    model._caches = []
    return grads


def apply_sgd(model, grads, lr):
    """In-place descent step on every trainable parameter."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, p in model.trainable().items():
        p -= lr * grads[name]
    return model


def batch_loss(model, inputs, labels, mode="train"):
    logits = model_forward(model, inputs, mode)
    loss, dlogits = nn.softmax_cross_entropy(logits, labels)
    return loss, dlogits


def grad_check(model, inputs, labels, eps=1e-4, max_coords=200, seed=0, corrupt=None):
    """Compare analytic full-model gradients against central finite
    differences on a random subsample of coordinates per parameter.

    corrupt names a parameter whose largest sampled analytic-gradient
    coordinate is doubled first (sensitivity self-test). Returns the max
    relative error across all sampled coordinates.
    """
    rng = np.random.default_rng(seed)
    loss, dlogits = batch_loss(model, inputs, labels, mode="train")
    analytic = model_backward(model, dlogits)
    # floor the per-coordinate comparison at the whole model's gradient
    # scale; blocks with an identically-zero true gradient (biases feeding
    # a shift-invariant norm) would otherwise compare noise against noise
    scale = max(float(np.abs(g).max()) for g in analytic.values())
    worst = 0.0
    for name, p in model.trainable().items():
        size = p.size
        coords = (
            np.arange(size)
            if size <= max_coords
            else np.sort(rng.choice(size, size=max_coords, replace=False))
        )
        a = analytic[name].ravel()[coords].copy()
        if corrupt == name:
            a[np.argmax(np.abs(a))] *= 2.0

        def loss_at(values):
            model.set_param(name, values.reshape(p.shape))
            return batch_loss(model, inputs, labels, mode="train")[0]

        numeric = nn.finite_difference_grad(loss_at, p, eps=eps, coords=coords)
        model.set_param(name, p)  # restore
        worst = max(worst, nn.relative_grad_error(a, numeric, scale=scale))
    return worst


def save_checkpoint(model, path):
    """Self-describing container: magic, JSON header (topology + array
    manifest), then the raw float64 little-endian blobs in manifest order."""
    arrays = _checkpoint_arrays(model)
    manifest = [
        {"name": k, "shape": list(v.shape)} for k, v in arrays.items()
    ]
    header = {
        "format": "fednorm-checkpoint",
        "version": 1,
        "dtype": "<f8",
        "topology": [s.to_dict() for s in model.topology],
        "norm_meta": {
            k: {"momentum": s.momentum, "eps": s.eps} for k, s in model.norm_states.items()
        },
        "arrays": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for v in arrays.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a fednorm checkpoint")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen))
        topo = tuple(LayerSpec.from_dict(d) for d in header["topology"])
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * n)
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    params = {k: v for k, v in arrays.items() if not k.startswith("norm:")}
    norm_states = {}
    for name, meta in header["norm_meta"].items():
        norm_states[name] = NormState(
            gamma=arrays[f"norm:{name}.gamma"],
            beta=arrays[f"norm:{name}.beta"],
            running_mean=arrays[f"norm:{name}.running_mean"],
            running_var=arrays[f"norm:{name}.running_var"],
            momentum=meta["momentum"],
            eps=meta["eps"],
        )
    return ModelState(topology=topo, params=params, norm_states=norm_states)


def _checkpoint_arrays(model):
    arrays = dict(model.params)
    for name, st in model.norm_states.items():
        arrays[f"norm:{name}.gamma"] = st.gamma
        arrays[f"norm:{name}.beta"] = st.beta
        arrays[f"norm:{name}.running_mean"] = st.running_mean
        arrays[f"norm:{name}.running_var"] = st.running_var
    return arrays
