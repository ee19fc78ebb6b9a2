"""Differentiable building blocks for the pose network.

A thin, contract-tested layer over torch autograd: named parameter arrays,
the forward primitives the network needs, seeded deterministic dropout,
rectifier-scaled init, an Adam step, and the on-disk checkpoint format
(JSON manifest + one little-endian float blob). Training and inference run
in float32; tests exercise everything in float64 against finite differences.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ShapeError
from .seeding import make_rng

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_BLOB = "params.bin"
CHECKPOINT_VERSION = 1
DQ_VALUE_ORDER = "(real w, x, y, z, dual w, x, y, z)"

BN_MOMENTUM = 0.9  # running = momentum * running + (1 - momentum) * batch


class ParamArray:
    """A named, shaped, differentiable array. Non-trainable entries hold
    state like batch-norm running statistics."""

    def __init__(self, name, tensor, trainable=True):
        self.name = name
        self.tensor = tensor
        self.trainable = trainable
        tensor.requires_grad_(trainable)

    @property
    def shape(self):
        return tuple(self.tensor.shape)

    @property
    def grad(self):
        return self.tensor.grad

    def __repr__(self):
        return f"ParamArray({self.name!r}, shape={self.shape}, trainable={self.trainable})"


class ParamStore:
    """Ordered collection of ParamArrays addressed by dotted names."""

    def __init__(self, dtype=torch.float32):
        self.dtype = dtype
        self._params = {}

    def add(self, name, values, trainable=True):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor = torch.as_tensor(np.asarray(values)).to(self.dtype).clone()
        self._params[name] = ParamArray(name, tensor, trainable)
        return self._params[name]

    def add_linear(self, name, fan_in, fan_out, seed):
        """Weight uniform in +-sqrt(6/fan_in), bias zero; deterministic per
        (seed, parameter name) so build order does not matter."""
        if fan_in < 1 or fan_out < 1:
            raise ValueError("layer sizes must be positive")
        bound = np.sqrt(6.0 / fan_in)
        rng = make_rng(seed, "init", f"{name}.w")
        self.add(f"{name}.w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        self.add(f"{name}.b", np.zeros(fan_out))

    def add_batch_norm(self, name, width):
        self.add(f"{name}.gamma", np.ones(width))
        self.add(f"{name}.beta", np.zeros(width))
        self.add(f"{name}.rmean", np.zeros(width), trainable=False)
        self.add(f"{name}.rvar", np.ones(width), trainable=False)

    def add_layer_norm(self, name, width):
        self.add(f"{name}.gamma", np.ones(width))
        self.add(f"{name}.beta", np.zeros(width))

    def __getitem__(self, name):
        return self._params[name].tensor

    def __contains__(self, name):
        return name in self._params

    def param(self, name):
        return self._params[name]

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def trainable_items(self):
        return [(n, p) for n, p in self._params.items() if p.trainable]

    def zero_grad(self):
        for p in self._params.values():
            if p.tensor.grad is not None:
                p.tensor.grad = None

    def clone(self, dtype=None):
        out = ParamStore(dtype or self.dtype)
        for name, p in self._params.items():
            out.add(name, p.tensor.detach().cpu().numpy(), p.trainable)
        return out


def init_params(layers, seed, dtype=torch.float32):
    """Build a ParamStore for a stack of linear layers.

    layers: iterable of (name, fan_in, fan_out).
    """
    store = ParamStore(dtype)
    for name, fan_in, fan_out in layers:
        store.add_linear(name, fan_in, fan_out, seed)
    return store


# ---------------------------------------------------------------------------
# forward primitives
# ---------------------------------------------------------------------------

def _check_finite_shape(x):
    if not torch.isfinite(x).all():
        raise ValueError("operand contains non-finite values")


def matrix_multiply(a, b):
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"cannot multiply shapes {tuple(a.shape)} and {tuple(b.shape)}")
    return torch.matmul(a, b)


def add_bias(x, bias):
    if bias.dim() != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"bias shape {tuple(bias.shape)} does not match input {tuple(x.shape)}")
    return x + bias


def linear(x, store, name):
    """x @ w + b for the named layer."""
    return add_bias(matrix_multiply(x, store[f"{name}.w"]), store[f"{name}.b"])


def relu(x):
    return torch.relu(x)


def sine(x):
    return torch.sin(x)


def cosine(x):
    return torch.cos(x)


def concatenate(tensors, axis=-1):
    ref = tuple(tensors[0].shape)
    for t in tensors[1:]:
        s = tuple(t.shape)
        if len(s) != len(ref) or any(
                i != (axis % len(ref)) and s[i] != ref[i] for i in range(len(ref))):
            raise ShapeError(f"cannot concatenate shapes {ref} and {s} on axis {axis}")
    return torch.cat(tensors, dim=axis)


def max_pool_over_axis(x, axis):
    """Max over one axis; also returns the argmax used for gradient routing
    (ties go to the lowest index)."""
    values, indices = torch.max(x, dim=axis)
    return values, indices


def mean_over_axis(x, axis):
    return torch.mean(x, dim=axis)


def softmax_over_axis(x, axis):
    return torch.softmax(x, dim=axis)


def layer_scale(x, gamma, beta):
    """Elementwise affine over the last axis."""
    if gamma.shape != beta.shape or x.shape[-1] != gamma.shape[-1]:
        raise ShapeError(
            f"affine shapes {tuple(gamma.shape)}/{tuple(beta.shape)} do not match "
            f"input {tuple(x.shape)}")
    return x * gamma + beta


def batch_norm(x, store, name, training, momentum=BN_MOMENTUM, eps=1e-5):
    """Normalize over all non-channel axes.

    Train mode uses batch statistics and folds them into the stored running
    averages; eval mode reads the running averages only.
    """
    gamma = store[f"{name}.gamma"]
    beta = store[f"{name}.beta"]
    if x.shape[-1] != gamma.shape[0]:
        raise ShapeError(f"batch-norm width {tuple(gamma.shape)} does not match "
                         f"input {tuple(x.shape)}")
    flat = x.reshape(-1, x.shape[-1])
    if training:
        mean = flat.mean(dim=0)
        var = flat.var(dim=0, unbiased=False)
        n = flat.shape[0]
        with torch.no_grad():
            unbiased = var.detach() * (n / (n - 1)) if n > 1 else var.detach()
            rmean = store[f"{name}.rmean"]
            rvar = store[f"{name}.rvar"]
            rmean.mul_(momentum).add_((1.0 - momentum) * mean.detach())
            rvar.mul_(momentum).add_((1.0 - momentum) * unbiased)
    else:
        mean = store[f"{name}.rmean"]
        var = store[f"{name}.rvar"]
    y = (x - mean) / torch.sqrt(var + eps)
    return layer_scale(y, gamma, beta)


def layer_norm(x, store, name, eps=1e-5):
    """Normalize the last axis, then the named affine."""
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mean) / torch.sqrt(var + eps)
    return layer_scale(y, store[f"{name}.gamma"], store[f"{name}.beta"])


def dropout(x, rate, training, seed, layer_id, step):
    """Inverted dropout with a counter-based mask keyed by
    (seed, layer_id, step); identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    rng = make_rng(seed, "dropout", layer_id, step)
    keep = rng.uniform(size=tuple(x.shape)) >= rate
    mask = torch.as_tensor(keep, dtype=x.dtype) / (1.0 - rate)
    return x * mask


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(store, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, gradients=None):
    """One bias-corrected adaptive-moment update over the trainable params.

    gradients defaults to each parameter's accumulated .grad; parameters
    with no gradient are treated as zero-gradient (left unchanged by the
    moment math when their state is zero too).
    """
    state.t += 1
    with torch.no_grad():
        for name, p in store.trainable_items():
            if gradients is not None:
                g = gradients.get(name)
            else:
                g = p.tensor.grad
            if g is None:
                g = torch.zeros_like(p.tensor)
            if name not in state.m:
                state.m[name] = torch.zeros_like(p.tensor)
                state.v[name] = torch.zeros_like(p.tensor)
            m = state.m[name]
            v = state.v[name]
            m.mul_(beta1).add_((1.0 - beta1) * g)
            v.mul_(beta2).add_((1.0 - beta2) * g * g)
            m_hat = m / (1.0 - beta1 ** state.t)
            v_hat = v / (1.0 - beta2 ** state.t)
            p.tensor -= lr * m_hat / (torch.sqrt(v_hat) + eps)
    return store, state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_DTYPE_TAGS = {torch.float32: "<f4", torch.float64: "<f8"}
_TAG_DTYPES = {"<f4": torch.float32, "<f8": torch.float64}


def save_checkpoint(store, directory, meta=None, adam=None):
    """Write manifest.json plus a single little-endian float blob.

    Float32 stores write float32 records (the default interchange format);
    float64 stores keep full precision so training replays stay bit-exact.
    """
    os.makedirs(directory, exist_ok=True)
    entries = []
    blobs = []
    offset = 0

    def push(name, tensor, trainable):
        nonlocal offset
        tag = _DTYPE_TAGS[tensor.dtype]
        data = tensor.detach().cpu().numpy().astype(tag).tobytes()
        entries.append({
            "name": name,
            "shape": list(tensor.shape),
            "dtype": tag,
            "offset": offset,
            "trainable": trainable,
        })
        blobs.append(data)
        offset += len(data)

    for name, p in store.items():
        push(name, p.tensor, p.trainable)
    if adam is not None:
        for name, t in adam.m.items():
            push(f"optim.m/{name}", t, False)
        for name, t in adam.v.items():
            push(f"optim.v/{name}", t, False)

    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "dq_value_order": DQ_VALUE_ORDER,
        "adam_t": adam.t if adam is not None else None,
        "meta": meta or {},
        "arrays": entries,
    }
    with open(os.path.join(directory, CHECKPOINT_MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=1)
    with open(os.path.join(directory, CHECKPOINT_BLOB), "wb") as fh:
        fh.write(b"".join(blobs))


def load_checkpoint(directory):
    """Read a checkpoint; returns (ParamStore, meta dict, AdamState or None)."""
    with open(os.path.join(directory, CHECKPOINT_MANIFEST)) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')}")
    with open(os.path.join(directory, CHECKPOINT_BLOB), "rb") as fh:
        blob = fh.read()

    arrays = {}
    for entry in manifest["arrays"]:
        np_dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        data = np.frombuffer(blob, dtype=np_dtype, count=count, offset=start)
        arrays[entry["name"]] = (data.reshape(entry["shape"]), entry)

    dtypes = {e["dtype"] for e in manifest["arrays"]
              if not e["name"].startswith("optim.")}
    store_dtype = _TAG_DTYPES[dtypes.pop()] if len(dtypes) == 1 else torch.float32
    store = ParamStore(store_dtype)
    adam = AdamState(t=manifest.get("adam_t") or 0) if manifest.get("adam_t") is not None else None
    for name, (values, entry) in arrays.items():
        if name.startswith("optim.m/"):
            adam.m[name[len("optim.m/"):]] = torch.as_tensor(values.copy()).to(store_dtype)
        elif name.startswith("optim.v/"):
            adam.v[name[len("optim.v/"):]] = torch.as_tensor(values.copy()).to(store_dtype)
        else:
            store.add(name, values.copy(), trainable=entry["trainable"])
    return store, manifest.get("meta", {}), adam
