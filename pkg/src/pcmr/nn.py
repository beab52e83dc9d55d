"""Learned-layer building blocks, the Adam optimizer, and checkpoint I/O.

Parameters are float64 Tensors registered on Module instances; a parameter
set is owned by one training loop at a time, while evaluation-only copies may
be shared read-only across threads.
"""

from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"PCMRCKPT 1"


class Module:
    """Minimal parameter container with explicit registration."""

    def __init__(self):
        self._params = []
        self._modules = []
        self.training = False

    def register(self, name, array):
        t = Tensor(array, requires_grad=True, name=name)
        self._params.append((name, t))
        return t

    def register_module(self, name, module):
        self._modules.append((name, module))
        return module

    def named_parameters(self, prefix=""):
        for n, t in self._params:
            yield prefix + n, t
        for mn, m in self._modules:
            yield from m.named_parameters(prefix + mn + ".")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    def train(self, flag=True):
        self.training = flag
        for _, m in self._modules:
            m.train(flag)
        return self

    def eval(self):
        return self.train(False)


def _uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """Affine layer y = x W^T + b with weight (out, in)."""

    def __init__(self, in_features, out_features, rng):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = self.register("weight", _uniform_init(rng, (out_features, in_features), in_features))
        self.bias = self.register("bias", _uniform_init(rng, (out_features,), in_features))

    def __call__(self, x):
        return x @ self.weight.T + self.bias


class GRU(Module):
    """Stacked gated recurrent unit over (batch, features) steps.

    Gate rows of the packed matrices are ordered update, reset, candidate.
    Dropout is applied to the output of every layer except the last; set
    dropout_all_layers to also drop the final output.
    """

    def __init__(self, input_size, hidden_size, num_layers, rng, dropout=0.0, dropout_all_layers=False):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.dropout = dropout
        self.dropout_all_layers = dropout_all_layers
        self._drop_rng = np.random.default_rng(rng.integers(0, 2**63))
        for layer in range(num_layers):
            in_l = input_size if layer == 0 else hidden_size
            self.register(f"w_ih{layer}", _uniform_init(rng, (3 * hidden_size, in_l), in_l))
            self.register(f"w_hh{layer}", _uniform_init(rng, (3 * hidden_size, hidden_size), hidden_size))
            self.register(f"b_ih{layer}", _uniform_init(rng, (3 * hidden_size,), in_l))
            self.register(f"b_hh{layer}", _uniform_init(rng, (3 * hidden_size,), hidden_size))
        self._by_name = dict(self._params)

    def init_state(self, batch):
        return [Tensor(np.zeros((batch, self.hidden_size))) for _ in range(self.num_layers)]

    def step(self, x, state):
        """One timestep: (batch, features) in, (output, new state) out."""
        if x.shape[-1] != self.input_size:
            raise ValueError(f"GRU expects input size {self.input_size}, got {x.shape[-1]}")
        h_size = self.hidden_size
        new_state = []
        for layer in range(self.num_layers):
            h = state[layer]
            gx = x @ self._by_name[f"w_ih{layer}"].T + self._by_name[f"b_ih{layer}"]
            gh = h @ self._by_name[f"w_hh{layer}"].T + self._by_name[f"b_hh{layer}"]
            z = ad.sigmoid(gx[:, :h_size] + gh[:, :h_size])
            r = ad.sigmoid(gx[:, h_size : 2 * h_size] + gh[:, h_size : 2 * h_size])
            n = ad.tanh(gx[:, 2 * h_size :] + r * gh[:, 2 * h_size :])
            h_new = (1.0 - z) * n + z * h
            new_state.append(h_new)
            x = h_new
            drop_here = self.dropout_all_layers or layer < self.num_layers - 1
            if drop_here and self.training and self.dropout > 0:
                x = ad.dropout(x, self.dropout, self._drop_rng, training=True)
        return x, new_state

    def run(self, xs, state=None):
        """Unroll over a list of (batch, features) steps."""
        if state is None:
            state = self.init_state(xs[0].shape[0])
        outs = []
        for x in xs:
            out, state = self.step(x, state)
            outs.append(out)
        return outs, state


class FeatureTransform(Module):
    """Input-alignment block: pools per-point features and predicts a k x k
    matrix applied to every point; the final layer starts as the identity."""

    def __init__(self, k, rng, widths=(64, 128), head_width=64):
        super().__init__()
        self.k = k
        self.l1 = self.register_module("l1", Linear(k, widths[0], rng))
        self.l2 = self.register_module("l2", Linear(widths[0], widths[1], rng))
        self.l3 = self.register_module("l3", Linear(widths[1], head_width, rng))
        self.l4 = self.register_module("l4", Linear(head_width, k * k, rng))
        self.l4.weight.data[:] = 0.0
        self.l4.bias.data[:] = np.eye(k).reshape(-1)

    def __call__(self, x):
        """x: (V, k) point features; returns the aligned (V, k) features."""
        h = ad.relu(self.l1(x))
        h = ad.relu(self.l2(h))
        pooled = ad.tmax(h, axis=0).reshape(1, -1)
        h = ad.relu(self.l3(pooled))
        mat = self.l4(h).reshape(self.k, self.k)
        return x @ mat


class Adam:
    """Adam with bias-corrected first/second moments (lr default 1e-4)."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter '{p.name or i}'")
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            m_hat = self._m[i] / bc1
            v_hat = self._v[i] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
# Layout: magic+version line, one JSON header line (format version, module
# name, joint count, layer shapes), one JSON manifest line mapping tensor
# names to (byte offset, shape) in declaration order, then the raw
# little-endian float64 data block.


def save_checkpoint(path, module_name, joint_count, named_params, extra=None):
    named_params = list(named_params)
    manifest = []
    offset = 0
    blobs = []
    for name, tensor in named_params:
        arr = np.ascontiguousarray(tensor.data, dtype="<f8")
        manifest.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    header = {
        "format_version": 1,
        "module": module_name,
        "joint_count": int(joint_count),
        "shapes": {m["name"]: m["shape"] for m in manifest},
    }
    if extra:
        header["config"] = extra
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + b"\n")
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(json.dumps(manifest).encode() + b"\n")
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Returns (header dict, {name: float64 array})."""
    with open(path, "rb") as f:
        magic = f.readline().rstrip(b"\n")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        header = json.loads(f.readline())
        manifest = json.loads(f.readline())
        data = f.read()
    arrays = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return header, arrays


def load_into(module, path, expect_module=None):
    """Load a checkpoint into a Module; shapes and names must match."""
    header, arrays = load_checkpoint(path)
    if expect_module is not None and header["module"] != expect_module:
        raise ValueError(f"{path}: checkpoint holds module '{header['module']}', expected '{expect_module}'")
    for name, tensor in module.named_parameters():
        if name not in arrays:
            raise ValueError(f"{path}: checkpoint missing parameter '{name}'")
        if arrays[name].shape != tensor.data.shape:
            raise ValueError(
                f"{path}: parameter '{name}' has shape {arrays[name].shape}, expected {tensor.data.shape}"
            )
        tensor.data[:] = arrays[name]
    return header
