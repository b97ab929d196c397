"""Small feed-forward networks with hand-written backprop, Adam and a
finite-difference gradient checker.

Everything is float64 and batch-first: inputs are ``(batch, in)`` or a single
``(in,)`` vector. Networks are plain values; training code mutates their
arrays in place through :func:`adam_step`.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import (
    FileFormatError,
    NumericError,
    ShapeError,
    TruncatedFileError,
    ValidationError,
    VersionMismatchError,
)

ACTIVATIONS = ("silu", "tanh", "relu", "identity")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _activate(z, kind):
    if kind == "silu":
        return z * _sigmoid(z)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activate_grad(z, kind):
    if kind == "silu":
        s = _sigmoid(z)
        return s * (1.0 + z * (1.0 - s))
    if kind == "tanh":
        return 1.0 - np.tanh(z) ** 2
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    return np.ones_like(z)


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"layer weight {self.weight.shape} and bias {self.bias.shape} do not match"
            )


class Network:
    """A chain of affine layers, each followed by its activation."""

    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise ValidationError("network needs at least one layer")
        for a, b in zip(layers[:-1], layers[1:]):
            if a.weight.shape[0] != b.weight.shape[1]:
                raise ShapeError(
                    f"layer dims do not chain: {a.weight.shape} -> {b.weight.shape}"
                )
        self.layers = list(layers)

    @classmethod
    def create(
        cls,
        sizes: Sequence[int],
        rng: np.random.Generator,
        activation: str = "silu",
        out_activation: str = "identity",
    ) -> "Network":
        """Uniform fan-in initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
            raise ValidationError(f"bad layer sizes {sizes}")
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_out, n_in))
            b = rng.uniform(-bound, bound, size=n_out)
            act = out_activation if i == len(sizes) - 2 else activation
            layers.append(Layer(w, b, act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "Network":
        return Network([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim or x.ndim not in (1, 2):
            raise ShapeError(f"expected input (..., {self.input_dim}), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValidationError("non-finite network input")
        return x

    def forward(self, x):
        x = self._check_input(x)
        h = x
        for layer in self.layers:
            h = _activate(h @ layer.weight.T + layer.bias, layer.activation)
        return h

    def forward_cache(self, x):
        """Forward pass that also returns what :meth:`backward` needs."""
        x = self._check_input(x)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        inputs, pre = [], []
        for layer in self.layers:
            inputs.append(h)
            z = h @ layer.weight.T + layer.bias
            pre.append(z)
            h = _activate(z, layer.activation)
        out = h[0] if squeeze else h
        return out, (inputs, pre, squeeze)

    def backward(self, cache, grad_out):
        """Gradients of ``sum(grad_out * output)`` w.r.t. parameters and input.

        Returns ``(param_grads, grad_input)`` with ``param_grads`` ordered like
        :meth:`params`.
        """
        inputs, pre, squeeze = cache
        g = np.asarray(grad_out, dtype=np.float64)
        if squeeze:
            g = g[None, :]
        if g.shape != pre[-1].shape:
            raise ShapeError(f"upstream gradient {g.shape} does not match output {pre[-1].shape}")
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))  # type: ignore[list-item]
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if layer.activation != "identity":
                g = g * _activate_grad(pre[i], layer.activation)
            grads[2 * i] = g.T @ inputs[i]
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ layer.weight
        return grads, (g[0] if squeeze else g)


def forward(net: Network, x):
    return net.forward(x)


def backward(net: Network, x, upstream):
    _, cache = net.forward_cache(x)
    return net.backward(cache, upstream)


# ---------------------------------------------------------------------------
# gradient checking


def numeric_gradient(fn: Callable[[], float], array: np.ndarray, epsilon: float) -> np.ndarray:
    """Central differences of ``fn()`` w.r.t. every entry of ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + epsilon
        up = fn()
        flat[i] = old - epsilon
        down = fn()
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * epsilon)
    return grad


def relative_error(analytic, numeric) -> float:
    """``|a - n| / (|n| + 1e-8)`` with norms taken over the whole tensor."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.linalg.norm(a - n) / (np.linalg.norm(n) + 1e-8))


def _check_epsilon(epsilon):
    if not (0.0 < epsilon <= 1e-2):
        raise ValidationError(f"epsilon must lie in (0, 1e-2], got {epsilon}")


def finite_diff_check(
    net: Network,
    x,
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn(output) -> (loss, dloss/doutput)``. The error is computed per
    parameter tensor and the worst tensor is reported.
    """
    _check_epsilon(epsilon)
    out, cache = net.forward_cache(x)
    _, g_out = loss_fn(out)
    grads, _ = net.backward(cache, g_out)

    def f():
        return float(loss_fn(net.forward(x))[0])

    worst = 0.0
    for p, g in zip(net.params(), grads):
        worst = max(worst, relative_error(g, numeric_gradient(f, p, epsilon)))
    return worst


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=1e-4, **kw) -> "AdamState":
        return cls(
            lr=lr,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **kw,
        )


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update. Parameters are modified in place and returned.

    A non-finite gradient rejects the whole update (nothing is modified).
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state disagree in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient; update rejected")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# checkpoints
#
# b"CBDW" | u32 version | u32 total layers | u32 meta length | meta JSON |
# u32 network count | per network: u16 name length, name, u32 layer count,
# per layer: u32 out, u32 in, u8 tag length, tag, weight <f8[out*in], bias <f8[out]

MAGIC = b"CBDW"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, networks: dict[str, Network], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    total = sum(len(n.layers) for n in networks.values())
    parts = [MAGIC, struct.pack("<III", CHECKPOINT_VERSION, total, len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<I", len(networks)))
    for name, net in networks.items():
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<I", len(net.layers)))
        for layer in net.layers:
            out_dim, in_dim = layer.weight.shape
            tag = layer.activation.encode()
            parts.append(struct.pack("<IIB", out_dim, in_dim, len(tag)) + tag)
            parts.append(layer.weight.astype("<f8").tobytes())
            parts.append(layer.bias.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedFileError("checkpoint ended unexpectedly")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[dict[str, Network], dict]:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise FileFormatError("not a CBDW checkpoint (bad magic)")
    version, total, meta_len = r.unpack("<III")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    meta = json.loads(r.take(meta_len).decode())
    (count,) = r.unpack("<I")
    nets = {}
    seen = 0
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (n_layers,) = r.unpack("<I")
        layers = []
        for _ in range(n_layers):
            out_dim, in_dim, tag_len = r.unpack("<IIB")
            tag = r.take(tag_len).decode()
            w = np.frombuffer(r.take(8 * out_dim * in_dim), dtype="<f8").reshape(out_dim, in_dim)
            b = np.frombuffer(r.take(8 * out_dim), dtype="<f8")
            layers.append(Layer(w.astype(np.float64), b.astype(np.float64), tag))
        seen += n_layers
        nets[name] = Network(layers)
    if seen != total:
        raise FileFormatError(f"layer count mismatch: header {total}, found {seen}")
    if r.pos != len(r.data):
        raise FileFormatError("trailing bytes after checkpoint payload")
    return nets, meta
