"""Noise-network bodies. Both map ``(x: (B, N, D), g: (B, G))`` to ``(B, N, D)``
where ``g`` is a per-sample vector (step embedding, condition, drop flag)."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ShapeError, ValidationError
from .nn import Layer, Network, _activate, _activate_grad

BACKBONES = ("mlp", "temporal")


class MLPBody:
    """Plain feed-forward net over the flattened trajectory concatenated with ``g``."""

    kind = "mlp"

    def __init__(self, net: Network, horizon: int, state_dim: int, use_mask: bool = False):
        if net.input_dim <= horizon * state_dim or net.output_dim != horizon * state_dim:
            raise ShapeError("mlp body dims do not match horizon/state_dim")
        self.net = net
        self.horizon = horizon
        self.state_dim = state_dim
        self.use_mask = use_mask

    @classmethod
    def create(cls, horizon, state_dim, g_dim, hidden: Sequence[int], rng, activation="silu", use_mask=False):
        flat = horizon * state_dim + (horizon if use_mask else 0)
        net = Network.create([flat + g_dim, *hidden, horizon * state_dim], rng, activation)
        return cls(net, horizon, state_dim, use_mask)

    def _input(self, x, g, m):
        parts = [x.reshape(x.shape[0], -1)]
        if self.use_mask:
            parts.append(m)
        return np.concatenate(parts + [g], axis=1)

    def networks(self) -> dict:
        return {"eps": self.net}

    def params(self):
        return self.net.params()

    def forward(self, x, g, m):
        return self.net.forward(self._input(x, g, m)).reshape(x.shape)

    def forward_cache(self, x, g, m):
        out, cache = self.net.forward_cache(self._input(x, g, m))
        return out.reshape(x.shape), cache

    def backward(self, cache, grad_out):
        grads, g_in = self.net.backward(cache, grad_out.reshape(grad_out.shape[0], -1))
        lo = self.horizon * (self.state_dim + int(self.use_mask))
        return grads, g_in[:, lo:]


# ---------------------------------------------------------------------------
# temporal convolutions


def _im2col(x, k):
    """(B, N, C) -> (B*N, k*C) windows centred on each position, zero padded."""
    B, N, C = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, k - 1 - p), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)  # (B, N, C, k)
    return win.transpose(0, 1, 3, 2).reshape(B * N, k * C)


def _col2im(cols, B, N, C, k):
    p = k // 2
    cols = cols.reshape(B, N, k, C)
    xp = np.zeros((B, N + k - 1, C))
    for j in range(k):
        xp[:, j : j + N] += cols[:, :, j]
    return xp[:, p : p + N]


class Conv1d:
    """Same-length 1-D convolution over the time axis; weight is (out, k*in)."""

    def __init__(self, layer: Layer, kernel: int):
        if layer.weight.shape[1] % kernel:
            raise ShapeError("conv weight width is not a multiple of the kernel size")
        self.layer = layer
        self.kernel = kernel

    @property
    def in_channels(self) -> int:
        return self.layer.weight.shape[1] // self.kernel

    @classmethod
    def create(cls, c_in, c_out, kernel, rng, activation="identity", scale=1.0):
        bound = scale / np.sqrt(c_in * kernel)
        w = rng.uniform(-bound, bound, size=(c_out, c_in * kernel))
        b = rng.uniform(-bound, bound, size=c_out) if scale else np.zeros(c_out)
        return cls(Layer(w, b, activation), kernel)

    def forward_cache(self, x):
        B, N, C = x.shape
        if C != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} channels, got {C}")
        cols = _im2col(x, self.kernel)
        z = cols @ self.layer.weight.T + self.layer.bias
        out = _activate(z, self.layer.activation).reshape(B, N, -1)
        return out, (cols, z, x.shape)

    def backward(self, cache, g):
        cols, z, (B, N, C) = cache
        g = g.reshape(B * N, -1)
        if self.layer.activation != "identity":
            g = g * _activate_grad(z, self.layer.activation)
        dW = g.T @ cols
        db = g.sum(axis=0)
        dx = _col2im(g @ self.layer.weight, B, N, C, self.kernel)
        return [dW, db], dx


def position_embedding(N: int, dim: int = 8) -> np.ndarray:
    pos = np.arange(N, dtype=np.float64)
    half = dim // 2
    freqs = 1.0 / (N ** (np.arange(half) / half))
    ang = pos[:, None] * freqs[None, :] * np.pi / 2
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class TemporalBody:
    """Residual temporal conv stack.

    in-conv over ``[x, g broadcast, position code]`` then ``blocks`` residual
    units ``h + conv(silu(conv(h + E_b g)))`` (each block also sees the
    per-sample vector through its own linear map ``E_b``) and a 1x1 output conv.
    """

    kind = "temporal"

    def __init__(self, convs: list[Conv1d], horizon: int, state_dim: int, pos_dim: int = 8, use_mask: bool = False,
                 embeds: list[Layer] | None = None):
        if len(convs) < 2 or (len(convs) - 2) % 2:
            raise ValidationError("temporal body needs in-conv, pairs of block convs and an out-conv")
        self.convs = convs
        self.embeds = list(embeds or [])
        if self.embeds and len(self.embeds) != (len(convs) - 2) // 2:
            raise ValidationError("need one block embedding per residual block")
        self.horizon = horizon
        self.state_dim = state_dim
        self.pos = position_embedding(horizon, pos_dim)
        self.use_mask = use_mask
        if convs[-1].layer.weight.shape[0] != state_dim:
            raise ShapeError("output conv does not produce state_dim channels")

    @classmethod
    def create(cls, horizon, state_dim, g_dim, channels=64, blocks=2, kernel=5, rng=None,
               pos_dim=8, activation="silu", use_mask=False):
        c_in = state_dim + int(use_mask) + g_dim + pos_dim
        convs = [Conv1d.create(c_in, channels, kernel, rng, activation)]
        embeds = []
        for _ in range(blocks):
            convs.append(Conv1d.create(channels, channels, kernel, rng, activation))
            # second conv of a block starts small so each block is close to identity
            convs.append(Conv1d.create(channels, channels, kernel, rng, "identity", scale=0.1))
            embeds.append(Network.create([g_dim, channels], rng).layers[0])
        convs.append(Conv1d.create(channels, state_dim, 1, rng, "identity"))
        return cls(convs, horizon, state_dim, pos_dim, use_mask, embeds)

    @property
    def blocks(self) -> int:
        return (len(self.convs) - 2) // 2

    def networks(self) -> dict:
        nets = {f"conv{i}": Network([c.layer]) for i, c in enumerate(self.convs)}
        nets.update({f"embed{i}": Network([e]) for i, e in enumerate(self.embeds)})
        return nets

    @classmethod
    def from_networks(cls, nets: dict, kernels: Sequence[int], horizon, state_dim, pos_dim=8, use_mask=False):
        convs = [Conv1d(nets[f"conv{i}"].layers[0], k) for i, k in enumerate(kernels)]
        embeds = [nets[f"embed{i}"].layers[0] for i in range((len(convs) - 2) // 2) if f"embed{i}" in nets]
        return cls(convs, horizon, state_dim, pos_dim, use_mask, embeds)

    @property
    def kernels(self) -> list[int]:
        return [c.kernel for c in self.convs]

    def params(self):
        out = []
        for c in self.convs:
            out.extend((c.layer.weight, c.layer.bias))
        for e in self.embeds:
            out.extend((e.weight, e.bias))
        return out

    def _input(self, x, g, m):
        B, N, _ = x.shape
        parts = [x]
        if self.use_mask:
            parts.append(m[:, :, None])
        parts += [np.broadcast_to(g[:, None, :], (B, N, g.shape[1])), np.broadcast_to(self.pos, (B, N, self.pos.shape[1]))]
        return np.concatenate(parts, axis=2)

    def forward(self, x, g, m):
        return self.forward_cache(x, g, m)[0]

    def forward_cache(self, x, g, m):
        caches = []
        h, c = self.convs[0].forward_cache(self._input(x, g, m))
        caches.append(c)
        for b in range(self.blocks):
            hin = h + (g @ self.embeds[b].weight.T + self.embeds[b].bias)[:, None, :] if self.embeds else h
            a, c1 = self.convs[1 + 2 * b].forward_cache(hin)
            r, c2 = self.convs[2 + 2 * b].forward_cache(a)
            caches.extend((c1, c2))
            h = h + r
        out, c = self.convs[-1].forward_cache(h)
        caches.append(c)
        return out, (caches, g)

    def backward(self, cache, grad_out):
        caches, g = cache
        grads = [None] * len(self.convs)
        egrads = [None] * len(self.embeds)
        g_glob = np.zeros_like(g)
        grads[-1], gh = self.convs[-1].backward(caches[-1], grad_out)
        for b in range(self.blocks - 1, -1, -1):
            i1, i2 = 1 + 2 * b, 2 + 2 * b
            grads[i2], ga = self.convs[i2].backward(caches[i2], gh)
            grads[i1], gr = self.convs[i1].backward(caches[i1], ga)
            if self.embeds:
                ge = gr.sum(axis=1)  # (B, channels)
                egrads[b] = [ge.T @ g, ge.sum(axis=0)]
                g_glob += ge @ self.embeds[b].weight
            gh = gh + gr
        grads[0], gin = self.convs[0].backward(caches[0], gh)
        flat = [a for pair in grads + egrads for a in pair]
        lo = self.state_dim + int(self.use_mask)
        return flat, g_glob + gin[:, :, lo : gin.shape[2] - self.pos.shape[1]].sum(axis=1)
