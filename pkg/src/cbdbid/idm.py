"""Inverse dynamics: (last L+1 states, next state) -> bidding-parameter adjustment."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .aligner import fit
from .errors import ShapeError, ValidationError
from .nn import Network, load_checkpoint, save_checkpoint


def state_window(states, t: int, L: int) -> np.ndarray:
    """States s_{t-L..t}; positions before the episode start repeat s_0."""
    states = np.asarray(states, dtype=np.float64)
    if not 0 <= t < states.shape[0]:
        raise ValidationError(f"window end {t} outside the trajectory")
    idx = np.clip(np.arange(t - L, t + 1), 0, None)
    return states[idx]


def transition_pairs(states, actions, L: int = 3):
    """All (window, next state, action) triples of ground-truth trajectories.

    ``states`` (M, T+1, D), ``actions`` (M, T, A). Returns arrays of shape
    (M*T, L+1, D), (M*T, D), (M*T, A).
    """
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    M, N, D = states.shape
    T = N - 1
    if actions.shape[:2] != (M, T):
        raise ShapeError(f"actions {actions.shape} do not match states {states.shape}")
    t = np.arange(T)
    idx = np.clip(t[:, None] + np.arange(-L, 1)[None, :], 0, None)  # (T, L+1)
    windows = states[:, idx].reshape(M * T, L + 1, D)
    nexts = states[:, 1:].reshape(M * T, D)
    return windows, nexts, actions.reshape(M * T, -1)


class InverseDynamicsModel:
    def __init__(self, net: Network, L: int, state_dim: int):
        if net.input_dim != (L + 2) * state_dim:
            raise ShapeError("inverse dynamics net input does not match window length")
        self.net = net
        self.L = L
        self.state_dim = state_dim

    @property
    def action_dim(self) -> int:
        return self.net.output_dim

    @classmethod
    def create(cls, state_dim: int, action_dim: int = 1, L: int = 3, hidden: Sequence[int] = (128, 128),
               rng=None, activation="silu") -> "InverseDynamicsModel":
        if L < 0:
            raise ValidationError("window length L must be >= 0")
        rng = rng if rng is not None else np.random.default_rng(0)
        net = Network.create([(L + 2) * state_dim, *hidden, action_dim], rng, activation)
        return cls(net, L, state_dim)

    def _input(self, window, nxt):
        window = np.asarray(window, dtype=np.float64)
        nxt = np.asarray(nxt, dtype=np.float64)
        if window.shape[-2:] != (self.L + 1, self.state_dim):
            raise ShapeError(f"window must hold {self.L + 1} states of dim {self.state_dim}, got {window.shape}")
        if nxt.shape[-1] != self.state_dim or nxt.shape[:-1] != window.shape[:-2]:
            raise ShapeError(f"next state {nxt.shape} does not match window {window.shape}")
        lead = window.shape[:-2]
        return np.concatenate([window.reshape(lead + (-1,)), nxt], axis=-1)

    def predict(self, window, nxt) -> np.ndarray:
        return self.net.forward(self._input(window, nxt))

    def params(self):
        return self.net.params()


def predict_action(model: InverseDynamicsModel, window, planned_next) -> np.ndarray:
    return model.predict(window, planned_next)


def idm_loss(model: InverseDynamicsModel, windows, nexts, actions):
    """Mean over samples of the squared action error; returns ``(loss, grads)``."""
    actions = np.asarray(actions, dtype=np.float64)
    if actions.shape[0] == 0:
        raise ValidationError("empty batch")
    out, cache = model.net.forward_cache(model._input(windows, nexts))
    diff = out - actions.reshape(out.shape)
    n = diff.shape[0]
    loss = float(np.sum(diff * diff) / n)
    grads, _ = model.net.backward(cache, 2.0 * diff / n)
    return loss, grads


@dataclass
class IDMConfig:
    epochs: int = 30
    batch: int = 256
    accum_steps: int = 1
    lr: float = 1e-3
    hidden: tuple = (128, 128)
    L: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 1 or self.accum_steps < 1 or self.L < 0:
            raise ValidationError("epochs >= 0, batch >= 1, accum_steps >= 1, L >= 0 required")
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class TrainedIDM:
    model: InverseDynamicsModel
    config: IDMConfig
    losses: list = field(default_factory=list)

    def save(self, path):
        meta = {"kind": "idm", "L": self.model.L, "state_dim": self.model.state_dim,
                "config": asdict(self.config), "losses": self.losses}
        save_checkpoint(path, {"idm": self.model.net}, meta)

    @classmethod
    def load(cls, path) -> "TrainedIDM":
        nets, meta = load_checkpoint(path)
        if meta.get("kind") != "idm":
            raise ValidationError(f"{path} is not an inverse dynamics checkpoint")
        model = InverseDynamicsModel(nets["idm"], meta["L"], meta["state_dim"])
        return cls(model, IDMConfig(**meta["config"]), list(meta.get("losses", [])))


def train_idm(states, actions, config: IDMConfig = IDMConfig(), progress: Callable | None = None) -> TrainedIDM:
    """Fit f_phi on consecutive ground-truth transitions of normalised ``states`` (M, T+1, D)."""
    windows, nexts, acts = transition_pairs(states, actions, config.L)
    if acts.shape[0] == 0:
        raise ValidationError("no transitions to train on")
    rng = np.random.default_rng(config.seed)
    model = InverseDynamicsModel.create(windows.shape[2], acts.shape[1], config.L, config.hidden, rng)
    losses = fit(model.params(), lambda idx: idm_loss(model, windows[idx], nexts[idx], acts[idx]),
                 acts.shape[0], config, rng, progress, "inverse dynamics")
    return TrainedIDM(model, config, losses)
