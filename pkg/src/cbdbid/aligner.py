"""Trajectory-level property model and inference-time suffix refinement."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffusion import iterate_minibatches, prefix_mask
from .errors import NumericError, ShapeError, ValidationError
from .nn import AdamState, Network, adam_step, load_checkpoint, save_checkpoint
from .trajectory import PropertyFunctional

log = logging.getLogger(__name__)


class ReturnModel:
    """R_phi: flattened (N, D) trajectory -> scalar property estimate.

    The network works in standardised units ``z = (y - shift) / scale``;
    :meth:`predict` maps back. Losses and refinement gradients are taken in
    z units so properties with tiny raw spread still give usable steps.
    """

    def __init__(self, net: Network, horizon: int, state_dim: int, tag: str = "return", shift: float = 0.0,
                 scale: float = 1.0):
        if net.input_dim != horizon * state_dim or net.output_dim != 1:
            raise ShapeError("return network dims do not match horizon/state_dim")
        if not (np.isfinite(shift) and np.isfinite(scale) and scale > 0):
            raise ValidationError("target scale must be positive and finite")
        PropertyFunctional(tag)
        self.net = net
        self.horizon = horizon
        self.state_dim = state_dim
        self.tag = tag
        self.shift = float(shift)
        self.scale = float(scale)

    def to_z(self, y):
        return (np.asarray(y, dtype=np.float64) - self.shift) / self.scale

    @classmethod
    def create(cls, horizon, state_dim, hidden: Sequence[int] = (128, 128), rng=None, tag="return",
               activation="silu") -> "ReturnModel":
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(Network.create([horizon * state_dim, *hidden, 1], rng, activation), horizon, state_dim, tag)

    def _flat(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[1:] != (self.horizon, self.state_dim):
            raise ShapeError(f"expected (B, {self.horizon}, {self.state_dim}), got {x.shape}")
        return x.reshape(x.shape[0], -1)

    def predict(self, x) -> np.ndarray:
        return self.net.forward(self._flat(x))[:, 0] * self.scale + self.shift

    def forward_cache(self, x):
        """Standardised output and cache."""
        out, cache = self.net.forward_cache(self._flat(x))
        return out[:, 0], cache

    def backward(self, cache, grad_out):
        """``(param_grads, grad_x)`` for upstream gradient ``grad_out`` of shape (B,)."""
        grads, gx = self.net.backward(cache, np.asarray(grad_out, dtype=np.float64)[:, None])
        return grads, gx.reshape(-1, self.horizon, self.state_dim)

    def params(self):
        return self.net.params()


def return_loss(model: ReturnModel, x0, y):
    """Mean squared error of R_phi(x0) against y in standardised units; returns ``(loss, grads)``."""
    x0 = np.asarray(x0, dtype=np.float64)
    y = model.to_z(y)
    if x0.shape[0] == 0:
        raise ValidationError("empty batch")
    pred, cache = model.forward_cache(x0)
    diff = pred - y
    loss = float(np.mean(diff * diff))
    grads, _ = model.backward(cache, 2.0 * diff / diff.shape[0])
    return loss, grads


@dataclass(frozen=True)
class RefinementConfig:
    step: float = 0.1  # lambda
    rounds: int = 1

    def __post_init__(self):
        if not np.isfinite(self.step) or self.step < 0:
            raise ValidationError("refinement step must be finite and >= 0")
        if self.rounds < 1:
            raise ValidationError("refinement rounds must be >= 1")


def alignment_error(model: ReturnModel, x, y) -> np.ndarray:
    """Per-sample (R_phi(x) - y)^2, in standardised units."""
    return ((model.predict(x) - np.asarray(y, dtype=np.float64)) / model.scale) ** 2


def suffix_gradient(model: ReturnModel, x, t, y) -> np.ndarray:
    """Gradient of (R_phi(x) - y)^2 w.r.t. x, zeroed at positions 0..t."""
    pred, cache = model.forward_cache(x)
    _, gx = model.backward(cache, 2.0 * (pred - model.to_z(y)))
    keep = ~prefix_mask(np.broadcast_to(t, (x.shape[0],)), x.shape[1])
    return gx * keep[:, :, None]


def refine(model: ReturnModel, x, t, y, cfg: RefinementConfig = RefinementConfig()):
    """x[t+1:] <- x[t+1:] - step * grad (R_phi(x) - y)^2, ``cfg.rounds`` times.

    Accepts one trajectory (N, D) or a batch (B, N, D) with per-sample ``t``
    and ``y``. Samples whose gradient is not finite are returned unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    xb = x[None] if single else x
    B, N, _ = xb.shape
    t = np.broadcast_to(np.asarray(t), (B,))
    if np.any(t < 0) or np.any(t > N - 2):
        raise ValidationError(f"query length outside [0, {N - 2}]")
    if cfg.step == 0.0:
        return x.copy()
    out = xb.copy()
    for _ in range(cfg.rounds):
        g = suffix_gradient(model, out, t, y)
        bad = ~np.all(np.isfinite(g), axis=(1, 2))
        if bad.any():
            log.warning("refinement skipped for %d sample(s): non-finite gradient", int(bad.sum()))
            g[bad] = 0.0
        out = out - cfg.step * g
    return out[0] if single else out


def gs_align(model: ReturnModel, candidates, y):
    """Pick the candidate minimising (R_phi - y)^2; ties go to the lowest index.

    Returns ``(index, trajectory)``.
    """
    cands = np.asarray(candidates, dtype=np.float64)
    if cands.ndim != 3 or cands.shape[0] == 0:
        raise ValidationError("gs_align needs a non-empty (C, N, D) candidate stack")
    err = alignment_error(model, cands, y)
    i = int(np.argmin(err))  # argmin returns the first minimum
    return i, cands[i]


@dataclass
class AlignerConfig:
    epochs: int = 200
    batch: int = 128
    accum_steps: int = 1
    lr: float = 1e-3
    hidden: tuple = (128, 128)
    tag: str = "return"
    standardize: bool | None = None  # None: standardise targets for every tag except return
    seed: int = 0

    def __post_init__(self):
        PropertyFunctional(self.tag)
        if self.epochs < 0 or self.batch < 1 or self.accum_steps < 1:
            raise ValidationError("epochs >= 0, batch >= 1, accum_steps >= 1 required")
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class Aligner:
    model: ReturnModel
    config: AlignerConfig
    losses: list = field(default_factory=list)

    def save(self, path):
        meta = {"kind": "aligner", "tag": self.model.tag, "config": asdict(self.config),
                "shift": self.model.shift, "scale": self.model.scale,
                "horizon": self.model.horizon, "state_dim": self.model.state_dim, "losses": self.losses}
        save_checkpoint(path, {"return": self.model.net}, meta)

    @classmethod
    def load(cls, path) -> "Aligner":
        nets, meta = load_checkpoint(path)
        if meta.get("kind") != "aligner":
            raise ValidationError(f"{path} is not an aligner checkpoint")
        model = ReturnModel(nets["return"], meta["horizon"], meta["state_dim"], meta["tag"],
                            meta.get("shift", 0.0), meta.get("scale", 1.0))
        return cls(model, AlignerConfig(**meta["config"]), list(meta.get("losses", [])))


def fit(params, loss_fn, n, config, rng, progress=None, what="model"):
    """Minibatch Adam loop shared by the regression models."""
    opt = AdamState.for_params(params, lr=config.lr)
    losses = []
    acc, n_acc = None, 0
    for epoch in range(config.epochs):
        total = 0.0
        for idx in iterate_minibatches(rng, n, config.batch):
            loss, grads = loss_fn(idx)
            if not np.isfinite(loss):
                raise NumericError(f"{what} loss diverged at epoch {epoch} (loss={loss})")
            total += loss * len(idx)
            acc = grads if acc is None else [a + g for a, g in zip(acc, grads)]
            n_acc += 1
            if n_acc == config.accum_steps:
                adam_step(params, [a / n_acc for a in acc], opt)
                acc, n_acc = None, 0
        losses.append(total / n)
        if progress is not None:
            progress(epoch, losses[-1])
    return losses


def train_aligner(x0, y, config: AlignerConfig = AlignerConfig(), progress: Callable | None = None) -> Aligner:
    """Regress R_phi on normalised trajectories ``x0`` (M, N, D) against conditions ``y``."""
    x0 = np.asarray(x0, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x0.ndim != 3 or x0.shape[0] == 0 or y.shape != (x0.shape[0],):
        raise ShapeError(f"need x0 (M, N, D) and y (M,), got {x0.shape}, {y.shape}")
    rng = np.random.default_rng(config.seed)
    model = ReturnModel.create(x0.shape[1], x0.shape[2], config.hidden, rng, config.tag)
    standardize = config.tag != "return" if config.standardize is None else config.standardize
    if standardize:
        model.shift, model.scale = float(y.mean()), max(float(y.std()), 1e-12)
    losses = fit(model.params(), lambda idx: return_loss(model, x0[idx], y[idx]), x0.shape[0], config, rng,
                 progress, "aligner")
    return Aligner(model, config, losses)
