"""Diffusion completer: noise schedule, query splicing, guided denoising,
masked completion training and trajectory generation.

Arrays are batch-first ``(B, N, D)`` with ``N = T + 1`` states. A query of
length ``t + 1`` pins positions ``0..t``; the model only has to produce
positions ``t+1..T``. ``mask_mode="vanilla"`` trains on whole trajectories
with no pinning, the plain decision-diffuser objective.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import GenerationError, NumericError, ShapeError, ValidationError
from .backbone import BACKBONES, MLPBody, TemporalBody
from .nn import AdamState, Network, adam_step, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

SIGMA_MODES = ("variance", "literal", "posterior")
MASK_MODES = ("completion", "vanilla")


@dataclass
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray
    sigma_mode: str = "variance"

    @property
    def K(self) -> int:
        return self.betas.shape[0]

    def check_k(self, k):
        k = np.asarray(k)
        if np.any(k < 1) or np.any(k > self.K):
            raise ValidationError(f"diffusion step outside [1, {self.K}]: {k}")
        return k


def build_schedule(K: int = 100, beta_start: float = 1e-4, beta_end: float = 0.2,
                   sigma_mode: str = "variance") -> NoiseSchedule:
    """Linear beta schedule. ``sigma_mode="variance"``: sigma_k^2 = 1 - alpha_k;
    ``"literal"``: sigma_k = 1 - alpha_k; ``"posterior"``: the DDPM posterior
    variance beta_k (1 - abar_{k-1}) / (1 - abar_k)."""
    if K < 1:
        raise ValidationError("K must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValidationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if sigma_mode not in SIGMA_MODES:
        raise ValidationError(f"sigma_mode must be one of {SIGMA_MODES}")
    betas = np.linspace(beta_start, beta_end, K)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if sigma_mode == "variance":
        sigmas = np.sqrt(betas)
    elif sigma_mode == "literal":
        sigmas = betas.copy()
    else:
        prev = np.concatenate(([1.0], alpha_bars[:-1]))
        sigmas = np.sqrt(betas * (1.0 - prev) / (1.0 - alpha_bars))
    return NoiseSchedule(betas, alphas, alpha_bars, sigmas, sigma_mode)


def _per_sample(v, k, ndim):
    """Schedule value(s) for step(s) ``k`` shaped to broadcast over ``ndim``-d arrays."""
    out = v[np.asarray(k) - 1]
    return out.reshape(out.shape + (1,) * (ndim - out.ndim)) if out.ndim else out


def forward_noise(x0, k, eps, schedule: NoiseSchedule):
    """x_k = sqrt(abar_k) x0 + sqrt(1 - abar_k) eps; ``k`` scalar or one per sample."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {x0.shape} and noise {eps.shape} differ")
    k = schedule.check_k(k)
    ab = _per_sample(schedule.alpha_bars, k, x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def prefix_mask(t, N) -> np.ndarray:
    """(B, N) boolean, True at pinned positions ``0..t`` of each sample."""
    t = np.atleast_1d(np.asarray(t))
    return np.arange(N)[None, :] <= t[:, None]


def splice(x_noisy, x_ref, t):
    """Batch query construction: positions ``<= t[b]`` from ``x_ref``, the rest from ``x_noisy``."""
    pin = prefix_mask(t, x_noisy.shape[1])[:, :, None]
    return np.where(pin, x_ref, x_noisy)


def build_query_input(x_noisy, observed, t: int):
    """Single trajectory: observed states ``s_0..s_t`` verbatim, noise after."""
    x_noisy = np.asarray(x_noisy, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    N = x_noisy.shape[0]
    if not 0 <= t <= N - 2:
        raise ValidationError(f"query length t={t} outside [0, {N - 2}]")
    if observed.shape != (t + 1, x_noisy.shape[1]):
        raise ShapeError(f"expected {t + 1} observed states of dim {x_noisy.shape[1]}, got {observed.shape}")
    out = x_noisy.copy()
    out[: t + 1] = observed
    return out


def sinusoidal_embedding(k, dim: int = 32) -> np.ndarray:
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = k[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class NoisePredictor:
    """epsilon_theta over the noisy trajectory, step embedding and (droppable) condition.

    The condition passes through a small projection network; a dropped
    condition contributes zeros plus a set drop flag. Output is
    ``skip_k * x + body(x, g)`` with the fixed coefficient ``skip_k =
    sqrt(1 - abar_k)`` (E[eps | x_k] for unit-variance data), so the body only
    learns a correction.
    """

    def __init__(self, body, cond_net: Network, k_dim: int = 32, skip=None):
        self.body = body
        self.cond_net = cond_net
        self.k_dim = k_dim
        self.skip = None if skip is None else np.asarray(skip, dtype=np.float64)
        self.horizon = body.horizon
        self.state_dim = body.state_dim

    @property
    def cond_dim(self) -> int:
        return self.cond_net.output_dim

    @property
    def g_dim(self) -> int:
        return self.k_dim + self.cond_dim + 1

    @classmethod
    def create(cls, horizon: int, state_dim: int, rng: np.random.Generator, backbone: str = "mlp",
               hidden: Sequence[int] = (256, 256), channels: int = 64, blocks: int = 2, kernel: int = 5,
               k_dim: int = 32, cond_dim: int = 16, activation: str = "silu", skip=None,
               query_mask: bool = False) -> "NoisePredictor":
        cond = Network.create([1, cond_dim, cond_dim], rng, activation)
        g_dim = k_dim + cond_dim + 1
        if backbone == "mlp":
            body = MLPBody.create(horizon, state_dim, g_dim, hidden, rng, activation, query_mask)
        elif backbone == "temporal":
            body = TemporalBody.create(horizon, state_dim, g_dim, channels, blocks, kernel, rng,
                                       activation=activation, use_mask=query_mask)
        else:
            raise ValidationError(f"backbone must be one of {BACKBONES}")
        return cls(body, cond, k_dim, skip)

    def networks(self) -> dict:
        return {"cond": self.cond_net, **self.body.networks()}

    def params(self) -> list[np.ndarray]:
        return self.cond_net.params() + self.body.params()

    @property
    def query_mask(self) -> bool:
        return self.body.use_mask

    def _mask(self, pin, B):
        if pin is None:
            return np.zeros((B, self.horizon))
        return np.asarray(pin, dtype=np.float64).reshape(B, self.horizon)

    def _inputs(self, x, k, y, drop):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[1:] != (self.horizon, self.state_dim):
            raise ShapeError(f"expected (B, {self.horizon}, {self.state_dim}), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValidationError("non-finite predictor input")
        B = x.shape[0]
        kk = np.broadcast_to(np.asarray(k), (B,))
        yy = np.broadcast_to(np.asarray(y, dtype=np.float64), (B,))
        keep = 1.0 - np.broadcast_to(np.asarray(drop, dtype=np.float64), (B,))
        return x, kk, yy, keep

    def _glob(self, kk, c, keep):
        return np.concatenate([sinusoidal_embedding(kk, self.k_dim), c * keep[:, None], (1.0 - keep)[:, None]], axis=1)

    def _skip(self, x, kk):
        if self.skip is None:
            return 0.0
        return self.skip[kk - 1][:, None, None] * x

    def predict(self, x, k, y, drop=False, pin=None):
        """Predicted noise, shape of ``x``. ``drop`` selects the unconditional branch;
        ``pin`` (B, N) flags query positions for models built with a query mask."""
        x, kk, yy, keep = self._inputs(x, k, y, drop)
        c = self.cond_net.forward(yy[:, None])
        return self.body.forward(x, self._glob(kk, c, keep), self._mask(pin, x.shape[0])) + self._skip(x, kk)

    def forward_cache(self, x, k, y, drop, pin=None):
        x, kk, yy, keep = self._inputs(x, k, y, drop)
        c, ccache = self.cond_net.forward_cache(yy[:, None])
        out, bcache = self.body.forward_cache(x, self._glob(kk, c, keep), self._mask(pin, x.shape[0]))
        return out + self._skip(x, kk), (ccache, bcache, keep)

    def backward(self, cache, grad_out):
        """Parameter gradients (ordered like :meth:`params`) of ``sum(grad_out * eps_hat)``."""
        ccache, bcache, keep = cache
        g_body, g_glob = self.body.backward(bcache, grad_out)
        g_c = g_glob[:, self.k_dim : self.k_dim + self.cond_dim] * keep[:, None]
        g_cond, _ = self.cond_net.backward(ccache, g_c)
        return g_cond + g_body

    def meta(self) -> dict:
        d = {"horizon": self.horizon, "state_dim": self.state_dim, "k_dim": self.k_dim, "backbone": self.body.kind,
             "query_mask": self.query_mask}
        if self.body.kind == "temporal":
            d["kernels"] = self.body.kernels
        return d

    @classmethod
    def from_networks(cls, nets: dict, meta: dict, skip=None) -> "NoisePredictor":
        if meta["backbone"] == "temporal":
            body = TemporalBody.from_networks(nets, meta["kernels"], meta["horizon"], meta["state_dim"],
                                              use_mask=meta.get("query_mask", False))
        else:
            body = MLPBody(nets["eps"], meta["horizon"], meta["state_dim"], meta.get("query_mask", False))
        return cls(body, nets["cond"], meta["k_dim"], skip)


def skip_coefficients(schedule: NoiseSchedule) -> np.ndarray:
    return np.sqrt(1.0 - schedule.alpha_bars)


def guided_epsilon(predictor: NoisePredictor, x, k, y, omega: float, pin=None):
    """eps_uncond + omega * (eps_cond - eps_uncond). omega in {0, 1} evaluates one branch only."""
    if omega == 1.0:
        return predictor.predict(x, k, y, drop=False, pin=pin)
    if omega == 0.0:
        return predictor.predict(x, k, y, drop=True, pin=pin)
    uncond = predictor.predict(x, k, y, drop=True, pin=pin)
    cond = predictor.predict(x, k, y, drop=False, pin=pin)
    return uncond + omega * (cond - uncond)


def denoise_step(x, k, eps_hat, schedule: NoiseSchedule, z=None):
    """One reverse step: mu + sigma_k z, with z forced to 0 at k = 1."""
    k = schedule.check_k(k)
    x = np.asarray(x, dtype=np.float64)
    a = _per_sample(schedule.alphas, k, x.ndim)
    ab = _per_sample(schedule.alpha_bars, k, x.ndim)
    mu = (x - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
    if z is None:
        return mu
    sig = _per_sample(schedule.sigmas, k, x.ndim) * (k > 1).reshape(np.shape(k) + (1,) * (x.ndim - np.ndim(k)))
    return mu + sig * z


def _normal(rng, shape):
    """Standard normals; ``rng`` may be a list with one generator per leading index."""
    if isinstance(rng, (list, tuple)):
        if len(rng) != shape[0]:
            raise ValidationError("need one generator per sample")
        return np.stack([r.standard_normal(shape[1:]) for r in rng])
    return rng.standard_normal(shape)


def generate_batch(predictor: NoisePredictor, schedule: NoiseSchedule, x_ref, t, y, omega: float,
                   rng, callback: Callable | None = None, show_mask: bool = True):
    """Complete a batch of queries. ``x_ref[b, :t[b]+1]`` are the observed states.

    After every reverse step the query positions are re-pinned, so the output
    equals ``x_ref`` there bit for bit. ``callback(k, x)`` sees each
    intermediate. ``show_mask=False`` hides the query positions from a
    mask-aware predictor (models trained without pinning never saw one).
    """
    x_ref = np.asarray(x_ref, dtype=np.float64)
    B, N, D = x_ref.shape
    t = np.broadcast_to(np.asarray(t), (B,))
    if np.any(t < 0) or np.any(t > N - 2):
        raise ValidationError(f"query length outside [0, {N - 2}]")
    pin = prefix_mask(t, N)[:, :, None]
    shown = pin[:, :, 0] if show_mask else None
    x = np.where(pin, x_ref, _normal(rng, (B, N, D)))
    for k in range(schedule.K, 0, -1):
        eps_hat = guided_epsilon(predictor, x, k, y, omega, shown)
        z = _normal(rng, (B, N, D)) if k > 1 else None
        x = denoise_step(x, k, eps_hat, schedule, z)
        x = np.where(pin, x_ref, x)
        if not np.all(np.isfinite(x)):
            raise GenerationError(f"non-finite values at reverse step k={k}", step=k)
        if callback is not None:
            callback(k, x)
    return x


def generate(predictor: NoisePredictor, schedule: NoiseSchedule, observed, y, omega: float, rng,
             callback: Callable | None = None):
    """Complete one trajectory from its observed prefix ``s_0..s_t`` (shape (t+1, D))."""
    observed = np.asarray(observed, dtype=np.float64)
    t = observed.shape[0] - 1
    ref = np.zeros((1, predictor.horizon, predictor.state_dim))
    ref[0, : t + 1] = observed
    return generate_batch(predictor, schedule, ref, t, y, omega, rng, callback)[0]


# ---------------------------------------------------------------------------
# training


def masked_loss(predictor: NoisePredictor, x0, y, k, t, eps, drop, schedule: NoiseSchedule,
                mode: str = "completion", need_grad: bool = True):
    """Completion loss for explicit draws; returns ``(loss, grads)``.

    completion: splice the clean prefix into x_k and average squared error
    over positions ``t+1..T`` only. vanilla: no splice, every position counts.
    """
    if mode not in MASK_MODES:
        raise ValidationError(f"mask mode must be one of {MASK_MODES}")
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[0] == 0:
        raise ValidationError("empty batch")
    xk = forward_noise(x0, k, eps, schedule)
    pin = None
    if mode == "completion":
        xk = splice(xk, x0, t)
        pin = prefix_mask(t, x0.shape[1])
        w = np.broadcast_to(~pin[:, :, None], x0.shape).astype(np.float64)
    else:
        w = np.ones_like(x0)
    if need_grad:
        pred, cache = predictor.forward_cache(xk, k, y, drop, pin)
    else:
        pred = predictor.predict(xk, k, y, drop, pin)
    diff = pred - eps
    count = w.sum()
    loss = float(np.sum(diff * diff * w) / count)
    if not need_grad:
        return loss, None
    grads = predictor.backward(cache, 2.0 * diff * w / count)
    return loss, grads


def draw_batch(rng: np.random.Generator, B: int, N: int, D: int, K: int, p_drop: float):
    k = rng.integers(1, K + 1, size=B)
    t = rng.integers(0, N - 1, size=B)
    eps = rng.standard_normal((B, N, D))
    drop = rng.random(B) < p_drop
    return k, t, eps, drop


def completion_loss(predictor: NoisePredictor, x0, y, schedule: NoiseSchedule, rng,
                    p_drop: float = 0.1, mode: str = "completion"):
    """Sample k ~ U{1..K}, t ~ U{0..T-1}, eps ~ N(0, I), condition drops; return loss and grads."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[0] == 0:
        raise ValidationError("empty batch")
    B, N, D = x0.shape
    k, t, eps, drop = draw_batch(rng, B, N, D, schedule.K, p_drop)
    return masked_loss(predictor, x0, y, k, t, eps, drop, schedule, mode)


@dataclass
class CompleterConfig:
    epochs: int = 200
    batch: int = 128
    accum_steps: int = 1
    lr: float = 1e-3
    lr_final: float | None = 1e-5  # cosine decay to this value; None keeps lr fixed
    p_drop: float = 0.1
    mask_mode: str = "completion"
    backbone: str = "temporal"
    hidden: tuple = (256, 256)
    channels: int = 64
    blocks: int = 2
    kernel: int = 5
    query_mask: bool = True
    K: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.2
    sigma_mode: str = "literal"
    ema_decay: float = 0.995  # 0 disables weight averaging
    seed: int = 0

    def __post_init__(self):
        if self.mask_mode not in MASK_MODES:
            raise ValidationError(f"mask_mode must be one of {MASK_MODES}")
        if self.epochs < 0 or self.batch < 1 or self.accum_steps < 1:
            raise ValidationError("epochs >= 0, batch >= 1, accum_steps >= 1 required")
        if self.backbone not in BACKBONES:
            raise ValidationError(f"backbone must be one of {BACKBONES}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValidationError("ema_decay must lie in [0, 1)")
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class Completer:
    predictor: NoisePredictor
    schedule: NoiseSchedule
    config: CompleterConfig
    losses: list = field(default_factory=list)

    def generate(self, x_ref, t, y, omega=1.0, rng=None, callback=None):
        return generate_batch(self.predictor, self.schedule, x_ref, t, y, omega, rng, callback,
                              show_mask=self.config.mask_mode == "completion")

    def save(self, path):
        meta = {"kind": "completer", "config": asdict(self.config), "predictor": self.predictor.meta(),
                "losses": self.losses}
        save_checkpoint(path, self.predictor.networks(), meta)

    @classmethod
    def load(cls, path) -> "Completer":
        nets, meta = load_checkpoint(path)
        if meta.get("kind") != "completer":
            raise ValidationError(f"{path} is not a completer checkpoint")
        cfg = CompleterConfig(**meta["config"])
        sched = build_schedule(cfg.K, cfg.beta_start, cfg.beta_end, cfg.sigma_mode)
        pred = NoisePredictor.from_networks(nets, meta["predictor"], skip_coefficients(sched))
        return cls(pred, sched, cfg, list(meta.get("losses", [])))


def iterate_minibatches(rng, n, batch):
    order = rng.permutation(n)
    for i in range(0, n, batch):
        yield order[i : i + batch]


def train_completer(x0, y, config: CompleterConfig, progress: Callable | None = None) -> Completer:
    """Fit the noise predictor on normalised trajectories ``x0`` (M, N, D) with conditions ``y``.

    Gradients of ``accum_steps`` consecutive minibatches are averaged per
    Adam update. Returns the model with its per-epoch mean loss curve.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x0.ndim != 3 or x0.shape[0] == 0 or y.shape != (x0.shape[0],):
        raise ShapeError(f"need x0 (M, N, D) and y (M,), got {x0.shape}, {y.shape}")
    rng = np.random.default_rng(config.seed)
    M, N, D = x0.shape
    sched = build_schedule(config.K, config.beta_start, config.beta_end, config.sigma_mode)
    pred = NoisePredictor.create(N, D, rng, config.backbone, config.hidden, config.channels, config.blocks,
                                 config.kernel, skip=skip_coefficients(sched), query_mask=config.query_mask)
    params = pred.params()
    opt = AdamState.for_params(params, lr=config.lr)
    ema = [p.copy() for p in params] if config.ema_decay > 0 else None
    total_updates = config.epochs * (-(-M // config.batch)) // config.accum_steps
    losses = []
    acc, n_acc = None, 0
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for idx in iterate_minibatches(rng, M, config.batch):
            loss, grads = completion_loss(pred, x0[idx], y[idx], sched, rng, config.p_drop, config.mask_mode)
            if not np.isfinite(loss):
                raise NumericError(f"completer loss diverged at epoch {epoch} (loss={loss})")
            total += loss * len(idx)
            count += len(idx)
            acc = grads if acc is None else [a + g for a, g in zip(acc, grads)]
            n_acc += 1
            if n_acc == config.accum_steps:
                if config.lr_final is not None:
                    frac = min(opt.step / max(total_updates - 1, 1), 1.0)
                    opt.lr = config.lr_final + 0.5 * (config.lr - config.lr_final) * (1 + np.cos(np.pi * frac))
                adam_step(params, [a / n_acc for a in acc], opt)
                acc, n_acc = None, 0
                if ema is not None:
                    for e, p in zip(ema, params):
                        e *= config.ema_decay
                        e += (1.0 - config.ema_decay) * p
        losses.append(total / count)
        if progress is not None:
            progress(epoch, losses[-1])
    if ema is not None:
        for e, p in zip(ema, params):
            p[...] = e
    return Completer(pred, sched, config, losses)
