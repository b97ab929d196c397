"""Planning agent: complete the future from the realised prefix, align it,
decode an action with inverse dynamics, bid for one interval, repeat."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .aligner import Aligner, RefinementConfig, ReturnModel, alignment_error, refine
from .auction import AuctionEpisode
from .bidding import BiddingParams, apply_action
from .datagen import pacing_prior
from .diffusion import Completer
from .errors import ShapeError, ValidationError
from .idm import InverseDynamicsModel, TrainedIDM, state_window
from .metrics import episode_metrics
from .trajectory import NormStats, Trajectory, apply_stats, denormalize_states

ALIGN_MODES = ("none", "gradient", "gs_align")
MANIFEST = "manifest.json"


@dataclass
class InferenceConfig:
    omega: float = 1.0
    step: float = 0.1  # refinement lambda
    rounds: int = 1
    target: float = 1.0  # condition y fed to the completer and the aligner
    align_mode: str = "gradient"
    candidates: int = 10  # gs_align only
    init_scale: float = 1.0  # initial lambda as a multiple of the pacing prior

    def __post_init__(self):
        if self.align_mode not in ALIGN_MODES:
            raise ValidationError(f"align mode must be one of {ALIGN_MODES}")
        if self.align_mode == "gs_align" and self.candidates < 2:
            raise ValidationError("gs_align needs at least 2 candidates")
        if not np.isfinite(self.omega) or not np.isfinite(self.target):
            raise ValidationError("omega and target must be finite")
        RefinementConfig(self.step, self.rounds)
        if self.init_scale <= 0:
            raise ValidationError("init_scale must be positive")


@dataclass
class AgentPolicy:
    completer: Completer
    idm: InverseDynamicsModel
    stats: NormStats
    aligner: ReturnModel | None = None
    config: InferenceConfig = field(default_factory=InferenceConfig)

    def __post_init__(self):
        if self.config.align_mode != "none" and self.aligner is None:
            raise ValidationError(f"align mode {self.config.align_mode!r} needs an aligner")
        D = self.completer.predictor.state_dim
        if self.idm.state_dim != D or self.stats.mean.shape != (D,):
            raise ShapeError("completer, inverse dynamics and normalisation disagree on state_dim")
        if self.aligner is not None and (self.aligner.horizon, self.aligner.state_dim) != (
            self.completer.predictor.horizon, D):
            raise ShapeError("aligner shape does not match the completer")

    @property
    def horizon(self) -> int:
        return self.completer.predictor.horizon

    def with_config(self, **kw) -> "AgentPolicy":
        return AgentPolicy(self.completer, self.idm, self.stats, self.aligner,
                           InferenceConfig(**{**asdict(self.config), **kw}))

    def plan(self, prefix_norm, t: int, rngs) -> np.ndarray:
        """Generated and aligned normalised trajectories for a batch of realised prefixes."""
        cfg = self.config
        B = prefix_norm.shape[0]
        y = np.full(B, cfg.target)
        if cfg.align_mode == "gs_align":
            C = cfg.candidates
            ref = np.repeat(prefix_norm, C, axis=0)
            crngs = [r for r in rngs for _ in range(C)]
            gen = self.completer.generate(ref, t, np.full(B * C, cfg.target), cfg.omega, crngs)
            err = alignment_error(self.aligner, gen, cfg.target).reshape(B, C)
            best = np.argmin(err, axis=1)
            return gen.reshape(B, C, *gen.shape[1:])[np.arange(B), best]
        gen = self.completer.generate(prefix_norm, t, y, cfg.omega, list(rngs))
        if cfg.align_mode == "gradient":
            gen = refine(self.aligner, gen, t, y, RefinementConfig(cfg.step, cfg.rounds))
        return gen


@dataclass
class EpisodeResult:
    trajectory: Trajectory
    metrics: dict
    generations: np.ndarray | None = None  # (T, N, D) raw plans, one per decision step
    params: list = field(default_factory=list)


def initial_params(episode: AuctionEpisode, scale: float = 1.0) -> BiddingParams:
    return BiddingParams((pacing_prior(episode) * scale,))


def run_episodes(policy: AgentPolicy, episodes: Sequence[AuctionEpisode], rngs: Sequence[np.random.Generator],
                 record: bool = False) -> list[EpisodeResult]:
    """Drive several fresh episodes in lockstep (one planner call per interval for all)."""
    episodes = list(episodes)
    if len(rngs) != len(episodes):
        raise ValidationError("need one generator per episode")
    if not episodes:
        return []
    T = episodes[0].T
    N, D = policy.horizon, policy.completer.predictor.state_dim
    if any(e.T != T for e in episodes) or N != T + 1:
        raise ShapeError(f"episodes of length {T} do not match a planner horizon of {N}")
    if any(e.t != 0 for e in episodes):
        raise ValidationError("episodes must be fresh")
    B = len(episodes)
    params = [initial_params(e, policy.config.init_scale) for e in episodes]
    states = np.zeros((B, N, D))
    states[:, 0] = [e.featurize() for e in episodes]
    actions = np.zeros((B, T, policy.idm.action_dim))
    rewards = np.zeros((B, T))
    plans = np.zeros((B, T, N, D)) if record else None
    history = [[p] for p in params]
    L = policy.idm.L
    for t in range(T):
        prefix = apply_stats(states, policy.stats)  # only positions <= t are read
        gen = policy.plan(prefix, t, rngs)
        if record:
            plans[:, t] = denormalize_states(gen, policy.stats)
        windows = np.stack([state_window(prefix[b, : t + 1], t, L) for b in range(B)])
        a = policy.idm.predict(windows, gen[:, t + 1])
        for b, ep in enumerate(episodes):
            params[b] = apply_action(params[b], a[b])
            rewards[b, t], _ = ep.step(params[b])
            states[b, t + 1] = ep.featurize()
            history[b].append(params[b])
        actions[:, t] = a
    out = []
    for b, ep in enumerate(episodes):
        traj = Trajectory(states[b], actions[b], rewards[b], policy.config.target, policy="agent")
        out.append(EpisodeResult(traj, episode_metrics(ep, ep.cpa_targets), None if plans is None else plans[b],
                                 history[b]))
    return out


def run_episode(policy: AgentPolicy, env: AuctionEpisode, rng: np.random.Generator, record=False) -> EpisodeResult:
    return run_episodes(policy, [env], [rng], record)[0]


def run_fixed(episodes: Sequence[AuctionEpisode], scale: float = 1.0) -> list[EpisodeResult]:
    """Baseline that never adjusts lambda (all-zero actions)."""
    out = []
    for ep in episodes:
        p = initial_params(ep, scale)
        states = [ep.featurize()]
        rewards = []
        while not ep.done:
            r, _ = ep.step(p)
            rewards.append(r)
            states.append(ep.featurize())
        traj = Trajectory(np.array(states), np.zeros((ep.T, 1)), np.array(rewards), policy="fixed")
        out.append(EpisodeResult(traj, episode_metrics(ep, ep.cpa_targets)))
    return out


# ---------------------------------------------------------------------------
# policy bundles


def save_bundle(policy: AgentPolicy, directory) -> Path:
    """Write the checkpoints plus a manifest with statistics and inference settings."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    policy.completer.save(d / "completer.ckpt")
    TrainedIDM(policy.idm, _idm_config(policy.idm)).save(d / "idm.ckpt")
    manifest = {
        "format": "cbd-policy",
        "version": 1,
        "completer": "completer.ckpt",
        "idm": "idm.ckpt",
        "aligner": None,
        "schedule": {"K": policy.completer.config.K, "beta_start": policy.completer.config.beta_start,
                     "beta_end": policy.completer.config.beta_end, "sigma_mode": policy.completer.config.sigma_mode},
        "stats": policy.stats.to_json(),
        "inference": asdict(policy.config),
    }
    if policy.aligner is not None:
        from .aligner import AlignerConfig

        Aligner(policy.aligner, AlignerConfig(tag=policy.aligner.tag)).save(d / "aligner.ckpt")
        manifest["aligner"] = "aligner.ckpt"
    path = d / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _idm_config(model: InverseDynamicsModel):
    from .idm import IDMConfig

    hidden = tuple(layer.weight.shape[0] for layer in model.net.layers[:-1])
    return IDMConfig(hidden=hidden, L=model.L)


def load_bundle(path, **overrides) -> AgentPolicy:
    """Load a bundle from its directory or manifest path; ``overrides`` patch the inference config."""
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST
    try:
        manifest = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read policy manifest {p}: {exc}") from None
    if manifest.get("format") != "cbd-policy":
        raise ValidationError(f"{p} is not a policy manifest")
    base = p.parent
    for key in ("completer", "idm", "aligner"):
        if manifest.get(key) and not (base / manifest[key]).exists():
            raise ValidationError(f"missing checkpoint {manifest[key]} referenced by {p}")
    completer = Completer.load(base / manifest["completer"])
    idm = TrainedIDM.load(base / manifest["idm"]).model
    aligner = Aligner.load(base / manifest["aligner"]).model if manifest.get("aligner") else None
    cfg = InferenceConfig(**{**manifest["inference"], **overrides})
    return AgentPolicy(completer, idm, NormStats.from_json(manifest["stats"]), aligner, cfg)
