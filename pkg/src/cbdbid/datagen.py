"""Offline logs from scripted behaviour policies run in the simulator."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .auction import AuctionEpisode, PeriodTraffic, SimConfig, sample_advertiser
from .bidding import BiddingParams, apply_action
from .errors import CBDError, ValidationError
from .trajectory import Dataset, Trajectory

log = logging.getLogger(__name__)

POLICY_KINDS = ("constant", "pid_pacer", "noisy_expert")
DEFAULT_MIX = (("constant", 2), ("pid_pacer", 5), ("noisy_expert", 3))


def pacing_prior(episode: AuctionEpisode) -> float:
    """lambda_0 = budget / expected total impression value of the period."""
    return episode.advertiser.budget / episode.config.expected_total_value()


@dataclass
class PolicyConfig:
    kp: float = 15.0
    ki: float = 1.0
    kd: float = 0.0
    max_action: float = 0.5
    action_noise: float = 0.25  # noisy_expert only, sigma of the lognormal factor
    init_jitter: float = 0.25  # lognormal sigma around the pacing prior
    init_scale: float = 1.4  # multiplier on the pacing prior


class ScriptedPolicy:
    """Behaviour policy emitting log-multiplicative parameter adjustments."""

    def __init__(self, kind: str, config: PolicyConfig | None = None):
        if kind not in POLICY_KINDS:
            raise ValidationError(f"unknown behaviour policy {kind!r}")
        self.kind = kind
        self.config = config or PolicyConfig()
        self._integral = 0.0
        self._prev = 0.0
        self._u = 0.0

    def reset(self, episode: AuctionEpisode, rng: np.random.Generator) -> BiddingParams:
        self._integral = 0.0
        self._prev = 0.0
        self._u = 0.0
        c = self.config
        lam = pacing_prior(episode) * c.init_scale * float(np.exp(rng.normal(0.0, c.init_jitter)))
        return BiddingParams((lam,))

    def tracking_error(self, episode: AuctionEpisode) -> float:
        """Planned minus realised spend share, with the plan spending uniformly over time."""
        spent = episode.total_cost / episode.advertiser.budget
        return episode.t / episode.T - spent

    def act(self, episode: AuctionEpisode, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "constant":
            return np.zeros(1)
        c = self.config
        # PID sets the log-multiplier of lambda; the action is its increment (velocity form)
        err = self.tracking_error(episode)
        self._integral += err
        u = c.kp * err + c.ki * self._integral + c.kd * (err - self._prev)
        self._prev = err
        a = float(np.clip(u - self._u, -c.max_action, c.max_action))
        self._u += a
        if self.kind == "noisy_expert":
            a += float(rng.normal(0.0, c.action_noise))
        return np.array([a])


def scripted_policy(kind: str, config: PolicyConfig | None = None) -> ScriptedPolicy:
    return ScriptedPolicy(kind, config)


def default_policies() -> list[ScriptedPolicy]:
    out = []
    for kind, n in DEFAULT_MIX:
        cfg = PolicyConfig(init_scale=1.6) if kind == "constant" else PolicyConfig()
        out.extend(ScriptedPolicy(kind, cfg) for _ in range(n))
    return out


def roll_out(policy: ScriptedPolicy, episode: AuctionEpisode, rng: np.random.Generator, period=0) -> Trajectory:
    params = policy.reset(episode, rng)
    states = [episode.featurize()]
    actions, rewards = [], []
    while not episode.done:
        a = policy.act(episode, rng)
        params = apply_action(params, a)
        r, _ = episode.step(params)
        actions.append(a)
        rewards.append(r)
        states.append(episode.featurize())
    return Trajectory(np.array(states), np.array(actions), np.array(rewards), 0.0, period, policy.kind)


def collect_dataset(
    policies: list[ScriptedPolicy],
    env_config: SimConfig,
    periods: int,
    seed: int = 0,
    budget_scale: float = 1.0,
    functional: str = "return",
) -> Dataset:
    """Run every policy once per period, each as a freshly sampled advertiser.

    All policies of a period replay the same traffic. The result is finalised
    (normalisation statistics fitted, conditions computed).
    """
    if periods < 1:
        raise ValidationError("periods must be >= 1")
    if not policies:
        raise ValidationError("need at least one behaviour policy")
    root = np.random.SeedSequence(seed)
    trajs = []
    for period, pseed in enumerate(root.spawn(periods)):
        traffic_seed, *agent_seeds = pseed.spawn(1 + len(policies))
        try:
            traffic = PeriodTraffic.generate(env_config, traffic_seed)
            batch = []
            for policy, aseed in zip(policies, agent_seeds):
                rng = np.random.default_rng(aseed)
                adv = sample_advertiser(rng, env_config, budget_scale)
                batch.append(roll_out(policy, AuctionEpisode(traffic, adv), rng, period))
        except CBDError as exc:
            log.warning("period %d aborted: %s", period, exc)
            continue
        trajs.extend(batch)
    return Dataset(trajs, functional=functional).finalize()
