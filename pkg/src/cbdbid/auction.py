"""Synthetic second-price auction environment.

A *period* is one day of traffic split into ``T`` intervals. Traffic
(impressions, competitor bids, conversion draws) is a pure function of the
period seed, so several advertisers can replay the same day. Our advertiser
changes its bidding parameters once per interval and bids on every
impression of that interval with them.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .bidding import BiddingParams, compute_bids
from .errors import StateError, ValidationError
from .kernels import clear_interval

FEATURES = (
    "time_left",
    "budget_left",
    "historical_bid_mean",
    "last_three_bid_mean",
    "historical_LeastWinningCost_mean",
    "historical_pValues_mean",
    "historical_conversion_mean",
    "historical_xi_mean",
    "last_three_LeastWinningCost_mean",
    "last_three_pValues_mean",
    "last_three_conversion_mean",
    "last_three_xi_mean",
    "current_pValues_mean",
    "current_pv_num",
    "last_three_pv_num_total",
    "historical_pv_num_total",
)
STATE_DIM = len(FEATURES)
BUDGET = FEATURES.index("budget_left")
TIME_LEFT = FEATURES.index("time_left")

SPARSE_FACTOR = 10.0


@dataclass
class SimConfig:
    T: int = 48
    impressions_per_interval: float = 150.0
    intensity: str = "bimodal"  # bimodal | flat | front_loaded | comma-separated weights
    competitor_count: int = 6
    sparse: bool = False
    seed: int = 0
    budget_min: float = 2000.0
    budget_max: float = 4500.0
    cpa_min: float = 6.0
    cpa_max: float = 12.0
    value_alpha: float = 2.0
    value_beta: float = 18.0
    competitor_scale_min: float = 2.0
    competitor_scale_max: float = 5.0
    competitor_noise: float = 0.5
    competitor_value_mix: float = 0.3  # weight of the shared impression value in a competitor's valuation
    competitor_budget_min: float = 3000.0
    competitor_budget_max: float = 9000.0

    def __post_init__(self):
        if self.T < 1:
            raise ValidationError("T must be >= 1")
        if self.impressions_per_interval < 0 or self.competitor_count < 0:
            raise ValidationError("impression intensity and competitor count must be >= 0")
        if not (0 < self.budget_min <= self.budget_max) or not (0 < self.cpa_min <= self.cpa_max):
            raise ValidationError("budget and CPA ranges must be positive and ordered")
        if self.value_alpha <= 0 or self.value_beta <= 0:
            raise ValidationError("value distribution parameters must be positive")

    @property
    def value_scale(self) -> float:
        return 1.0 / SPARSE_FACTOR if self.sparse else 1.0

    @property
    def cpa_scale(self) -> float:
        return SPARSE_FACTOR if self.sparse else 1.0

    @property
    def mean_value(self) -> float:
        """Closed-form mean of an impression value."""
        return self.value_scale * self.value_alpha / (self.value_alpha + self.value_beta)

    def profile(self) -> np.ndarray:
        """Relative traffic per interval, mean 1 for the named profiles."""
        T = self.T
        t = np.arange(T, dtype=np.float64)
        if self.intensity == "flat":
            w = np.ones(T)
        elif self.intensity == "bimodal":
            w = (
                0.35
                + np.exp(-0.5 * ((t - 0.29 * T) / (0.1 * T)) ** 2)
                + 0.8 * np.exp(-0.5 * ((t - 0.75 * T) / (0.12 * T)) ** 2)
            )
        elif self.intensity == "front_loaded":
            w = np.linspace(1.8, 0.2, T)
        else:
            try:
                w = np.array([float(x) for x in self.intensity.split(",")])
            except ValueError:
                raise ValidationError(f"unknown intensity profile {self.intensity!r}") from None
            if w.shape != (T,) or np.any(w < 0):
                raise ValidationError("explicit intensity profile needs T non-negative weights")
            return w
        return w / w.mean()

    def expected_total_value(self) -> float:
        return float(self.profile().sum() * self.impressions_per_interval * self.mean_value)

    def replace(self, **kw) -> "SimConfig":
        d = asdict(self)
        d.update(kw)
        return SimConfig(**d)


def _coerce(raw: str, kind):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in {"1", "true", "yes", "on"}:
            return True
        if low in {"0", "false", "no", "off"}:
            return False
        raise ValidationError(f"bad boolean {raw!r}")
    if kind is str:
        return raw
    try:
        return kind(raw)
    except ValueError:
        raise ValidationError(f"cannot parse {raw!r} for a {kind.__name__.lstrip('_')} field") from None


def _int_tuple(raw: str) -> tuple:
    return tuple(int(v) for v in raw.replace("(", "").replace(")", "").split(",") if v.strip())


def _opt_float(raw: str):
    return None if raw.lower() in {"", "none", "null"} else float(raw)


def parse_config_text(text: str, cls=SimConfig, strict=False):
    """Flat ``key = value`` lines (``#`` comments). Unknown keys are ignored unless ``strict``."""
    types = {f.name: f.type for f in fields(cls)}
    kinds = {"int": int, "float": float, "bool": bool, "str": str, "tuple": _int_tuple, "float | None": _opt_float}
    kw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            if strict:
                raise ValidationError(f"line {lineno}: unknown key {key!r}")
            continue
        kind = kinds.get(str(types[key]))
        if kind is None:
            raise ValidationError(f"line {lineno}: key {key!r} cannot be set from a config file")
        kw[key] = _coerce(val, kind)
    return cls(**kw)


def load_sim_config(path) -> SimConfig:
    return parse_config_text(Path(path).read_text())


def dump_config_text(cfg) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


# ---------------------------------------------------------------------------


class Impression(NamedTuple):
    index: int
    value: float
    pvalue: float
    interval: int


@dataclass
class Impressions:
    """Structure-of-arrays batch of impressions belonging to one interval."""

    interval: int
    values: np.ndarray
    pvalues: np.ndarray

    def __len__(self):
        return self.values.shape[0]

    def __iter__(self):
        for i in range(len(self)):
            yield Impression(i, float(self.values[i]), float(self.pvalues[i]), self.interval)


def generate_impressions(rng: np.random.Generator, interval: int, config: SimConfig) -> Impressions:
    """Poisson count from the intensity profile; beta-distributed conversion probabilities.

    The impression value is its conversion probability, so Value counts
    expected conversions.
    """
    if not 0 <= interval < config.T:
        raise ValidationError(f"interval {interval} outside [0, {config.T})")
    lam = config.impressions_per_interval * config.profile()[interval]
    n = int(rng.poisson(lam)) if lam > 0 else 0
    p = rng.beta(config.value_alpha, config.value_beta, size=n) * config.value_scale
    return Impressions(interval, p.copy(), p)


def run_auction(our_bid: float, competitor_bids: Sequence[float]):
    """Single second-price auction; ties lose. Returns ``(won, cost, least_winning_cost)``."""
    if our_bid < 0 or any(b < 0 for b in competitor_bids):
        raise ValidationError("bids must be non-negative")
    if len(competitor_bids) == 0:
        return True, 0.0, 0.0
    comp = sorted(competitor_bids, reverse=True)
    top = float(comp[0])
    if our_bid > top:
        return True, top, top
    second = float(comp[1]) if len(comp) > 1 else 0.0
    return False, 0.0, max(second, float(our_bid))


@dataclass
class AdvertiserConfig:
    budget: float
    cpa: float
    category: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.budget) and self.budget > 0):
            raise ValidationError(f"budget must be positive, got {self.budget}")
        if not (np.isfinite(self.cpa) and self.cpa > 0):
            raise ValidationError(f"CPA target must be positive, got {self.cpa}")


def sample_advertiser(rng: np.random.Generator, config: SimConfig, budget_scale=1.0) -> AdvertiserConfig:
    budget = rng.uniform(config.budget_min, config.budget_max) * budget_scale
    cpa = rng.uniform(config.cpa_min, config.cpa_max) * config.cpa_scale
    return AdvertiserConfig(float(budget), float(cpa), int(rng.integers(0, 6)))


@dataclass
class CompetitorPool:
    """Scripted value-scalers: bid = value * scale * lognormal noise, until their budget runs out."""

    scales: np.ndarray
    budgets: np.ndarray
    noise: float
    value_mix: float = 1.0
    value_alpha: float = 2.0
    value_beta: float = 18.0
    value_scale: float = 1.0

    @classmethod
    def sample(cls, rng, config: SimConfig) -> "CompetitorPool":
        n = config.competitor_count
        scales = rng.uniform(config.competitor_scale_min, config.competitor_scale_max, n) * config.cpa_scale
        budgets = rng.uniform(config.competitor_budget_min, config.competitor_budget_max, n)
        return cls(scales, budgets, config.competitor_noise, config.competitor_value_mix,
                   config.value_alpha, config.value_beta, config.value_scale)

    def raw_bids(self, rng, values) -> np.ndarray:
        """bid = scale * (mix * shared value + (1 - mix) * private value) * lognormal noise."""
        n, m = self.scales.shape[0], values.shape[0]
        if n == 0:
            return np.zeros((0, m))
        private = rng.beta(self.value_alpha, self.value_beta, size=(n, m)) * self.value_scale
        worth = self.value_mix * values[None, :] + (1.0 - self.value_mix) * private
        return worth * self.scales[:, None] * rng.lognormal(0.0, self.noise, size=(n, m))


@dataclass
class PeriodTraffic:
    """Everything random about a period, drawn once from its seed."""

    config: SimConfig
    impressions: list[Impressions]
    competitor_bids: list[np.ndarray]  # per interval, (N, n_t)
    conversion_draws: list[np.ndarray]  # per interval, uniforms compared against pvalue
    pool: CompetitorPool

    @classmethod
    def generate(cls, config: SimConfig, seed) -> "PeriodTraffic":
        rng = np.random.default_rng(seed)
        pool = CompetitorPool.sample(rng, config)
        imps, comp, conv = [], [], []
        for t in range(config.T):
            im = generate_impressions(rng, t, config)
            imps.append(im)
            comp.append(pool.raw_bids(rng, im.values))
            conv.append(rng.random(len(im)))
        return cls(config, imps, comp, conv, pool)


@dataclass
class IntervalRecord:
    """Per-impression outcome of one interval (the raw ledger)."""

    values: np.ndarray
    pvalues: np.ndarray
    bids: np.ndarray
    won: np.ndarray
    costs: np.ndarray
    conversions: np.ndarray
    least_winning_costs: np.ndarray


def _mean(x):
    return float(x.mean()) if x.size else 0.0


class AuctionEpisode:
    """Episode state for one advertiser replaying one period.

    ``remaining_budget`` is always ``budget - sum(costs)``; bids are capped so
    it never goes negative.
    """

    def __init__(self, traffic: PeriodTraffic, advertiser: AdvertiserConfig):
        self.traffic = traffic
        self.config = traffic.config
        self.advertiser = advertiser
        self.T = self.config.T
        self.t = 0
        self.total_cost = 0.0
        self.remaining_budget = float(advertiser.budget)
        self.records: list[IntervalRecord] = []
        self.params_history: list[BiddingParams] = []
        self._comp_spent = np.zeros(traffic.pool.budgets.shape[0])
        # per-interval summaries feeding the state features
        self._summ = {k: [] for k in ("bid", "lwc", "p", "conv", "xi", "pv")}

    @classmethod
    def create(cls, config: SimConfig, period_seed, advertiser: AdvertiserConfig | None = None,
               advertiser_seed=None, budget_scale=1.0) -> "AuctionEpisode":
        traffic = PeriodTraffic.generate(config, period_seed)
        if advertiser is None:
            advertiser = sample_advertiser(np.random.default_rng(advertiser_seed), config, budget_scale)
        return cls(traffic, advertiser)

    @property
    def done(self) -> bool:
        return self.t >= self.T

    @property
    def time_left(self) -> int:
        return self.T - self.t

    @property
    def cpa_targets(self) -> tuple[float, ...]:
        return (self.advertiser.cpa,)

    def current_impressions(self) -> Impressions | None:
        return None if self.done else self.traffic.impressions[self.t]

    def step(self, params: BiddingParams):
        """Bid through interval ``t`` with ``params``. Returns ``(reward, done)``."""
        if self.done:
            raise StateError("episode already finished")
        t = self.t
        imps = self.traffic.impressions[t]
        n = len(imps)
        cpa = self.cpa_targets[: params.n_constraints]
        bids = compute_bids(params, imps.values, imps.pvalues, cpa)
        comp = self.traffic.competitor_bids[t]
        active = self._comp_spent < self.traffic.pool.budgets
        comp = comp[active]
        if comp.shape[0] >= 2:
            part = np.partition(comp, comp.shape[0] - 2, axis=0)
            top, second = part[-1], part[-2]
            top_idx = np.argmax(comp, axis=0)
        elif comp.shape[0] == 1:
            top, second, top_idx = comp[0], np.zeros(n), np.zeros(n, dtype=np.int64)
        else:
            top, second, top_idx = np.zeros(n), np.zeros(n), np.zeros(n, dtype=np.int64)
        capped, won, cost, lwc, spent = clear_interval(bids, top, second, self.remaining_budget)
        conv = (won & (self.traffic.conversion_draws[t] < imps.pvalues)).astype(np.float64)

        # competitor that won pays the larger of the runner-up and our bid
        comp_won = ~won & (top > 0)
        if comp_won.any():
            pay = np.maximum(second, capped)[comp_won]
            spend = np.zeros(comp.shape[0])
            np.add.at(spend, top_idx[comp_won], pay)
            self._comp_spent[np.flatnonzero(active)] += spend

        self.records.append(IntervalRecord(imps.values, imps.pvalues, capped, won, cost, conv, lwc))
        self.params_history.append(params)
        self.total_cost += spent
        self.remaining_budget = float(self.advertiser.budget - self.total_cost)
        s = self._summ
        s["bid"].append(_mean(capped))
        s["lwc"].append(_mean(lwc))
        s["p"].append(_mean(imps.pvalues))
        s["conv"].append(_mean(conv))
        s["xi"].append(_mean(won.astype(np.float64)))
        s["pv"].append(float(n))
        self.t += 1
        return float(conv.sum()), self.done

    def featurize(self) -> np.ndarray:
        """The 16 state features, in :data:`FEATURES` order."""
        s = self._summ
        t = self.t
        out = np.zeros(STATE_DIM)
        out[0] = self.T - t
        out[1] = self.remaining_budget
        if t > 0:
            hist = {k: np.asarray(v) for k, v in s.items()}
            last = {k: v[-3:] for k, v in hist.items()}
            out[2] = hist["bid"].mean()
            out[3] = last["bid"].mean()
            out[4] = hist["lwc"].mean()
            out[5] = hist["p"].mean()
            out[6] = hist["conv"].mean()
            out[7] = hist["xi"].mean()
            out[8] = last["lwc"].mean()
            out[9] = last["p"].mean()
            out[10] = last["conv"].mean()
            out[11] = last["xi"].mean()
            out[14] = last["pv"].sum()
            out[15] = hist["pv"].sum()
        if t < self.T:
            cur = self.traffic.impressions[t]
            out[12] = _mean(cur.pvalues)
            out[13] = float(len(cur))
        return out

    # ledger views -------------------------------------------------------

    def interval_costs(self) -> np.ndarray:
        return np.array([r.costs.sum() for r in self.records])

    def interval_rewards(self) -> np.ndarray:
        return np.array([r.conversions.sum() for r in self.records])


def step(episode: AuctionEpisode, params: BiddingParams):
    """Functional spelling of :meth:`AuctionEpisode.step`: ``(episode, reward, done)``."""
    reward, done = episode.step(params)
    return episode, reward, done


def featurize(episode: AuctionEpisode) -> np.ndarray:
    return episode.featurize()


def config_to_json(cfg) -> str:
    return json.dumps(asdict(cfg), sort_keys=True)
