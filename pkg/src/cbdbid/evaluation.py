"""Seeded policy evaluation and the ablation harness."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .agent import AgentPolicy, load_bundle, run_episodes, run_fixed
from .auction import AuctionEpisode, PeriodTraffic, SimConfig, sample_advertiser
from .errors import ValidationError
from .metrics import valid_mask

ABLATION_MODES = ("cbd", "cbd_completer", "vanilla", "gs_align")
BUDGET_LEVELS = (0.5, 0.75, 1.0, 1.25, 1.5)
METRICS = ("value", "er", "score", "validity")
_EVAL_STREAM = 0x5EED  # keeps evaluation periods apart from dataset periods of the same seed


def make_episodes(config: SimConfig, n: int, seed: int = 0, budget_scale: float = 1.0) -> list[AuctionEpisode]:
    """``n`` fresh episodes. The same ``(config, n, seed)`` gives the same traffic and
    advertisers for every budget level; only the budget is scaled."""
    if n < 1:
        raise ValidationError("need at least one episode")
    out = []
    for s in np.random.SeedSequence([seed, _EVAL_STREAM]).spawn(n):
        traffic_seed, adv_seed = s.spawn(2)
        adv = sample_advertiser(np.random.default_rng(adv_seed), config, budget_scale)
        out.append(AuctionEpisode(PeriodTraffic.generate(config, traffic_seed), adv))
    return out


def episode_rngs(n: int, seed: int = 0) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence([seed, _EVAL_STREAM, 1]).spawn(n)]


def mean_se(x) -> tuple[float, float]:
    """Mean and standard error of the finite entries (nan, nan when there are none)."""
    x = np.asarray(x, dtype=np.float64)
    x = x[np.isfinite(x)]
    if x.size == 0:
        return float("nan"), float("nan")
    se = float(x.std(ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0
    return float(x.mean()), se


def episode_rows(results, validity: Sequence[float] | None = None) -> list[dict]:
    rows = []
    for i, r in enumerate(results):
        m = r.metrics
        rows.append({
            "episode": i,
            "value": m["value"],
            "er": m["er"],
            "score": m["score"],
            "cost": m["cost"],
            "conversions": m["conversions"],
            "zero_conversions": m["zero_conversions"],
            "validity": float("nan") if validity is None else validity[i],
        })
    return rows


def summarize(rows: list[dict]) -> dict:
    out = {"n": len(rows), "zero_conversions": int(sum(r["zero_conversions"] for r in rows))}
    for k in METRICS:
        out[f"{k}_mean"], out[f"{k}_se"] = mean_se([r[k] for r in rows])
    return out


def evaluate_policy(policy: AgentPolicy | None, config: SimConfig, episodes: int = 20, seed: int = 0,
                    budget_scale: float = 1.0) -> list[dict]:
    """Per-episode metric rows. ``policy=None`` runs the fixed-lambda baseline.

    Validity of an episode is the share of its per-step plans whose budget
    sequence is legitimate.
    """
    eps = make_episodes(config, episodes, seed, budget_scale)
    if policy is None:
        return episode_rows(run_fixed(eps))
    results = run_episodes(policy, eps, episode_rngs(episodes, seed), record=True)
    validity = [float(valid_mask(r.generations).mean()) for r in results]
    return episode_rows(results, validity)


@dataclass
class AblationTable:
    rows: list[dict]

    def row(self, mode: str, budget: float) -> dict:
        for r in self.rows:
            if r["mode"] == mode and r["budget"] == budget:
                return r
        raise KeyError((mode, budget))

    def to_json(self) -> str:
        return json.dumps(self.rows, indent=2, sort_keys=True) + "\n"

    def write(self, path) -> Path:
        """JSON for ``.json`` paths, tab-separated text otherwise."""
        path = Path(path)
        if path.suffix == ".json":
            path.write_text(self.to_json())
            return path
        write_tsv(self.rows, path)
        return path


def write_tsv(rows: list[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        if not rows:
            return path
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), delimiter="\t", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return path


def resolve_modes(artifacts: Mapping[str, AgentPolicy | str | Path], modes: Sequence[str] = ABLATION_MODES,
                  candidates: int = 10) -> dict[str, AgentPolicy]:
    """Build the standard ablation policies.

    ``artifacts["cbd"]`` is a completion-trained bundle with an aligner and
    ``artifacts["vanilla"]`` a vanilla-trained one. CBD-Completer and GS-Align
    reuse the CBD bundle with gradient alignment swapped out.
    """
    loaded: dict[str, AgentPolicy] = {}

    def get(key):
        if key not in artifacts:
            raise ValidationError(f"missing artifacts for {key!r}")
        if key not in loaded:
            a = artifacts[key]
            loaded[key] = a if isinstance(a, AgentPolicy) else load_bundle(a)
        return loaded[key]

    out = {}
    for mode in modes:
        if mode == "cbd":
            out[mode] = get("cbd").with_config(align_mode="gradient")
        elif mode == "cbd_completer":
            out[mode] = get("cbd").with_config(align_mode="none")
        elif mode == "gs_align":
            out[mode] = get("cbd").with_config(align_mode="gs_align", candidates=candidates)
        elif mode == "vanilla":
            out[mode] = get("vanilla").with_config(align_mode="none")
        else:
            raise ValidationError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")
    return out


def ablation_run(policies: Mapping[str, AgentPolicy], config: SimConfig, episodes: int = 20, seed: int = 0,
                 budgets: Sequence[float] = BUDGET_LEVELS) -> AblationTable:
    """Mean and standard error of Value/ER/Score/validity per mode and budget level.

    Every mode sees the same episodes and generator seeds, so identical
    policies give identical rows.
    """
    if not policies:
        raise ValidationError("no modes to compare")
    rows = []
    for mode, policy in policies.items():
        for b in budgets:
            summary = summarize(evaluate_policy(policy, config, episodes, seed, b))
            rows.append({"mode": mode, "budget": float(b), **summary})
    return AblationTable(rows)
