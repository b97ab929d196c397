"""Episode metrics, generated-trajectory validity and plot-data files."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .auction import BUDGET
from .errors import ValidationError
from .kernels import monotone_ok
from .trajectory import spend_per_interval

VALIDITY_TOL = 1e-6


class UndefinedMetricError(ValidationError):
    """Raised when a ratio metric has a zero denominator (no conversions)."""


@dataclass
class Ledger:
    """Flattened per-impression outcomes of one episode."""

    values: np.ndarray
    pvalues: np.ndarray
    won: np.ndarray
    costs: np.ndarray
    conversions: np.ndarray

    @classmethod
    def from_records(cls, records) -> "Ledger":
        records = list(records)
        if not records:
            z = np.zeros(0)
            return cls(z, z, z.astype(bool), z, z)
        cat = lambda name: np.concatenate([getattr(r, name) for r in records])  # noqa: E731
        return cls(cat("values"), cat("pvalues"), cat("won").astype(bool), cat("costs"), cat("conversions"))

    @property
    def total_cost(self) -> float:
        return float(self.costs.sum())

    @property
    def total_conversions(self) -> float:
        return float(self.conversions.sum())


def as_ledger(obj) -> Ledger:
    if isinstance(obj, Ledger):
        return obj
    if hasattr(obj, "records"):
        return Ledger.from_records(obj.records)
    return Ledger.from_records(obj)


def value(ledger) -> float:
    """Sum of values of won impressions."""
    lg = as_ledger(ledger)
    return float(np.sum(lg.values * lg.won))


def exceed_rate(ledger, cpa: Sequence[float]) -> float:
    """Mean over constraints of realised cost per realised conversion divided by the target."""
    lg = as_ledger(ledger)
    cpa = np.atleast_1d(np.asarray(cpa, dtype=np.float64))
    if lg.total_conversions <= 0:
        raise UndefinedMetricError("exceed rate undefined: no conversions")
    real = lg.total_cost / lg.total_conversions
    return float(np.mean(real / cpa))


def penalty(ledger, cpa: Sequence[float], beta: float = 2.0) -> float:
    """min_j min((C_j / CPA)^beta, 1) with CPA = sum(cost) / sum(p) over won impressions."""
    lg = as_ledger(ledger)
    cpa = np.atleast_1d(np.asarray(cpa, dtype=np.float64))
    expected = float(np.sum(lg.pvalues * lg.won))
    if expected <= 0:
        raise UndefinedMetricError("penalty undefined: nothing won")
    real = lg.total_cost / expected
    if real == 0:
        return 1.0
    return float(np.min(np.minimum((cpa / real) ** beta, 1.0)))


def score(ledger, cpa: Sequence[float], beta: float = 2.0) -> float:
    """value * penalty; 0 for an episode that won nothing (see :func:`episode_metrics`)."""
    try:
        return value(ledger) * penalty(ledger, cpa, beta)
    except UndefinedMetricError:
        return 0.0


def episode_metrics(ledger, cpa: Sequence[float], beta: float = 2.0) -> dict:
    lg = as_ledger(ledger)
    try:
        er = exceed_rate(lg, cpa)
        flag = False
    except UndefinedMetricError:
        er, flag = float("nan"), True
    return {
        "value": value(lg),
        "er": er,
        "score": score(lg, cpa, beta),
        "cost": lg.total_cost,
        "conversions": lg.total_conversions,
        "zero_conversions": flag,
    }


# ---------------------------------------------------------------------------
# generated-trajectory checks


def valid_mask(states, feature: int = BUDGET, tol: float = VALIDITY_TOL) -> np.ndarray:
    """Per-trajectory legitimacy of the budget feature of raw (denormalised) states (M, N, D).

    Valid means non-increasing and non-negative, with slack ``tol * B`` where
    B is the trajectory's initial budget.
    """
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 2:
        states = states[None]
    if states.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    b = states[:, :, feature]
    return monotone_ok(b, tol * np.abs(b[:, 0]))


def validity(states, feature: int = BUDGET, tol: float = VALIDITY_TOL) -> float:
    m = valid_mask(states, feature, tol)
    return float(m.mean()) if m.size else 1.0


def budget_used_up_time(states, frac: float = 0.95) -> np.ndarray:
    """Time (in intervals, interpolated) at which cumulative spend reaches ``frac`` of total spend."""
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 2:
        states = states[None]
    spend = np.maximum(spend_per_interval(states), 0.0)
    cum = np.concatenate([np.zeros((spend.shape[0], 1)), np.cumsum(spend, axis=1)], axis=1)
    out = np.empty(spend.shape[0])
    for i in range(spend.shape[0]):
        total = cum[i, -1]
        out[i] = np.interp(frac * total, cum[i], np.arange(cum.shape[1])) if total > 0 else 0.0
    return out


def spend_variances(states) -> np.ndarray:
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 2:
        states = states[None]
    budget = states[:, 0, BUDGET]
    return np.var(spend_per_interval(states) / budget[:, None], axis=1)


# ---------------------------------------------------------------------------
# plot data

PLOT_KINDS = ("budget_curve", "smoothness_hist", "spendup_hist")


def _as_states(trajectories) -> list[np.ndarray]:
    return [np.asarray(getattr(t, "states", t), dtype=np.float64) for t in trajectories]


def histogram_rows(x, bins: int, lo=None, hi=None):
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return []
    lo = float(x.min()) if lo is None else lo
    hi = float(x.max()) if hi is None else hi
    if hi <= lo:
        hi = lo + 1.0
    counts, edges = np.histogram(x, bins=bins, range=(lo, hi))
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]


def emit_plot_data(trajectories, kind: str, path, bins: int = 20) -> Path:
    """Write a tab-separated columnar file for ``kind`` and return its path."""
    if kind not in PLOT_KINDS:
        raise ValidationError(f"plot kind must be one of {PLOT_KINDS}")
    states = _as_states(trajectories)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        if kind == "budget_curve":
            w.writerow(["trajectory", "t", "budget_left"])
            for i, s in enumerate(states):
                for t, b in enumerate(s[:, BUDGET]):
                    w.writerow([i, t, repr(float(b))])
            return path
        w.writerow(["bin_lo", "bin_hi", "count"])
        if states:
            stack = np.stack(states)
            x = spend_variances(stack) if kind == "smoothness_hist" else budget_used_up_time(stack)
            for lo, hi, c in histogram_rows(x, bins):
                w.writerow([repr(lo), repr(hi), c])
    return path
