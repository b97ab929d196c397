"""Bidding parameters, the linear bid map and multiplicative parameter adjustments."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class BiddingParams:
    """lambda_0 scales impression value; lambda_1..lambda_J scale p * CPA target terms."""

    lambdas: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        lam = tuple(float(x) for x in self.lambdas)
        if not lam:
            raise ValidationError("need at least lambda_0")
        if any(not np.isfinite(x) or x < 0 for x in lam):
            raise ValidationError(f"bidding parameters must be finite and >= 0: {lam}")
        object.__setattr__(self, "lambdas", lam)

    @property
    def n_constraints(self) -> int:
        return len(self.lambdas) - 1


def compute_bid(params: BiddingParams, impression, cpa: Sequence[float] = ()) -> float:
    """b = lambda_0 * v + sum_j lambda_j * p * C_j for a single impression."""
    lam = params.lambdas
    if len(cpa) != len(lam) - 1:
        raise ValidationError(f"{len(lam) - 1} constraint parameters but {len(cpa)} CPA targets")
    bid = lam[0] * impression.value
    for lj, cj in zip(lam[1:], cpa):
        bid += lj * impression.pvalue * cj
    return bid


def compute_bids(params: BiddingParams, values, pvalues, cpa: Sequence[float] = ()) -> np.ndarray:
    """Vectorised :func:`compute_bid` over arrays of impression values and pvalues."""
    lam = params.lambdas
    if len(cpa) != len(lam) - 1:
        raise ValidationError(f"{len(lam) - 1} constraint parameters but {len(cpa)} CPA targets")
    bids = lam[0] * np.asarray(values, dtype=np.float64)
    if len(cpa):
        coef = sum(lj * cj for lj, cj in zip(lam[1:], cpa))
        bids = bids + coef * np.asarray(pvalues, dtype=np.float64)
    return bids


def apply_action(params: BiddingParams, action) -> BiddingParams:
    """lambda_j <- max(0, lambda_j * exp(a_j)); a scalar action applies to every lambda."""
    a = np.atleast_1d(np.asarray(action, dtype=np.float64))
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"non-finite action {a}")
    lam = np.asarray(params.lambdas)
    if a.size == 1:
        a = np.full(lam.shape, a[0])
    elif a.shape != lam.shape:
        raise ValidationError(f"action dim {a.size} != parameter dim {lam.size}")
    return BiddingParams(tuple(np.maximum(0.0, lam * np.exp(a))))
