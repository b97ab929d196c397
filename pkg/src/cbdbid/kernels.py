"""Hot inner loops, each with a numba kernel and a numpy fallback.

The dispatchers at the bottom pick the numba version unless numba is missing
or ``CBDBID_DISABLE_NUMBA`` is set. The two paths are bit-identical.
"""
import numpy as np

from . import _accel
from ._accel import njit


# -- budget-capped second-price clearing of one interval ----------------------


def _clear_interval_py(bids, top, second, remaining):
    n = bids.shape[0]
    capped = np.empty(n)
    won = np.zeros(n, dtype=np.bool_)
    cost = np.zeros(n)
    lwc = np.empty(n)
    spent = 0.0
    for i in range(n):
        rem = remaining - spent
        if rem < 0.0:
            rem = 0.0
        b = bids[i]
        if b > rem:
            b = rem
        capped[i] = b
        if b > top[i]:
            won[i] = True
            cost[i] = top[i]
            lwc[i] = top[i]
            spent = spent + top[i]
        else:
            lwc[i] = second[i] if second[i] > b else b
    return capped, won, cost, lwc, spent


_clear_interval_nb = njit(_clear_interval_py)


def _clear_interval_np(bids, top, second, remaining):
    n = bids.shape[0]
    capped = bids.copy()
    won = np.zeros(n, dtype=np.bool_)
    cost = np.zeros(n)
    spent = 0.0
    i = 0
    while i < n:
        if remaining - spent <= 0.0:
            capped[i:] = 0.0
            break
        b, t = bids[i:], top[i:]
        w = b > t
        c = np.where(w, t, 0.0)
        before = np.cumsum(np.concatenate(([spent], c)))[:-1]
        rem = np.maximum(remaining - before, 0.0)
        binding = b > rem
        if not binding.any():
            won[i:] = w
            cost[i:] = c
            spent = float(before[-1] + c[-1]) if c.size else spent
            i = n
            break
        j = int(np.argmax(binding))
        won[i : i + j] = w[:j]
        cost[i : i + j] = c[:j]
        spent = float(before[j])
        bj = rem[j]
        capped[i + j] = bj
        if bj > t[j]:
            won[i + j] = True
            cost[i + j] = t[j]
            spent = spent + t[j]
        i += j + 1
    lwc = np.where(won, top, np.maximum(second, capped))
    return capped, won, cost, lwc, spent


# -- budget monotonicity scan (validity metric) -------------------------------


def _monotone_ok_py(budget, tol):
    # budget: (n, L); row valid iff non-increasing within tol and never below -tol
    n, L = budget.shape
    out = np.ones(n, dtype=np.bool_)
    for r in range(n):
        t = tol[r]
        for j in range(L):
            if budget[r, j] < -t:
                out[r] = False
                break
            if j > 0 and budget[r, j] > budget[r, j - 1] + t:
                out[r] = False
                break
    return out


_monotone_ok_nb = njit(_monotone_ok_py)


def _monotone_ok_np(budget, tol):
    tol = tol[:, None]
    neg = (budget < -tol).any(axis=1)
    up = (budget[:, 1:] > budget[:, :-1] + tol).any(axis=1)
    return ~(neg | up)


# -- dispatchers --------------------------------------------------------------


def clear_interval(bids, top, second, remaining, use_numba=None):
    """Clear impressions in arrival order against a shrinking budget.

    Our bid on each impression is capped at the budget still unspent, so the
    total cost never exceeds ``remaining``. We win iff the capped bid is
    strictly above the best competitor bid ``top`` and then pay ``top``.

    Returns ``(capped_bids, won, cost, least_winning_cost, spent)``.
    """
    bids = np.ascontiguousarray(bids, dtype=np.float64)
    top = np.ascontiguousarray(top, dtype=np.float64)
    second = np.ascontiguousarray(second, dtype=np.float64)
    if use_numba is None:
        use_numba = _accel.USE_NUMBA
    fn = _clear_interval_nb if use_numba else _clear_interval_np
    return fn(bids, top, second, float(remaining))


def monotone_ok(budget, tol, use_numba=None):
    budget = np.ascontiguousarray(budget, dtype=np.float64)
    tol = np.ascontiguousarray(np.broadcast_to(tol, (budget.shape[0],)), dtype=np.float64)
    if use_numba is None:
        use_numba = _accel.USE_NUMBA
    fn = _monotone_ok_nb if use_numba else _monotone_ok_np
    return fn(budget, tol)
