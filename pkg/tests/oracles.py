"""Brute-force reference implementations used by the tests.

Everything here is written with explicit Python loops over scalars and shares
no code with the package beyond reading plain attributes, so agreement with
the vectorised code is real evidence.
"""
import math

import numpy as np


def act(z, kind):
    if kind == "silu":
        return z / (1.0 + math.exp(-z))
    if kind == "tanh":
        return math.tanh(z)
    if kind == "relu":
        return max(z, 0.0)
    return z


def net_forward(net, x):
    """Matrix chain evaluated entry by entry."""
    h = [float(v) for v in x]
    for layer in net.layers:
        W, b = layer.weight, layer.bias
        out = []
        for i in range(W.shape[0]):
            s = float(b[i])
            for j in range(W.shape[1]):
                s += float(W[i, j]) * h[j]
            out.append(act(s, layer.activation))
        h = out
    return np.array(h)


def second_price(our, competitors):
    """(won, cost, least winning cost) from a full sort of all bids; ties lose."""
    if not competitors:
        return True, 0.0, 0.0
    entries = sorted([(b, 1) for b in competitors] + [(our, 0)], key=lambda e: (-e[0], -e[1]))
    # competitors sort ahead of us on a tie, so a tie loses
    if entries[0][1] == 0:
        return True, float(entries[1][0]), float(entries[1][0])
    return False, 0.0, float(entries[1][0])


def clear_interval(bids, top, second, remaining):
    capped, won, cost, lwc = [], [], [], []
    spent = 0.0
    for b, t, s in zip(bids, top, second):
        b = min(float(b), max(remaining - spent, 0.0))
        capped.append(b)
        if b > t:
            won.append(True)
            cost.append(float(t))
            lwc.append(float(t))
            spent += float(t)
        else:
            won.append(False)
            cost.append(0.0)
            lwc.append(max(float(s), b))
    return np.array(capped), np.array(won), np.array(cost), np.array(lwc), spent


def _avg(xs):
    xs = list(xs)
    return sum(xs) / len(xs) if xs else 0.0


def featurize(records, T, budget, next_pvalues):
    """The 16 state features recomputed from the raw per-impression ledger."""
    t = len(records)
    per = []
    for r in records:
        n = len(r.values)
        per.append({
            "bid": _avg(r.bids),
            "lwc": _avg(r.least_winning_costs),
            "p": _avg(r.pvalues),
            "conv": _avg(r.conversions),
            "xi": _avg(1.0 if w else 0.0 for w in r.won),
            "pv": float(n),
        })
    spent = sum(float(c) for r in records for c in r.costs)
    last = per[-3:]
    f = [0.0] * 16
    f[0] = T - t
    f[1] = budget - spent
    if t:
        f[2] = _avg(p["bid"] for p in per)
        f[3] = _avg(p["bid"] for p in last)
        f[4] = _avg(p["lwc"] for p in per)
        f[5] = _avg(p["p"] for p in per)
        f[6] = _avg(p["conv"] for p in per)
        f[7] = _avg(p["xi"] for p in per)
        f[8] = _avg(p["lwc"] for p in last)
        f[9] = _avg(p["p"] for p in last)
        f[10] = _avg(p["conv"] for p in last)
        f[11] = _avg(p["xi"] for p in last)
        f[14] = sum(p["pv"] for p in last)
        f[15] = sum(p["pv"] for p in per)
    if next_pvalues is not None:
        f[12] = _avg(next_pvalues)
        f[13] = float(len(next_pvalues))
    return np.array(f)


def ledger_metrics(values, pvalues, won, costs, conversions, cpas, beta=2.0):
    """value, ER (None if undefined) and score by plain loops."""
    value = cost = conv = exp_conv = 0.0
    for v, p, w, c, o in zip(values, pvalues, won, costs, conversions):
        if w:
            value += v
            exp_conv += p
        cost += c
        conv += o
    er = None if conv == 0 else sum((cost / conv) / C for C in cpas) / len(cpas)
    if exp_conv == 0:
        return value, er, 0.0
    real = cost / exp_conv
    pen = 1.0
    for C in cpas:
        pen = min(pen, 1.0 if real == 0 else min((C / real) ** beta, 1.0))
    return value, er, value * pen


def budget_valid(seq, tol):
    for j, b in enumerate(seq):
        if b < -tol:
            return False
        if j and b > seq[j - 1] + tol:
            return False
    return True


def completion_loss(predict, x0, y, k, t, eps, drop, alpha_bars, mode="completion"):
    """Masked eps-MSE with the noisy input assembled element by element.

    ``predict(x, k, y, drop, pin)`` is the model under test; only the loss
    assembly is re-derived here.
    """
    B, N, D = x0.shape
    xk = np.empty_like(x0)
    for b in range(B):
        ab = alpha_bars[k[b] - 1]
        for n in range(N):
            for d in range(D):
                noisy = math.sqrt(ab) * x0[b, n, d] + math.sqrt(1.0 - ab) * eps[b, n, d]
                xk[b, n, d] = x0[b, n, d] if (mode == "completion" and n <= t[b]) else noisy
    pin = None
    if mode == "completion":
        pin = np.array([[n <= t[b] for n in range(N)] for b in range(B)])
    pred = predict(xk, k, y, drop, pin)
    total, count = 0.0, 0
    for b in range(B):
        for n in range(N):
            if mode == "completion" and n <= t[b]:
                continue
            for d in range(D):
                total += (pred[b, n, d] - eps[b, n, d]) ** 2
                count += 1
    return total / count


def eq4_loss(predict, x0, y, k, eps, drop, alpha_bars):
    """Plain diffuser objective: mean over every entry, no splicing."""
    ab = alpha_bars[np.asarray(k) - 1][:, None, None]
    xk = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return float(np.mean((predict(xk, k, y, drop, None) - eps) ** 2))


def mse_loop(pred, target):
    pred = np.asarray(pred, dtype=np.float64).reshape(len(target), -1)
    target = np.asarray(target, dtype=np.float64).reshape(len(target), -1)
    total = 0.0
    for p, q in zip(pred, target):
        for a, b in zip(p, q):
            total += (a - b) ** 2
    return total / len(target)


def adam_first_step(p, g, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    mhat = m / (1 - b1)
    vhat = v / (1 - b2)
    return p - lr * mhat / (math.sqrt(vhat) + eps)


def used_up_time(budgets, frac=0.95):
    """Linear interpolation of the first crossing of frac * total spend."""
    spend = [max(budgets[i] - budgets[i + 1], 0.0) for i in range(len(budgets) - 1)]
    total = sum(spend)
    if total <= 0:
        return 0.0
    goal = frac * total
    cum = 0.0
    for i, s in enumerate(spend):
        if cum + s >= goal and s > 0:
            return i + (goal - cum) / s
        cum += s
    return float(len(spend))


def histogram(x, bins, lo, hi):
    counts = [0] * bins
    width = (hi - lo) / bins
    for v in x:
        i = int((v - lo) // width)
        counts[min(max(i, 0), bins - 1)] += 1
    return counts
