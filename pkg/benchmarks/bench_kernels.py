"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 50]

Also runs one simulator period and a validity scan end to end with each path
(the env flag is read at import, so the end-to-end part switches the module
attribute directly).
"""
import argparse
import timeit

import numpy as np

from cbdbid import _accel
from cbdbid.auction import AuctionEpisode, SimConfig
from cbdbid.bidding import BiddingParams
from cbdbid.kernels import clear_interval, monotone_ok


def _clear_case(rng, n):
    bids = rng.gamma(2.0, 1.0, n)
    comp = np.sort(rng.gamma(2.0, 1.0, (n, 2)), axis=1)
    return bids, comp[:, 1], comp[:, 0], 0.6 * bids.sum()


def _period(use_numba):
    _accel.USE_NUMBA = use_numba
    ep = AuctionEpisode.create(SimConfig(), 0, advertiser_seed=0)
    p = BiddingParams((0.02,))
    while not ep.done:
        ep.step(p)
    return ep.total_cost


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    saved = _accel.USE_NUMBA
    if not _accel.HAVE_NUMBA:
        print("numba not importable; only the numpy path exists")
        return
    rows = []
    for n in (150, 2000):
        case = _clear_case(rng, n)
        clear_interval(*case, use_numba=True)  # compile
        for flag in (True, False):
            t = timeit.timeit(lambda: clear_interval(*case, use_numba=flag), number=args.repeat)
            rows.append((f"clear_interval n={n}", "numba" if flag else "numpy", t / args.repeat))
    b = np.cumsum(-np.abs(rng.normal(size=(2000, 49))), axis=1) + 100.0
    tol = np.full(2000, 1e-4)
    monotone_ok(b, tol, use_numba=True)
    for flag in (True, False):
        t = timeit.timeit(lambda: monotone_ok(b, tol, use_numba=flag), number=args.repeat)
        rows.append(("monotone_ok 2000x49", "numba" if flag else "numpy", t / args.repeat))
    _period(True)
    for flag in (True, False):
        t = timeit.timeit(lambda: _period(flag), number=3)
        rows.append(("simulator period T=48", "numba" if flag else "numpy", t / 3))
    _accel.USE_NUMBA = saved
    print(f"{'case':28s} {'path':6s} {'seconds':>12s}")
    for name, path, sec in rows:
        print(f"{name:28s} {path:6s} {sec:12.6f}")


if __name__ == "__main__":
    main()
