import numpy as np
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from cbdbid import _accel
from cbdbid.kernels import clear_interval, monotone_ok

pos = st.floats(0, 10, allow_nan=False)


def same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a[:4], b[:4])) and a[4] == b[4]


@given(st.integers(0, 40).flatmap(lambda n: st.tuples(arrays(np.float64, n, elements=pos),
                                                       arrays(np.float64, n, elements=pos),
                                                       arrays(np.float64, n, elements=pos))),
       st.floats(0, 60))
def test_clear_interval_paths_agree_with_oracle(arrs, remaining):
    bids, a, b = arrs
    top, second = np.maximum(a, b), np.minimum(a, b)
    want = oracles.clear_interval(bids, top, second, remaining)
    for flag in (True, False):
        got = clear_interval(bids, top, second, remaining, use_numba=flag)
        assert np.array_equal(got[1], want[1])
        for g, w in zip((got[0], got[2], got[3]), (want[0], want[2], want[3])):
            assert np.allclose(g, w, rtol=0, atol=1e-9)
        assert abs(got[4] - want[4]) < 1e-9
        assert got[4] <= remaining + 1e-9


def test_clear_interval_numba_numpy_bit_identical(rng):
    for _ in range(100):
        n = int(rng.integers(0, 300))
        bids = rng.gamma(2.0, 1.0, n)
        comp = np.sort(rng.gamma(2.0, 1.0, (n, 2)), axis=1)
        rem = float(rng.uniform(0, bids.sum() + 1))
        assert same(clear_interval(bids, comp[:, 1], comp[:, 0], rem, use_numba=True),
                    clear_interval(bids, comp[:, 1], comp[:, 0], rem, use_numba=False))


@given(arrays(np.float64, (6, 9), elements=st.floats(-5, 100)), st.floats(0, 1))
def test_monotone_paths_agree_with_scan(b, tol):
    t = np.full(b.shape[0], tol)
    want = np.array([oracles.budget_valid(list(row), tol) for row in b])
    assert np.array_equal(monotone_ok(b, t, use_numba=True), want)
    assert np.array_equal(monotone_ok(b, t, use_numba=False), want)


def test_env_flag_selects_path(monkeypatch):
    monkeypatch.setenv(_accel.DISABLE_ENV, "1")
    assert not _accel._numba_wanted()
    monkeypatch.setenv(_accel.DISABLE_ENV, "0")
    assert _accel._numba_wanted()
    monkeypatch.setattr(_accel, "USE_NUMBA", False)
    b = np.array([[3.0, 2.0, 2.5]])
    assert not monotone_ok(b, np.zeros(1))[0]
