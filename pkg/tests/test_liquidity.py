import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lobliq.events import compute_volatility_profile, decluster, detect_large_events
from lobliq.ingestion import DayTrace
from lobliq.liquidity import (LiquidityWindows, NormalizationError, average_profile, compute_norm,
                              compute_side_norms, exponential_liquidity, exponential_liquidity_many,
                              liquidity_imbalance, liquidity_snapshot, window_liquidity,
                              window_profiles)
from lobliq.lob import BookSide, Op, OrderBook, OrderEvent, Side

from oracles import direct_liquidity

US = 1_000_000


def ev(op, side, price, vol, t_s):
    return OrderEvent(Op(op), Side(side), price, vol, int(t_s * US))


class TestExponentialLiquidity:
    def test_zero_profile(self):
        assert exponential_liquidity(np.zeros(10), 5, 100) == 0

    def test_single_term(self):
        assert exponential_liquidity([250, 0, 0, 0], 5, 250) == pytest.approx(math.exp(-0.2), rel=1e-15)

    def test_three_terms(self):
        want = (10 * math.exp(-0.5) + 20 * math.exp(-1) + 30 * math.exp(-1.5)) / 60
        assert exponential_liquidity([10, 20, 30, 0, 0], 2, 60) == pytest.approx(want, rel=1e-14)

    @pytest.mark.parametrize("norm", [0, -1.0])
    def test_bad_norm(self, norm):
        with pytest.raises(NormalizationError):
            exponential_liquidity([1, 2], 5, norm)

    def test_many_matches_single(self):
        rng = np.random.default_rng(0)
        p = rng.integers(0, 500, (50, 30))
        got = exponential_liquidity_many(p, 3.5, 700.0)
        assert np.allclose(got, [exponential_liquidity(row, 3.5, 700.0) for row in p], rtol=1e-14)

    def test_limits(self):
        # small-support profile: the large-delta deviation is about mean distance / delta
        prof = np.array([120.0, 0, 0])
        assert exponential_liquidity(prof, 1e6, 40.0) == pytest.approx(3.0, rel=1e-6)
        assert exponential_liquidity(prof, 1e-3, 40.0) == 0.0
        wide = np.arange(1, 101, dtype=float)
        limit = wide.sum() / 40.0
        k_mean = (np.arange(1, 101) * wide).sum() / wide.sum()
        got = exponential_liquidity(wide, 1e6, 40.0)
        assert abs(got - limit) / limit <= 1.01 * k_mean / 1e6
        assert exponential_liquidity(wide, 1e-3, 40.0) < 1e-300


profiles = arrays(np.int64, st.integers(1, 40), elements=st.integers(0, 10**6))


@settings(max_examples=100, deadline=None)
@given(profiles, st.floats(0.5, 50), st.floats(1, 1e4))
def test_matches_direct_sum(p, delta, norm):
    assert exponential_liquidity(p, delta, norm) == pytest.approx(direct_liquidity(p, delta, norm),
                                                                  rel=1e-12, abs=1e-300)


@settings(max_examples=100, deadline=None)
@given(profiles, st.floats(0.5, 50), st.integers(0, 39), st.integers(1, 1000))
def test_monotone_in_volume(p, delta, k, add):
    q = p.copy()
    q[k % len(q)] += add
    assert exponential_liquidity(q, delta, 1.0) >= exponential_liquidity(p, delta, 1.0)


@settings(max_examples=100, deadline=None)
@given(profiles, st.floats(0.5, 20), st.floats(1.1, 3.0))
def test_increasing_in_delta(p, delta, factor):
    a = exponential_liquidity(p, delta, 1.0)
    b = exponential_liquidity(p, delta * factor, 1.0)
    if p[1:].any():
        assert b > a
    else:
        assert b >= a


@settings(max_examples=100, deadline=None)
@given(profiles, st.floats(0.5, 20), st.sampled_from([2.0, 0.5, 4.0, 0.25]))
def test_scale_covariance(p, delta, c):
    # power-of-two scaling keeps the floating-point products exact
    assert exponential_liquidity(p * c, delta, 37.0 * c) == exponential_liquidity(p, delta, 37.0)


class TestImbalance:
    @pytest.mark.parametrize("lb,la,want", [(2.0, 2.0, 0.0), (1.0, 0.0, 1.0), (3.0, 1.0, 0.5),
                                            (0.0, 4.0, -1.0)])
    def test_examples(self, lb, la, want):
        assert liquidity_imbalance(lb, la) == want

    def test_both_zero_is_nan(self):
        assert math.isnan(liquidity_imbalance(0.0, 0.0))

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 1e12), st.floats(0, 1e12))
    def test_antisymmetric_and_bounded(self, lb, la):
        a, b = liquidity_imbalance(lb, la), liquidity_imbalance(la, lb)
        if lb + la > 0:
            assert a == -b
            assert -1 <= a <= 1


def static_day(ask, bid, n_filler, wallclock_gaps=False):
    """Book built at t=0; later operations only touch a price far outside the measured depth."""
    events = [ev("LO", "S", p, v, 0) for p, v in ask] + [ev("LO", "B", p, v, 0) for p, v in bid]
    far = min(p for p, _ in bid) - 500
    t = 1.0
    for k in range(n_filler):
        events.append(ev("LO", "B", far, 1, t))
        t += 1.0 if not wallclock_gaps else 1.0 + (k % 7)
        events.append(ev("C", "B", far, 1, t))
        t += 1.0
    return DayTrace(events, session_length_us=int((t + 1) * US), analysis_start_us=US // 2)


class TestNorm:
    def test_static_book(self):
        day = static_day([(1001, 200), (1003, 300)], [(999, 100), (998, 200)], 20)
        assert compute_norm([day], 100) == pytest.approx(400.0)
        assert compute_side_norms([day], 100) == pytest.approx((500.0, 300.0))

    def test_single_side_single_snapshot(self):
        day = DayTrace([ev("LO", "S", 1001, 80, 0)], session_length_us=US, analysis_start_us=0)
        assert compute_norm([day], 100) == pytest.approx(40.0)

    @pytest.mark.parametrize("sampling", ["event", "wallclock"])
    def test_sampling_frequency_invariance(self, sampling):
        ask, bid = [(1001, 70), (1002, 30)], [(999, 50)]
        a = compute_norm([static_day(ask, bid, 5)], 50, sampling)
        b = compute_norm([static_day(ask, bid, 200, wallclock_gaps=True)], 50, sampling)
        assert a == pytest.approx(b) == pytest.approx(75.0)  # (100 + 50) / 2


def test_snapshot_values():
    b = OrderBook()
    for e in (ev("LO", "S", 1001, 100, 0), ev("LO", "B", 999, 300, 0)):
        b.apply(e)
    snap = liquidity_snapshot(b, 5, 100.0, 10)
    assert snap.L_A == pytest.approx(math.exp(-0.2))
    assert snap.L_B == pytest.approx(3 * math.exp(-0.2))
    assert snap.L_imb == pytest.approx(0.5)


def test_average_profile_static_book():
    day = static_day([(1001, 20), (1003, 30)], [(999, 5)], 10)
    pa = average_profile([day], BookSide.ASK, n=5)
    assert pa.mean_volume.tolist() == [20, 0, 30, 0, 0]


def halving_stream(n_cycles=12, period=1800):
    """Full book, with the ask side halved 40 s before each upward jump and restored after."""
    asks = [(1001 + k, 100) for k in range(20)]
    bids = [(999 - k, 100) for k in range(20)]
    events = [ev("LO", "S", p, v, 0) for p, v in asks] + [ev("LO", "B", p, v, 0) for p, v in bids]
    jumps = [period * (c + 1) for c in range(n_cycles)]
    actions = {}
    for j in jumps:
        actions[j - 40] = [ev("C", "S", p, 50, j - 40) for p, _ in asks]
        actions[j] = [ev("MO", "B", None, 160, j)]
        # restore: drop what is left, lay the original asks down again
        actions[j + 60] = "restore"
    far = 700
    end = jumps[-1] + period
    t = 1
    live = None
    while t < end:
        act = actions.get(t)
        if act == "restore":
            book = OrderBook()
            for e in events:
                book.apply(e)
            for p, v in book.levels(BookSide.ASK):
                events.append(ev("C", "S", p, v, t))
            events.extend(ev("LO", "S", p, v, t) for p, v in asks)
        elif act:
            events.extend(act)
        else:
            events.append(ev("LO", "B", far, 1, t) if live is None else ev("C", "B", far, 1, t))
            live = None if live else True
        t += 1
    return DayTrace(events, session_length_us=end * US, analysis_start_us=0)


def test_pre_event_profile_reflects_halving():
    day = halving_stream()
    prof = compute_volatility_profile([day], 30, 600)
    evs = decluster(detect_large_events([day], prof, 30, 0.001, 3), 90)
    pos = [e for e in evs if e.sign > 0]
    assert len(pos) == 12
    n = 10
    cond_a = average_profile([day], BookSide.ASK, "pre_positive_event", evs, n)
    unc_a = average_profile([day], BookSide.ASK, "unconditional", n=n)
    ratio = cond_a.mean_volume[:5] / unc_a.mean_volume[:5]
    assert np.allclose(ratio, 0.5, atol=0.05)
    cond_b = average_profile([day], BookSide.BID, "pre_positive_event", evs, n)
    unc_b = average_profile([day], BookSide.BID, "unconditional", n=n)
    assert np.allclose(cond_b.mean_volume, unc_b.mean_volume, rtol=0.02)


def test_window_profiles_and_liquidity():
    day = static_day([(1001, 10), (1002, 20)], [(999, 40)], 200)
    w = window_profiles([day], 30, 4)
    assert len(w) > 0
    assert (w.ask[0] == [10, 20, 0, 0]).all()
    assert (w.bid[0] == [40, 0, 0, 0]).all()
    assert np.all(w.log_return == 0)
    la, lb, li = window_liquidity(w, 5, 10.0)
    assert la[0] == pytest.approx((10 * math.exp(-0.2) + 20 * math.exp(-0.4)) / 10)
    assert li[0] == pytest.approx((lb[0] - la[0]) / (lb[0] + la[0]))
    assert isinstance(w.select(np.arange(len(w)) < 3), LiquidityWindows)
