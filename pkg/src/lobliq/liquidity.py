"""Book profiles, exponential liquidity and liquidity imbalance."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .ingestion import DayTrace
from .lob import BookSide, _BookView
from .stats import InsufficientSampleError, exp_weights

DEFAULT_DEPTH = 100


class NormalizationError(ValueError):
    pass


def _check(delta: float, norm: float) -> None:
    if not norm > 0:
        raise NormalizationError(f"norm must be positive, got {norm!r}")
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta!r}")


def exponential_liquidity(profile, delta: float, norm: float) -> float:
    """sum_k V(k) exp(-k/delta) / norm, with k = 1 at the best."""
    _check(delta, norm)
    v = np.asarray(profile, dtype=float)
    return float(v @ exp_weights(delta, len(v)) / norm)


def exponential_liquidity_many(profiles, delta: float, norm: float) -> np.ndarray:
    """Row-wise :func:`exponential_liquidity` for a (windows x depth) matrix."""
    _check(delta, norm)
    p = np.asarray(profiles, dtype=float)
    return p @ exp_weights(delta, p.shape[1]) / norm


def liquidity_imbalance(l_bid, l_ask):
    """(L_B - L_A) / (L_B + L_A); nan where both sides are zero.

    Positive values mean a heavier bid side.  Works on scalars and arrays.
    """
    b = np.asarray(l_bid, dtype=float)
    a = np.asarray(l_ask, dtype=float)
    if np.any(b < 0) or np.any(a < 0):
        raise ValueError("liquidity values must be non-negative")
    tot = b + a
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(tot > 0, (b - a) / tot, np.nan)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class LiquiditySnapshot:
    timestamp: int
    delta: float
    N: int
    L_A: float
    L_B: float
    L_imb: float
    norm: float
    ask_empty: bool = False
    bid_empty: bool = False

    @property
    def imbalance_defined(self) -> bool:
        return not math.isnan(self.L_imb)


def liquidity_snapshot(book: _BookView, delta: float, norm: float, n: int = DEFAULT_DEPTH
                       ) -> LiquiditySnapshot:
    """Both sides' liquidity and the imbalance at one book state; empty sides give 0."""
    vals = {}
    empty = {}
    for side in (BookSide.ASK, BookSide.BID):
        empty[side] = book.is_empty(side)
        vals[side] = 0.0 if empty[side] else exponential_liquidity(book.side_profile(side, n), delta, norm)
    _check(delta, norm)
    la, lb = vals[BookSide.ASK], vals[BookSide.BID]
    return LiquiditySnapshot(book.last_update, delta, n, la, lb, liquidity_imbalance(lb, la), norm,
                             empty[BookSide.ASK], empty[BookSide.BID])


def _frame_weights(trace: DayTrace, sampling: str) -> np.ndarray:
    mask = trace.analysis_mask
    if sampling == "event":
        return mask.astype(float)
    if sampling == "wallclock":
        nxt = np.append(trace.t[1:], trace.session_length_us)
        start = np.maximum(trace.t, trace.analysis_start_us)
        return np.clip(np.minimum(nxt, trace.session_length_us) - start, 0, None) * mask
    raise ValueError(f"unknown sampling {sampling!r}")


def compute_side_norms(days: Sequence[DayTrace], n: int = DEFAULT_DEPTH,
                       sampling: str = "event") -> tuple[float, float]:
    """Average (ask, bid) volume within ``n`` ticks of the respective best.

    Averages run over the analysis-period book states, uniformly per
    operation (``sampling="event"``) or weighted by how long each state
    persisted (``"wallclock"``).  An empty side counts as zero volume.
    """
    tot_w = 0.0
    acc_a = acc_b = 0.0
    for trace in days:
        w = _frame_weights(trace, sampling)
        va = np.zeros(len(trace))
        vb = np.zeros(len(trace))
        first = int(np.argmax(w > 0)) if np.any(w > 0) else len(trace)
        for i, book in trace.iter_books():
            if i < first or not w[i]:
                continue
            va[i] = book.depth_volume(BookSide.ASK, n)
            vb[i] = book.depth_volume(BookSide.BID, n)
        tot_w += w.sum()
        acc_a += w @ va
        acc_b += w @ vb
    if tot_w == 0:
        raise InsufficientSampleError("no book states in the analysis period")
    return acc_a / tot_w, acc_b / tot_w


def compute_norm(days: Sequence[DayTrace], n: int = DEFAULT_DEPTH, sampling: str = "event") -> float:
    """Pooled normaliser: the mean of the two per-side averages."""
    a, b = compute_side_norms(days, n, sampling)
    return (a + b) / 2


@dataclass(frozen=True)
class ProfileAverage:
    side: BookSide
    mean_volume: np.ndarray
    sample_count: int
    conditioning: str
    se: Optional[np.ndarray] = None


CONDITIONINGS = ("unconditional", "pre_positive_event", "pre_negative_event")


def average_profile(days: Sequence[DayTrace], side: BookSide, conditioning: str = "unconditional",
                    events: Sequence = (), n: int = DEFAULT_DEPTH) -> ProfileAverage:
    """Mean side profile over all analysis-period states or over pre-event states.

    The pre-event state of an event is the book right after its trigger
    operation, i.e. at the start of the event window.  Snapshots where the
    side is empty are skipped.
    """
    if conditioning not in CONDITIONINGS:
        raise ValueError(f"unknown conditioning {conditioning!r}")
    acc = np.zeros(n)
    acc2 = np.zeros(n)
    count = 0
    if conditioning == "unconditional":
        for trace in days:
            mask = trace.analysis_mask
            for i, book in trace.iter_books():
                if mask[i] and not book.is_empty(side):
                    p = book.side_profile(side, n)
                    acc += p
                    acc2 += p.astype(float) ** 2
                    count += 1
    else:
        sign = 1 if conditioning == "pre_positive_event" else -1
        by_day = {tr.day: tr for tr in days}
        wanted: dict[int, list[int]] = {}
        for ev in events:
            if ev.sign == sign:
                wanted.setdefault(ev.day, []).append(ev.trigger_event_index)
        for day, idx in sorted(wanted.items()):
            states = by_day[day].states_at(idx)
            for i in idx:
                st = states[i]
                if st.is_empty(side):
                    continue
                p = st.side_profile(side, n)
                acc += p
                acc2 += p.astype(float) ** 2
                count += 1
    if count == 0:
        raise InsufficientSampleError(f"no qualifying snapshots for {conditioning}")
    mean = acc / count
    se = np.sqrt(np.clip(acc2 / count - mean ** 2, 0, None) / max(count - 1, 1)) if count > 1 else None
    return ProfileAverage(side, mean, count, conditioning, se)


@dataclass(frozen=True)
class LiquidityWindows:
    """Fixed-length windows tiling each session, with the book profiles at their start."""

    day: np.ndarray
    start_us: np.ndarray
    ask: np.ndarray
    bid: np.ndarray
    ask_empty: np.ndarray
    bid_empty: np.ndarray
    log_return: np.ndarray
    delta_t_us: int

    def __len__(self) -> int:
        return len(self.start_us)

    def select(self, mask) -> "LiquidityWindows":
        m = np.asarray(mask, dtype=bool)
        return LiquidityWindows(self.day[m], self.start_us[m], self.ask[m], self.bid[m],
                                self.ask_empty[m], self.bid_empty[m], self.log_return[m],
                                self.delta_t_us)

    def with_depth(self, n: int) -> "LiquidityWindows":
        return LiquidityWindows(self.day, self.start_us, self.ask[:, :n], self.bid[:, :n],
                                self.ask_empty, self.bid_empty, self.log_return, self.delta_t_us)


def window_profiles(days: Sequence[DayTrace], delta_t: float, n: int = DEFAULT_DEPTH
                    ) -> LiquidityWindows:
    """Tile every session's analysis period with windows of ``delta_t`` seconds.

    A window starting at T uses the book after the last operation stamped
    at or before T and the midprice return up to T + delta_t.  Windows with
    an undefined midprice at either end are dropped.
    """
    dt = int(round(delta_t * 1e6))
    if dt <= 0:
        raise ValueError("delta_t must be positive")
    days_l, starts_l, ask_l, bid_l, ae_l, be_l, ret_l = [], [], [], [], [], [], []
    for trace in days:
        starts = np.arange(trace.analysis_start_us, trace.session_length_us - dt + 1, dt, dtype=np.int64)
        i0 = trace.index_at(starts)
        i1 = trace.index_at(starts + dt)
        ok = i0 >= 0
        m0 = np.where(ok, trace.mid[np.maximum(i0, 0)], np.nan)
        m1 = np.where(ok, trace.mid[np.maximum(i1, 0)], np.nan)
        ok &= np.isfinite(m0) & np.isfinite(m1)
        starts, i0, m0, m1 = starts[ok], i0[ok], m0[ok], m1[ok]
        states = trace.states_at(i0)
        a = np.zeros((len(starts), n), dtype=np.int64)
        b = np.zeros((len(starts), n), dtype=np.int64)
        ae = np.zeros(len(starts), dtype=bool)
        be = np.zeros(len(starts), dtype=bool)
        for k, i in enumerate(i0):
            st = states[int(i)]
            # a defined midprice at the start implies both sides are populated, but guard anyway
            ae[k] = st.is_empty(BookSide.ASK)
            be[k] = st.is_empty(BookSide.BID)
            if not ae[k]:
                a[k] = st.side_profile(BookSide.ASK, n)
            if not be[k]:
                b[k] = st.side_profile(BookSide.BID, n)
        days_l.append(np.full(len(starts), trace.day))
        starts_l.append(starts)
        ask_l.append(a)
        bid_l.append(b)
        ae_l.append(ae)
        be_l.append(be)
        ret_l.append(np.log(m1 / m0))
    if not starts_l:
        return LiquidityWindows(np.zeros(0, int), np.zeros(0, np.int64), np.zeros((0, n)), np.zeros((0, n)),
                                np.zeros(0, bool), np.zeros(0, bool), np.zeros(0), dt)
    return LiquidityWindows(np.concatenate(days_l), np.concatenate(starts_l), np.concatenate(ask_l),
                            np.concatenate(bid_l), np.concatenate(ae_l), np.concatenate(be_l),
                            np.concatenate(ret_l), dt)


def window_liquidity(windows: LiquidityWindows, delta: float, norm: float
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(L_A, L_B, L_imb) for every window."""
    la = exponential_liquidity_many(windows.ask, delta, norm)
    lb = exponential_liquidity_many(windows.bid, delta, norm)
    return la, lb, liquidity_imbalance(lb, la)


def liquidity_snapshots(windows: LiquidityWindows, delta: float, norm: float) -> list[LiquiditySnapshot]:
    la, lb, li = window_liquidity(windows, delta, norm)
    n = windows.ask.shape[1]
    return [LiquiditySnapshot(int(t), delta, n, float(a), float(b), float(i), norm, bool(ae), bool(be))
            for t, a, b, i, ae, be in zip(windows.start_us, la, lb, li, windows.ask_empty, windows.bid_empty)]
