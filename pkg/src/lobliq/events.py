"""Large price fluctuations over fixed windows: absolute + relative filters, declustering."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import IO, Iterable, Optional, Sequence

import numpy as np

from .ingestion import DayTrace

logger = logging.getLogger(__name__)

US = 1_000_000


def seconds_to_us(s: float) -> int:
    return int(round(s * US))


@dataclass(frozen=True)
class DetectionPreset:
    delta_t: float
    abs_threshold: float
    vol_multiplier: float
    min_gap: float
    bucket_width: float


LARGE_SCALE = DetectionPreset(delta_t=900.0, abs_threshold=0.005, vol_multiplier=3.0,
                              min_gap=900.0, bucket_width=300.0)
SHORT_SCALE = DetectionPreset(delta_t=30.0, abs_threshold=0.003, vol_multiplier=6.0,
                              min_gap=90.0, bucket_width=60.0)
PRESETS = {"large_scale": LARGE_SCALE, "short_scale": SHORT_SCALE}


def default_bucket_width(delta_t: float) -> float:
    return 60.0 if delta_t <= 60 else 300.0


@dataclass(frozen=True)
class VolatilityProfile:
    """Average absolute window return per time-of-day bucket."""

    delta_t_us: int
    bucket_width_us: int
    sigma: np.ndarray
    counts: np.ndarray
    filled: np.ndarray  # True where the bucket had no samples and was borrowed from a neighbour
    statistic: str = "mean_abs"

    def bucket_of(self, t_us) -> np.ndarray:
        return np.clip(np.asarray(t_us, dtype=np.int64) // self.bucket_width_us, 0, len(self.sigma) - 1)

    def sigma_at(self, t_us):
        return self.sigma[self.bucket_of(t_us)]


@dataclass(frozen=True)
class LargeEvent:
    day: int
    window_start: int  # microseconds since session open
    delta_t: int  # microseconds
    log_return: float
    sign: int
    trigger_event_index: int

    @property
    def window_end(self) -> int:
        return self.window_start + self.delta_t


def window_returns(trace: DayTrace, delta_t_us: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of window-opening operations and their forward log midprice returns.

    Every analysis-period operation with a defined midprice opens a window
    ending at ``t + delta_t``; windows running past the close are skipped.
    """
    t = trace.t
    i = np.flatnonzero((t >= trace.analysis_start_us) & (t + delta_t_us <= trace.session_length_us)
                       & np.isfinite(trace.mid))
    j = np.searchsorted(t, t[i] + delta_t_us, side="right") - 1
    m1 = trace.mid[j]
    ok = np.isfinite(m1)
    i, j = i[ok], j[ok]
    return i, np.log(trace.mid[j] / trace.mid[i])


def compute_volatility_profile(days: Sequence[DayTrace], delta_t: float,
                               bucket_width: Optional[float] = None,
                               statistic: str = "mean_abs") -> VolatilityProfile:
    """Per-bucket average of |r| (or its standard deviation) over all days.

    Buckets tile the whole session from the open.  Buckets with no samples
    take the value of the nearest populated bucket and are flagged.
    """
    if not days:
        raise ValueError("need at least one session")
    dt = seconds_to_us(delta_t)
    bw = seconds_to_us(bucket_width if bucket_width is not None else default_bucket_width(delta_t))
    if dt <= 0 or bw <= 0:
        raise ValueError("delta_t and bucket_width must be positive")
    length = max(tr.session_length_us for tr in days)
    nb = -(-length // bw)
    sums = np.zeros(nb)
    sq = np.zeros(nb)
    signed = np.zeros(nb)
    counts = np.zeros(nb, dtype=np.int64)
    for tr in days:
        i, r = window_returns(tr, dt)
        b = np.clip(tr.t[i] // bw, 0, nb - 1)
        counts += np.bincount(b, minlength=nb)
        sums += np.bincount(b, weights=np.abs(r), minlength=nb)
        sq += np.bincount(b, weights=r * r, minlength=nb)
        signed += np.bincount(b, weights=r, minlength=nb)
    populated = counts > 0
    if not populated.any():
        raise ValueError("no window returns available to build a volatility profile")
    sigma = np.zeros(nb)
    c = counts[populated]
    if statistic == "mean_abs":
        sigma[populated] = sums[populated] / c
    elif statistic == "std":
        mean = signed[populated] / c
        sigma[populated] = np.sqrt(np.clip(sq[populated] / c - mean ** 2, 0, None))
    else:
        raise ValueError(f"unknown statistic {statistic!r}")
    filled = ~populated
    if filled.any():
        pop_idx = np.flatnonzero(populated)
        for k in np.flatnonzero(filled):
            nearest = pop_idx[np.argmin(np.abs(pop_idx - k))]
            sigma[k] = sigma[nearest]
        logger.info("%d of %d volatility buckets had no samples", int(filled.sum()), nb)
    return VolatilityProfile(dt, bw, sigma, counts, filled, statistic)


def detect_large_events(days: Sequence[DayTrace], profile: VolatilityProfile, delta_t: float,
                        x: float, n: float) -> list[LargeEvent]:
    """Windows whose |log return| exceeds both ``x`` and ``n`` times the bucket volatility.

    Triggers whose windows overlap the previous trigger's window form one
    cluster, reported once and anchored at its first trigger.
    """
    dt = seconds_to_us(delta_t)
    if dt != profile.delta_t_us:
        raise ValueError("volatility profile was computed for a different delta_t")
    out: list[LargeEvent] = []
    for tr in days:
        i, r = window_returns(tr, dt)
        absr = np.abs(r)
        hit = (absr > x) & (absr > n * profile.sigma_at(tr.t[i]))
        last_t = None
        for k in np.flatnonzero(hit):
            ti = int(tr.t[i[k]])
            if last_t is None or ti >= last_t + dt:
                out.append(LargeEvent(tr.day, ti, dt, float(r[k]), 1 if r[k] > 0 else -1, int(i[k])))
            last_t = ti
    return out


def decluster(events: Iterable[LargeEvent], min_gap: float) -> list[LargeEvent]:
    """Drop events starting less than ``min_gap`` seconds after a retained event of the same day."""
    gap = seconds_to_us(min_gap)
    kept: list[LargeEvent] = []
    for ev in sorted(events, key=lambda e: (e.day, e.window_start)):
        if kept and kept[-1].day == ev.day and ev.window_start - kept[-1].window_start < gap:
            continue
        kept.append(ev)
    return kept


EVENT_HEADER = ("window_start_us", "delta_t_s", "log_return", "sign", "trigger_index", "day")


def write_events(events: Sequence[LargeEvent], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(EVENT_HEADER)
    for ev in events:
        w.writerow([ev.window_start, repr(ev.delta_t / US), repr(ev.log_return),
                    "+" if ev.sign > 0 else "-", ev.trigger_event_index, ev.day])


def read_events(fh: IO[str]) -> list[LargeEvent]:
    rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or tuple(rows[0]) != EVENT_HEADER:
        raise ValueError("bad event file header")
    out = []
    for r in rows[1:]:
        out.append(LargeEvent(int(r[5]), int(r[0]), seconds_to_us(float(r[1])), float(r[2]),
                              1 if r[3] == "+" else -1, int(r[4])))
    return out


def time_of_day_histogram(events: Sequence[LargeEvent], start_us: int, end_us: int, n_bins: int
                          ) -> np.ndarray:
    edges = np.linspace(start_us, end_us, n_bins + 1)
    return np.histogram([e.window_start for e in events], bins=edges)[0]

