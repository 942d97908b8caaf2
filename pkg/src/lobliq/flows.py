"""Relative order flows around large events and the LO-versus-MO response fit."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import IO, Optional, Sequence

import numpy as np

from .events import LargeEvent, seconds_to_us
from .ingestion import DayTrace, SIDE_COLUMNS
from .lob import BookSide
from .stats import (ConditionalCurve, InsufficientSampleError, LinearFit, equal_count_binning,
                    linear_fit)

OPS = ("LO", "MO", "C")


@dataclass(frozen=True)
class FlowRecord:
    subinterval_start: int
    Q_LOS: int
    Q_MOB: int
    Q_CS: int
    Q_LOB: int
    Q_MOS: int
    Q_CB: int


def flow_records(trace: DayTrace, start_us: int, width_us: int, count: int,
                 at_best_only: bool = False) -> list[FlowRecord]:
    starts = start_us + width_us * np.arange(count, dtype=np.int64)
    sums = trace.window_sums(starts, starts + width_us, best_only=at_best_only)
    return [FlowRecord(int(s), *map(int, row)) for s, row in zip(starts, sums)]


def _ratios(vols: np.ndarray) -> np.ndarray:
    """Per-row shares of the three operations; rows with no volume become nan."""
    tot = vols.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(tot > 0, vols / np.where(tot > 0, tot, 1), np.nan)


def _mean_se(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    counts = np.sum(np.isfinite(samples), axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.nansum(samples, axis=0) / counts
        dev = np.where(np.isfinite(samples), samples - mean, 0.0)
        var = np.sum(dev ** 2, axis=0) / (counts - 1)
        se = np.sqrt(var / counts)
    se = np.where(counts > 1, se, np.nan)
    return mean, se, counts


@dataclass(frozen=True)
class FlowCurve:
    """Mean relative flows at fixed offsets before the end of the events.

    ``samples`` has shape (events, offsets, 3) with the per-event shares of
    LO, MO and C (nan where the subinterval had no volume).
    """

    side: BookSide
    event_sign: int
    offsets: np.ndarray
    r_LO: np.ndarray
    r_MO: np.ndarray
    r_C: np.ndarray
    se_LO: np.ndarray
    se_MO: np.ndarray
    se_C: np.ndarray
    counts: np.ndarray
    baseline_LO: float
    baseline_MO: float
    baseline_C: float
    n_events: int
    samples: np.ndarray
    at_best_only: bool = True

    @property
    def baselines(self) -> dict[str, float]:
        return {"LO": self.baseline_LO, "MO": self.baseline_MO, "C": self.baseline_C}

    def segment(self, lo_s: float, hi_s: float) -> dict[str, tuple[float, float, int]]:
        """Across-event mean and standard error of each event's average share over offsets in [lo_s, hi_s)."""
        sel = (self.offsets >= lo_s) & (self.offsets < hi_s)
        out = {}
        for k, op in enumerate(OPS):
            with np.errstate(invalid="ignore"):
                per_event = np.nanmean(self.samples[:, sel, k], axis=1) if sel.any() else np.full(len(self.samples), np.nan)
            per_event = per_event[np.isfinite(per_event)]
            n = len(per_event)
            mean = float(per_event.mean()) if n else float("nan")
            se = float(per_event.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
            out[op] = (mean, se, n)
        return out

    def write_csv(self, fh: IO[str], extra: Optional[dict] = None) -> None:
        header = {"side": self.side.value, "event_sign": self.event_sign, "n_events": self.n_events,
                  "at_best_only": self.at_best_only, "baseline_LO": self.baseline_LO,
                  "baseline_MO": self.baseline_MO, "baseline_C": self.baseline_C}
        header.update(extra or {})
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["offset_s", "r_LO", "r_MO", "r_C", "se_LO", "se_MO", "se_C"])
        for row in zip(self.offsets, self.r_LO, self.r_MO, self.r_C, self.se_LO, self.se_MO, self.se_C):
            w.writerow([repr(float(v)) for v in row])


def baseline_flows(days: Sequence[DayTrace], side: BookSide, at_best_only: bool = True,
                   subinterval: float = 30.0) -> tuple[np.ndarray, np.ndarray]:
    """Average relative flows (LO, MO, C) over subintervals tiling every session, with standard errors."""
    sub = seconds_to_us(subinterval)
    cols = list(SIDE_COLUMNS[side])
    parts = []
    for tr in days:
        starts = np.arange(tr.analysis_start_us, tr.session_length_us - sub + 1, sub, dtype=np.int64)
        parts.append(_ratios(tr.window_sums(starts, starts + sub, at_best_only)[:, cols].astype(float)))
    samples = np.concatenate(parts) if parts else np.zeros((0, 3))
    mean, se, _ = _mean_se(samples)
    return mean, se


def relative_flow_curve(days: Sequence[DayTrace], events: Sequence[LargeEvent], side: BookSide,
                        event_sign: int, at_best_only: bool = True, range_s: float = 3600.0,
                        subinterval: float = 30.0, min_events: int = 5, pooled: bool = False
                        ) -> FlowCurve:
    """Shares of LO, MO and C volume on one book side in subintervals before each event's end.

    For the ask side the shares are Q_LOS, Q_MOB and Q_CS over their sum;
    the bid side uses Q_LOB, Q_MOS and Q_CB.  Shares are computed per
    subinterval and averaged across events at fixed offset; with
    ``pooled=True`` volumes are summed across events first (no standard
    errors then).
    """
    rng_us = seconds_to_us(range_s)
    sub = seconds_to_us(subinterval)
    if sub <= 0 or rng_us % sub:
        raise ValueError("range must be a positive multiple of the subinterval")
    k = rng_us // sub
    cols = list(SIDE_COLUMNS[side])
    by_day = {tr.day: tr for tr in days}
    chosen = [ev for ev in events if ev.sign == event_sign]
    if len(chosen) < max(min_events, 1):
        raise InsufficientSampleError(
            f"{len(chosen)} events with sign {event_sign:+d}, need {min_events}")
    offsets_us = -rng_us + sub * np.arange(k, dtype=np.int64)
    vols = np.zeros((len(chosen), k, 3))
    for e, ev in enumerate(chosen):
        starts = ev.window_end + offsets_us
        vols[e] = by_day[ev.day].window_sums(starts, starts + sub, at_best_only)[:, cols]
    samples = _ratios(vols)
    if pooled:
        mean = _ratios(vols.sum(axis=0))
        se = np.full_like(mean, np.nan)
        counts = np.sum(np.isfinite(samples[..., 0]), axis=0)
    else:
        mean, se, counts3 = _mean_se(samples)
        counts = counts3[:, 0]
    base, _ = baseline_flows(days, side, at_best_only, subinterval)
    mid = (offsets_us + sub / 2) / 1e6
    return FlowCurve(side, event_sign, mid, mean[:, 0], mean[:, 1], mean[:, 2], se[:, 0], se[:, 1],
                     se[:, 2], counts, float(base[0]), float(base[1]), float(base[2]), len(chosen),
                     samples, at_best_only)


@dataclass(frozen=True)
class ResponseFit:
    """Linear fit Q_LO = a * Q_MO + b on one side, plus an equal-count binned curve."""

    side: BookSide
    condition: str
    linear: LinearFit
    binned: ConditionalCurve
    q_mo: np.ndarray
    q_lo: np.ndarray

    @property
    def a(self) -> float:
        return self.linear.slope

    @property
    def b(self) -> float:
        return self.linear.intercept


CONDITIONS = ("all", "positive_events", "negative_events")


def response_windows(days: Sequence[DayTrace], delta_t: float, condition: str, side: BookSide,
                     events: Sequence[LargeEvent] = (), at_best_only: bool = True
                     ) -> tuple[np.ndarray, np.ndarray]:
    """(Q_MO, Q_LO) of the same window for the selected windows of one side."""
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}")
    dt = seconds_to_us(delta_t)
    lo_col, mo_col, _ = SIDE_COLUMNS[side]
    rows = []
    if condition == "all":
        for tr in days:
            starts = np.arange(tr.analysis_start_us, tr.session_length_us - dt + 1, dt, dtype=np.int64)
            rows.append(tr.window_sums(starts, starts + dt, at_best_only))
    else:
        sign = 1 if condition == "positive_events" else -1
        by_day = {tr.day: tr for tr in days}
        for ev in events:
            if ev.sign != sign:
                continue
            if ev.delta_t != dt:
                raise ValueError("event windows do not match delta_t")
            rows.append(by_day[ev.day].window_sums([ev.window_start], [ev.window_end], at_best_only))
    sums = np.concatenate(rows) if rows else np.zeros((0, 6))
    return sums[:, mo_col].astype(float), sums[:, lo_col].astype(float)


def response_fit(days: Sequence[DayTrace], delta_t: float, condition: str, side: BookSide,
                 events: Sequence[LargeEvent] = (), at_best_only: bool = True,
                 n_bins: int = 20) -> ResponseFit:
    """Least-squares Q_LOS = a Q_MOB + b (ask) or Q_LOB = a Q_MOS + b (bid).

    ``condition="all"`` tiles the sessions with ``delta_t`` windows; the
    event conditions use the windows of the given events of that sign.
    """
    q_mo, q_lo = response_windows(days, delta_t, condition, side, events, at_best_only)
    lin = linear_fit(q_mo, q_lo)
    binned = equal_count_binning(q_mo, q_lo, n_bins)
    return ResponseFit(side, condition, lin, binned, q_mo, q_lo)
