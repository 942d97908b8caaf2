"""Fitting and binning utilities for return/liquidity relations."""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, stats as sps

logger = logging.getLogger(__name__)

MIN_BIN_COUNT = 30


class FitError(ValueError):
    pass


class DomainError(ValueError):
    pass


class InsufficientSampleError(ValueError):
    pass


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    se_slope: float
    se_intercept: float
    r_squared: float
    p_value: float
    n_points: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FitResult:
    """Power law r = K * L**(-alpha)."""

    K: float
    alpha: float
    se_K: float
    se_alpha: float
    r_squared: float
    n_points: int
    p_value: float = float("nan")
    method: str = "loglog"

    def predict(self, L):
        return self.K * np.asarray(L, dtype=float) ** (-self.alpha)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ConditionalCurve:
    """Per-bin means; ``se`` is one standard error, ``error_bars`` twice that."""

    bin_centers: np.ndarray
    means: np.ndarray
    se: np.ndarray
    counts: np.ndarray
    edges: Optional[np.ndarray] = None

    @property
    def error_bars(self) -> np.ndarray:
        return 2 * self.se

    def __len__(self) -> int:
        return len(self.bin_centers)

    def to_dict(self) -> dict:
        return {
            "bin_centers": self.bin_centers.tolist(),
            "means": self.means.tolist(),
            "se": self.se.tolist(),
            "error_bars": self.error_bars.tolist(),
            "counts": self.counts.tolist(),
        }


@dataclass(frozen=True)
class SignFrequencies:
    bin_centers: np.ndarray
    positive: np.ndarray
    zero: np.ndarray
    negative: np.ndarray
    counts: np.ndarray
    n_positive: np.ndarray
    n_zero: np.ndarray
    n_negative: np.ndarray

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in
                ("bin_centers", "positive", "zero", "negative", "counts")}


def linear_fit(x, y) -> LinearFit:
    """Ordinary least squares y = slope * x + intercept."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d arrays of equal length")
    if len(x) < 3:
        raise FitError(f"need at least 3 points, got {len(x)}")
    if np.ptp(x) == 0:
        raise FitError("abscissa has zero variance")
    res = sps.linregress(x, y)
    r2 = res.rvalue ** 2
    if np.ptp(y) == 0:
        r2 = 1.0
    return LinearFit(float(res.slope), float(res.intercept), float(res.stderr),
                     float(res.intercept_stderr), float(r2), float(res.pvalue), len(x))


def power_law_fit(L, r, method: str = "loglog") -> FitResult:
    """Fit r = K * L**(-alpha).

    The default fits a straight line in (log L, log r) and reports R^2 in
    log space; ``method="nonlinear"`` refines with direct least squares on r
    and reports R^2 of r itself.
    """
    L = np.asarray(L, dtype=float)
    r = np.asarray(r, dtype=float)
    if L.shape != r.shape:
        raise ValueError("L and r must have equal length")
    if len(L) < 3:
        raise FitError(f"need at least 3 points, got {len(L)}")
    if np.any(~(L > 0)) or np.any(~(r > 0)):
        raise DomainError("power-law fit needs strictly positive coordinates")
    lf = linear_fit(np.log(L), np.log(r))
    K = float(np.exp(lf.intercept))
    fit = FitResult(K=K, alpha=-lf.slope, se_K=K * lf.se_intercept, se_alpha=lf.se_slope,
                    r_squared=lf.r_squared, n_points=len(L), p_value=lf.p_value, method="loglog")
    if method == "loglog":
        return fit
    if method != "nonlinear":
        raise ValueError(f"unknown method {method!r}")
    popt, pcov = optimize.curve_fit(lambda x, k, a: k * x ** (-a), L, r, p0=(fit.K, fit.alpha),
                                    maxfev=10_000)
    resid = r - popt[0] * L ** (-popt[1])
    ss_tot = np.sum((r - r.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    se = np.sqrt(np.diag(pcov))
    return FitResult(K=float(popt[0]), alpha=float(popt[1]), se_K=float(se[0]),
                     se_alpha=float(se[1]), r_squared=float(r2), n_points=len(L),
                     p_value=fit.p_value, method="nonlinear")


def _bin_stats(y: np.ndarray, which: np.ndarray, nb: int):
    counts = np.bincount(which, minlength=nb)
    sums = np.bincount(which, weights=y, minlength=nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts
        sq = np.bincount(which, weights=(y - means[which]) ** 2, minlength=nb)
        var = sq / (counts - 1)
        se = np.sqrt(var / counts)
    se[counts < 2] = np.nan
    se[(counts >= 2) & (sq == 0)] = 0.0
    return counts, means, se


def _merge_small(counts: np.ndarray, min_count: int) -> list[list[int]]:
    """Group consecutive bins so that every group holds at least ``min_count`` points."""
    groups: list[list[int]] = []
    cur: list[int] = []
    acc = 0
    for i, c in enumerate(counts):
        cur.append(i)
        acc += c
        if acc >= min_count:
            groups.append(cur)
            cur, acc = [], 0
    if cur:
        if groups:
            groups[-1].extend(cur)
        elif acc > 0:
            groups.append(cur)
    return groups


def log_binning(x, y, n_bins: int, min_count: int = MIN_BIN_COUNT) -> ConditionalCurve:
    """Mean of ``y`` in geometrically spaced bins of ``x``.

    Bins holding fewer than ``min_count`` points are merged with their
    right neighbour (the last one with its left neighbour).  Bin centres
    are geometric means of the merged edges.
    """
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(~(x > 0)):
        raise DomainError("log binning needs strictly positive abscissae")
    if len(x) == 0:
        raise ValueError("no points to bin")
    lo, hi = x.min(), x.max()
    if lo == hi:
        hi = lo * (1 + 1e-12)
    edges = np.geomspace(lo, hi, n_bins + 1)
    which = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(which, minlength=n_bins)
    groups = _merge_small(counts, max(min_count, 1))
    remap = np.empty(n_bins, dtype=np.int64)
    new_edges = [edges[groups[0][0]]]
    for g, members in enumerate(groups):
        remap[members] = g
        new_edges.append(edges[members[-1] + 1])
    new_edges = np.asarray(new_edges)
    c, m, se = _bin_stats(y, remap[which], len(groups))
    centers = np.sqrt(new_edges[:-1] * new_edges[1:])
    return ConditionalCurve(centers, m, se, c, new_edges)


def equal_count_binning(x, y, n_bins: int = 20) -> ConditionalCurve:
    """Bins holding (nearly) equal numbers of points, ordered by ``x``; centres are mean ``x``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    n = len(x)
    if n == 0:
        raise ValueError("no points to bin")
    n_bins = min(n_bins, n)
    order = np.argsort(x, kind="stable")
    which = np.empty(n, dtype=np.int64)
    which[order] = (np.arange(n) * n_bins) // n
    c, m, se = _bin_stats(y, which, n_bins)
    _, cx, _ = _bin_stats(x, which, n_bins)
    edges = np.concatenate([[x[order[0]]], [x[order[(k * n) // n_bins]] for k in range(1, n_bins)],
                            [x[order[-1]]]])
    return ConditionalCurve(cx, m, se, c, edges)


def exp_weights(delta: float, n: int) -> np.ndarray:
    return np.exp(-np.arange(1, n + 1) / delta)


@dataclass(frozen=True)
class DeltaScan:
    deltas: np.ndarray
    r_squared: np.ndarray
    fits: tuple
    best_delta: Optional[float]

    def to_rows(self) -> list[tuple[float, float]]:
        return list(zip(self.deltas.tolist(), self.r_squared.tolist()))


def delta_scan(ask_profiles, bid_profiles, returns, delta_values: Sequence[float],
               event_sign: int = 1, norm: float = 1.0, workers: int = 1) -> DeltaScan:
    """R^2 of the power-law fit of |return| against one-sided exponential liquidity, per delta.

    Positive ``event_sign`` uses windows with r > 0 and the ask side;
    negative uses r < 0 and the bid side.  A delta whose fit fails is
    reported with R^2 = nan.
    """
    if not len(delta_values):
        raise ValueError("delta_values is empty")
    if any(d <= 0 for d in delta_values):
        raise ValueError("delta values must be positive")
    if norm <= 0:
        raise ValueError("norm must be positive")
    returns = np.asarray(returns, dtype=float)
    if event_sign > 0:
        sel = returns > 0
        prof = np.asarray(ask_profiles, dtype=float)[sel]
    else:
        sel = returns < 0
        prof = np.asarray(bid_profiles, dtype=float)[sel]
    mag = np.abs(returns[sel])
    n = prof.shape[1] if prof.ndim == 2 else 0

    def one(delta):
        L = prof @ exp_weights(delta, n) / norm
        ok = L > 0
        try:
            return power_law_fit(L[ok], mag[ok])
        except (FitError, DomainError) as exc:
            logger.info("delta=%s fit failed: %s", delta, exc)
            return None

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            fits = list(pool.map(one, delta_values))
    else:
        fits = [one(d) for d in delta_values]
    r2 = np.array([f.r_squared if f is not None else np.nan for f in fits])
    best = None
    if np.any(np.isfinite(r2)):
        best = float(np.asarray(delta_values, dtype=float)[np.nanargmax(r2)])
    return DeltaScan(np.asarray(delta_values, dtype=float), r2, tuple(fits), best)


def imbalance_conditionals(l_imb, returns, n_bins: int = 20, min_count: int = MIN_BIN_COUNT
                           ) -> tuple[ConditionalCurve, SignFrequencies]:
    """Mean return and return-sign frequencies in equal-width bins of imbalance over [-1, 1].

    Snapshots with undefined imbalance (nan) are ignored.  Bins with fewer
    than ``min_count`` samples are dropped with a warning.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    l_imb = np.asarray(l_imb, dtype=float)
    returns = np.asarray(returns, dtype=float)
    ok = np.isfinite(l_imb) & np.isfinite(returns)
    l_imb, returns = l_imb[ok], returns[ok]
    if np.any(np.abs(l_imb) > 1):
        raise DomainError("liquidity imbalance outside [-1, 1]")
    which = np.clip(np.floor((l_imb + 1) / 2 * n_bins).astype(np.int64), 0, n_bins - 1)
    counts, means, se = _bin_stats(returns, which, n_bins)
    n_pos = np.bincount(which, weights=returns > 0, minlength=n_bins).astype(np.int64)
    n_neg = np.bincount(which, weights=returns < 0, minlength=n_bins).astype(np.int64)
    n_zero = counts - n_pos - n_neg
    keep = counts >= max(min_count, 1)
    if not keep.all():
        warnings.warn(f"{int((~keep).sum())} of {n_bins} imbalance bins dropped "
                      f"(fewer than {min_count} samples)", RuntimeWarning, stacklevel=2)
    edges = np.linspace(-1.0, 1.0, n_bins + 1)
    centers = (edges[:-1] + edges[1:]) / 2
    c = counts[keep]
    curve = ConditionalCurve(centers[keep], means[keep], se[keep], c)
    freqs = SignFrequencies(centers[keep], n_pos[keep] / c, n_zero[keep] / c, n_neg[keep] / c, c,
                            n_pos[keep], n_zero[keep], n_neg[keep])
    return curve, freqs
