"""Synthetic order-message streams with injectable liquidity episodes.

Baseline flow: per book side, limit orders arrive as a Poisson process and
are placed a geometric number of ticks from the opposite best; market
orders arrive as a Poisson process; every resting level is cancelled
(partially) at a constant per-level rate.  Volumes are lognormal.  Each
market order triggers a proportional "latent liquidity" limit order at the
best of the side it hit, with ratio ``resilience``.

Episodes perturb this:

* ``mo_flow_imbalance`` on side S multiplies the market-order rate against
  S by ``intensity`` and switches off the latent response on S, while the
  opposite (pressing) side responds ``pressing_boost`` times more.
* ``depletion`` on side S cancels the volume near S's best down by a factor
  ``intensity`` when the episode starts and scales near-best limit orders
  on S by the same factor while it lasts.

:func:`plant_return_rule` builds a different kind of stream in which the
book is redrawn before every window and the midprice return over the
window follows a prescribed rule of the book's liquidity.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union

import numpy as np

from .ingestion import US, DayTrace, SessionConfig, serialize_messages
from .liquidity import compute_norm, exponential_liquidity, liquidity_imbalance
from .lob import BookSide, Op, OrderBook, OrderEvent, Side

EPISODE_KINDS = ("mo_flow_imbalance", "depletion")


class ConfigError(ValueError):
    pass


class FeasibilityError(ValueError):
    pass


@dataclass(frozen=True)
class FlowRates:
    """Per book side: LO and MO arrivals per second, cancellations per resting level per second."""

    lo: float = 0.6
    mo: float = 0.15
    c: float = 0.02


@dataclass(frozen=True)
class Episode:
    start: float
    duration: float
    kind: str
    side: str  # "ask" or "bid": the side under pressure / being depleted
    intensity: float

    @property
    def end(self) -> float:
        return self.start + self.duration

    @property
    def book_side(self) -> BookSide:
        return BookSide(self.side)


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    session_length: float = 8.5 * 3600
    open_skip: float = 1800.0
    tick_size: float = 0.01
    initial_mid: int = 2000
    rates: FlowRates = FlowRates()
    placement_p: float = 0.25
    max_distance: int = 100
    volume_mu: float = math.log(100)
    volume_sigma: float = 0.7
    resilience: float = 0.6
    pressing_boost: float = 2.0
    depletion_depth: int = 10
    # slow activity modulation: all rates share a lognormal factor per block
    activity_sigma: float = 0.5
    activity_block: float = 900.0
    episodes: tuple = ()
    episode_jitter: float = 0.0  # per-day uniform shift of episode starts, seconds
    # planted-rule streams
    plant_window: float = 30.0
    plant_depth: int = 40
    plant_fill: float = 0.6
    plant_tilt: float = 0.8
    plant_jitter: float = 0.3
    norm_depth: int = 100

    def __post_init__(self):
        r = self.rates
        if min(r.lo, r.mo, r.c) < 0:
            raise ConfigError("rates must be non-negative")
        if self.session_length <= 0 or self.open_skip < 0:
            raise ConfigError("session_length must be positive and open_skip non-negative")
        if not 0 < self.placement_p <= 1:
            raise ConfigError("placement_p must be in (0, 1]")
        if self.max_distance < 1:
            raise ConfigError("max_distance must be >= 1")
        if self.initial_mid <= self.max_distance:
            raise ConfigError("initial_mid must exceed max_distance")
        if self.resilience < 0 or self.pressing_boost < 0:
            raise ConfigError("resilience and pressing_boost must be non-negative")
        if not 0 < self.plant_fill <= 1 or self.plant_depth < 1:
            raise ConfigError("bad planted profile parameters")
        if self.activity_sigma < 0 or self.activity_block <= 0:
            raise ConfigError("activity_sigma must be non-negative and activity_block positive")
        if self.episode_jitter < 0:
            raise ConfigError("episode_jitter must be non-negative")
        if not 0 <= self.plant_jitter <= 1:
            raise ConfigError("plant_jitter must be in [0, 1]")
        for ep in self.episodes:
            if ep.kind not in EPISODE_KINDS:
                raise ConfigError(f"unknown episode kind {ep.kind!r}")
            if ep.side not in ("ask", "bid"):
                raise ConfigError(f"episode side must be 'ask' or 'bid', got {ep.side!r}")
            if ep.intensity <= 0:
                raise ConfigError("episode intensity must be positive")
            if ep.start < 0 or ep.duration <= 0 or ep.end > self.session_length:
                raise ConfigError(f"episode {ep} does not fit in the session")

    def session(self) -> SessionConfig:
        return SessionConfig.from_length(self.session_length, self.open_skip, self.tick_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["episodes"] = [asdict(e) for e in self.episodes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator settings: {sorted(unknown)}")
        if "rates" in d and isinstance(d["rates"], dict):
            d["rates"] = FlowRates(**d["rates"])
        if "episodes" in d:
            d["episodes"] = tuple(e if isinstance(e, Episode) else Episode(**e) for e in d["episodes"])
        return cls(**d)


def load_generator_config(path: Union[str, os.PathLike]) -> GeneratorConfig:
    """Read a generator config from a .json or .toml file."""
    p = Path(path)
    if p.suffix == ".toml":
        import tomli
        with open(p, "rb") as fh:
            data = tomli.load(fh)
    else:
        data = json.loads(p.read_text(encoding="utf-8"))
    return GeneratorConfig.from_dict(data)


def day_rng(seed: int, day: int) -> np.random.Generator:
    """Counter-based stream for one day: Philox keyed by (seed, day)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(day,))))


class _Emitter:
    def __init__(self, tick_size: float):
        self.book = OrderBook(tick_size, strict=True)
        self.events: list[OrderEvent] = []

    def emit(self, op: Op, side: Side, price: Optional[int], volume: int, t_us: int):
        ev = OrderEvent(op, side, price, int(volume), int(t_us))
        delta = self.book.apply(ev)
        self.events.append(ev)
        return delta


def day_episodes(cfg: GeneratorConfig, day: int) -> tuple:
    """The configured episodes, shifted for ``day`` when ``episode_jitter`` is set.

    Shifts come from their own stream so that they do not disturb the flow
    draws, and are clipped to keep every episode inside the session.
    """
    if not cfg.episode_jitter or not cfg.episodes:
        return tuple(cfg.episodes)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed, spawn_key=(day, 1))))
    out = []
    for ep in cfg.episodes:
        start = ep.start + rng.uniform(-cfg.episode_jitter, cfg.episode_jitter)
        start = min(max(start, 0.0), cfg.session_length - ep.duration)
        out.append(replace(ep, start=round(start, 6)))
    return tuple(out)


def activity_factors(cfg: GeneratorConfig, day: int) -> np.ndarray:
    """Mean-one lognormal rate multipliers, one per ``activity_block`` of the session."""
    n = max(1, math.ceil(cfg.session_length / cfg.activity_block))
    if not cfg.activity_sigma:
        return np.ones(n)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed, spawn_key=(day, 2))))
    s = cfg.activity_sigma
    return np.exp(s * rng.standard_normal(n) - s * s / 2)


def _volume(rng, cfg: GeneratorConfig) -> int:
    return max(1, int(round(math.exp(cfg.volume_mu + cfg.volume_sigma * rng.standard_normal()))))


def generate_events(cfg: GeneratorConfig, day: int = 0) -> list[OrderEvent]:
    """One session of baseline flow with the configured episodes."""
    rng = day_rng(cfg.seed, day)
    em = _Emitter(cfg.tick_size)
    book = em.book
    rates = cfg.rates
    T = cfg.session_length
    episodes = day_episodes(cfg, day)
    activity = activity_factors(cfg, day)
    blocks = [k * cfg.activity_block for k in range(1, len(activity))]
    boundaries = sorted({b for ep in episodes for b in (ep.start, ep.end) if 0 < b < T} | set(blocks))
    depleted_at_start = [ep for ep in episodes if ep.kind == "depletion" and ep.start == 0]
    t = 0.0
    for ep in depleted_at_start:
        _deplete(em, ep, 0, cfg.depletion_depth)
    bi = 0
    while True:
        active = [ep for ep in episodes if ep.start <= t < ep.end]
        mo_mult = {BookSide.ASK: 1.0, BookSide.BID: 1.0}
        resp = {BookSide.ASK: cfg.resilience, BookSide.BID: cfg.resilience}
        depleting = {BookSide.ASK: None, BookSide.BID: None}
        for ep in active:
            s = ep.book_side
            if ep.kind == "mo_flow_imbalance":
                mo_mult[s] *= ep.intensity
                resp[s] = 0.0
                resp[s.opposite] *= cfg.pressing_boost
            else:
                depleting[s] = ep
        a = activity[min(int(t // cfg.activity_block), len(activity) - 1)]
        n_bid = len(book._bid_prices)
        n_ask = len(book._ask_prices)
        r = [
            a * rates.lo,  # buy LO
            a * rates.lo,  # sell LO
            a * rates.mo * mo_mult[BookSide.ASK] if n_ask else 0.0,  # buy MO
            a * rates.mo * mo_mult[BookSide.BID] if n_bid else 0.0,  # sell MO
            a * rates.c * n_bid,
            a * rates.c * n_ask,
        ]
        total = sum(r)
        nxt = boundaries[bi] if bi < len(boundaries) else T
        if total <= 0:
            if nxt >= T:
                break
            t = nxt
        else:
            t_new = t + rng.exponential(1.0 / total)
            if t_new >= nxt:
                t = nxt
                if nxt >= T:
                    break
            else:
                t = t_new
                _step(em, cfg, rng, r, total, t, resp, depleting)
                continue
        # crossed an episode or activity-block boundary
        bi += 1
        for ep in episodes:
            if ep.kind == "depletion" and ep.start == t:
                _deplete(em, ep, int(t * US), cfg.depletion_depth)
    return em.events


def _step(em: _Emitter, cfg: GeneratorConfig, rng, r, total, t, resp, depleting) -> None:
    book = em.book
    t_us = int(t * US)
    u = rng.random() * total
    k = 0
    while k < 5 and u >= r[k]:
        u -= r[k]
        k += 1
    if k <= 1:
        side = Side.BUY if k == 0 else Side.SELL
        dist = min(int(rng.geometric(cfg.placement_p)), cfg.max_distance)
        bb, ba = book.best_bid(), book.best_ask()
        vol = _volume(rng, cfg)
        if side is Side.BUY:
            ref = ba if ba is not None else (bb + 1 if bb is not None else cfg.initial_mid)
            price = ref - dist
            own, own_best = BookSide.BID, bb
        else:
            ref = bb if bb is not None else (ba - 1 if ba is not None else cfg.initial_mid)
            price = ref + dist
            own, own_best = BookSide.ASK, ba
        ep = depleting[own]
        if ep is not None and own_best is not None and abs(price - own_best) < cfg.depletion_depth:
            vol = max(1, int(round(vol / ep.intensity)))
        if price > 0:
            em.emit(Op.LO, side, price, vol, t_us)
    elif k <= 3:
        side = Side.BUY if k == 2 else Side.SELL
        hit = BookSide.ASK if side is Side.BUY else BookSide.BID
        delta = em.emit(Op.MO, side, None, _volume(rng, cfg), t_us)
        coef = resp[hit]
        if coef > 0 and delta.executed_volume:
            want = coef * delta.executed_volume
            vol = int(want) + (1 if rng.random() < want - int(want) else 0)
            if vol:
                best = book.best(hit)
                if best is None:
                    best = delta.levels_touched[-1].price
                # the response rests on the side that was hit
                em.emit(Op.LO, Side.SELL if hit is BookSide.ASK else Side.BUY, best, vol, t_us)
    else:
        side = Side.BUY if k == 4 else Side.SELL
        prices = book._bid_prices if side is Side.BUY else book._ask_prices
        price = prices[int(rng.integers(len(prices)))]
        level = book.volume_at(BookSide.BID if side is Side.BUY else BookSide.ASK, price)
        vol = max(1, int(round(level * rng.random())))
        em.emit(Op.C, side, price, vol, t_us)


def _deplete(em: _Emitter, ep: Episode, t_us: int, depth: int) -> None:
    book = em.book
    side = ep.book_side
    csd = Side.BUY if side is BookSide.BID else Side.SELL
    best = book.best(side)
    if best is None:
        return
    for price, vol in book.levels(side):
        if abs(price - best) >= depth:
            break
        keep = int(round(vol / ep.intensity))
        if vol - keep > 0:
            em.emit(Op.C, csd, price, vol - keep, t_us)


def generate(cfg: GeneratorConfig, day: int = 0) -> str:
    """One session as message-file text (deterministic in ``cfg.seed`` and ``day``)."""
    return serialize_messages(generate_events(cfg, day))


def write_days(cfg: GeneratorConfig, n_days: int, out_dir: Union[str, os.PathLike],
               planted=None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for d in range(n_days):
        text = plant_return_rule(cfg, planted, day=d) if planted is not None else generate(cfg, d)
        p = out / f"day_{d:03d}.csv"
        tmp = p.with_suffix(".csv.tmp")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, p)
        paths.append(p)
    return paths


# ----------------------------------------------------------------- planted rules


class ReturnRule(Protocol):
    delta: float
    needs_norm: bool

    def target(self, l_ask: float, l_bid: float, up: bool, rng) -> float: ...


@dataclass(frozen=True)
class CubicImbalanceRule:
    """Expected window log return c * L_imb**3."""

    c: float
    delta: float = 5.0
    needs_norm = False
    resolves_subtick = True

    def check(self, mid_ticks: float) -> None:
        # stochastic rounding carries sub-tick means, but only if the largest move spans a tick
        if self.c and abs(math.expm1(self.c)) * mid_ticks < 1:
            raise FeasibilityError(f"cubic rule with c={self.c} never moves the price by one tick")

    def expected(self, l_ask, l_bid):
        imb = liquidity_imbalance(l_bid, l_ask)
        return self.c * np.nan_to_num(imb) ** 3

    def target(self, l_ask, l_bid, up, rng) -> float:
        return float(self.expected(l_ask, l_bid))


@dataclass(frozen=True)
class PowerLawRule:
    """|r| = K * L**(-alpha) * lognormal noise, with L the liquidity of the side the price moves into."""

    K: float
    alpha: float
    noise: float = 0.3
    delta: float = 5.0
    needs_norm = True
    resolves_subtick = False

    def check(self, mid_ticks: float) -> None:
        if self.K <= 0 or self.alpha < 0:
            raise ConfigError("power-law rule needs K > 0 and alpha >= 0")

    def target(self, l_ask, l_bid, up, rng) -> float:
        L = l_ask if up else l_bid
        mag = self.K * L ** (-self.alpha) * math.exp(self.noise * rng.standard_normal())
        return mag if up else -mag


def parse_rule(text: str):
    """``cubic:c=0.002[,delta=5]`` or ``powerlaw:K=0.002,alpha=0.3[,noise=0.3,delta=5]``."""
    kind, _, rest = text.partition(":")
    kw = {}
    for part in filter(None, rest.split(",")):
        k, _, v = part.partition("=")
        kw[k.strip()] = float(v)
    if kind == "cubic":
        return CubicImbalanceRule(**kw)
    if kind == "powerlaw":
        return PowerLawRule(**kw)
    raise ConfigError(f"unknown planted rule {text!r}")


def _sample_side(rng, cfg: GeneratorConfig, tilt: float) -> np.ndarray:
    d = cfg.plant_depth
    present = rng.random(d) < cfg.plant_fill
    present[0] = True
    vols = np.exp(cfg.volume_mu + cfg.volume_sigma * rng.standard_normal(d)) * tilt
    return np.where(present, np.maximum(1, np.round(vols)), 0).astype(np.int64)


def sample_profiles(rng, cfg: GeneratorConfig, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Independent (ask, bid) profiles of depth ``cfg.plant_depth``; each side carries its own scale."""
    ask = np.empty((n, cfg.plant_depth), dtype=np.int64)
    bid = np.empty((n, cfg.plant_depth), dtype=np.int64)
    for k in range(n):
        ta, tb = np.exp(cfg.plant_tilt * rng.standard_normal(2))
        ask[k] = _sample_side(rng, cfg, ta)
        bid[k] = _sample_side(rng, cfg, tb)
    return ask, bid


def _rebuild(em: _Emitter, t_us: int, best_bid: int, ask: np.ndarray, bid: np.ndarray) -> None:
    """Cancel the whole book, then lay down new profiles with the spread at one tick."""
    book = em.book
    for side, csd in ((BookSide.ASK, Side.SELL), (BookSide.BID, Side.BUY)):
        for price, vol in reversed(book.levels(side)):
            em.emit(Op.C, csd, price, vol, t_us)
            t_us += 1
    for k in range(len(ask) - 1, -1, -1):
        if ask[k]:
            em.emit(Op.LO, Side.SELL, best_bid + 1 + k, ask[k], t_us)
            t_us += 1
    for k in range(len(bid) - 1, -1, -1):
        if bid[k]:
            em.emit(Op.LO, Side.BUY, best_bid - k, bid[k], t_us)
            t_us += 1


def _planted_stream(cfg: GeneratorConfig, ask, bid, moves: Sequence[int], W: int) -> list[OrderEvent]:
    em = _Emitter(cfg.tick_size)
    b = cfg.initial_mid
    lead = 10_000  # rebuild starts 10 ms before the window opens
    for k in range(len(ask)):
        if k:
            b += moves[k - 1]
        _rebuild(em, max(k * W - lead, 0), b, ask[k], bid[k])
    return em.events


def planted_events(cfg: GeneratorConfig, rule, day: int = 0) -> list[OrderEvent]:
    """Stream whose window returns follow ``rule`` applied to the book at each window start.

    The book is redrawn shortly before every multiple of ``plant_window``;
    the move to the next redraw realises the planted return.  Targets are
    converted to whole ticks by unbiased stochastic rounding, then receive
    a symmetric +/-1 tick jitter with probability ``plant_jitter``.
    """
    rule.check(cfg.initial_mid + 0.5)
    rng = day_rng(cfg.seed, day)
    W = int(round(cfg.plant_window * US))
    n_win = int(cfg.session_length * US) // W + 1
    ask, bid = sample_profiles(rng, cfg, n_win)
    norm = 1.0
    if rule.needs_norm:
        probe = _planted_stream(cfg, ask, bid, [0] * n_win, W)
        norm = compute_norm([DayTrace.from_events(probe, cfg.session())], cfg.norm_depth)
    b = cfg.initial_mid
    moves = []
    subtick = 0
    for k in range(n_win - 1):
        la = exponential_liquidity(ask[k], rule.delta, norm)
        lb = exponential_liquidity(bid[k], rule.delta, norm)
        mid = b + 0.5
        up = rng.random() < min(0.8, max(0.2, 0.5 - 5 * (b - cfg.initial_mid) / cfg.initial_mid))
        r = rule.target(la, lb, up, rng)
        want = mid * math.expm1(r)
        if abs(want) < 1:
            subtick += 1
        move = math.floor(want)
        if rng.random() < want - move:
            move += 1
        if rng.random() < cfg.plant_jitter:
            move += 1 if rng.random() < 0.5 else -1
        b += move
        if b - cfg.plant_depth < 1:
            raise FeasibilityError("planted returns drive the price below the tick grid")
        moves.append(move)
    if not rule.resolves_subtick and subtick > 0.05 * max(n_win - 1, 1):
        raise FeasibilityError(
            f"{subtick} of {n_win - 1} planted returns are below one tick; raise K or initial_mid")
    return _planted_stream(cfg, ask, bid, moves, W)


def plant_return_rule(cfg: GeneratorConfig, rule, day: int = 0) -> str:
    return serialize_messages(planted_events(cfg, rule, day))
