"""Aggregated price-level limit order book.

Prices are integer tick indices; ``tick_size`` is only applied when a
price or midprice leaves the book (``midprice`` is in price units).
Aggressive limit orders are split into an executed part, which behaves
exactly like a market order, and a resting residual.
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Optional

import numpy as np

logger = logging.getLogger(__name__)


class Op(str, Enum):
    LO = "LO"
    MO = "MO"
    C = "C"


class Side(str, Enum):
    """Side of the message sender."""

    BUY = "B"
    SELL = "S"


class BookSide(str, Enum):
    BID = "bid"
    ASK = "ask"

    @property
    def opposite(self) -> "BookSide":
        return BookSide.ASK if self is BookSide.BID else BookSide.BID


def resting_side(side: Side) -> BookSide:
    """Book side where a limit order (or its cancellation) of ``side`` lives."""
    return BookSide.BID if side is Side.BUY else BookSide.ASK


def passive_side(side: Side) -> BookSide:
    """Book side consumed by an aggressive order of ``side``."""
    return BookSide.ASK if side is Side.BUY else BookSide.BID


class BookError(Exception):
    """Base class for order book errors."""


class RejectedMessageError(BookError):
    pass


class GridError(BookError):
    pass


class NoLiquidityError(BookError):
    pass


class InconsistentStreamError(BookError):
    pass


class EmptySideError(BookError):
    pass


@dataclass(frozen=True, slots=True)
class OrderEvent:
    op: Op
    side: Side
    price: Optional[int]
    volume: int
    timestamp: int
    order_ref: Optional[str] = None


class LevelChange(NamedTuple):
    side: BookSide
    price: int
    # ticks away from this side's best before the operation (None if the side was empty)
    distance: Optional[int]
    change: int


@dataclass(slots=True)
class BookDelta:
    midprice_before: Optional[float]
    midprice_after: Optional[float]
    executed_volume: int = 0
    levels_touched: list = field(default_factory=list)
    best_bid_before: Optional[int] = None
    best_ask_before: Optional[int] = None
    rested_volume: int = 0
    cancelled_volume: int = 0
    liquidity_exhausted: bool = False


def _check_volume(volume) -> int:
    if isinstance(volume, bool) or not isinstance(volume, (int, np.integer)) or volume <= 0:
        raise RejectedMessageError(f"volume must be a positive integer, got {volume!r}")
    return int(volume)


def to_ticks(price) -> int:
    """Validate that ``price`` is an on-grid tick index."""
    if isinstance(price, bool):
        raise GridError(f"price {price!r} is not a tick index")
    if isinstance(price, (int, np.integer)):
        return int(price)
    if isinstance(price, (float, np.floating)) and float(price).is_integer():
        return int(price)
    raise GridError(f"price {price!r} is not on the tick grid")


class _BookView:
    """Read-only queries shared by the live book and its snapshots."""

    __slots__ = ("tick_size", "last_update", "_bids", "_bid_prices", "_asks", "_ask_prices")

    def best_bid(self) -> Optional[int]:
        return self._bid_prices[-1] if self._bid_prices else None

    def best_ask(self) -> Optional[int]:
        return self._ask_prices[0] if self._ask_prices else None

    def best(self, side: BookSide) -> Optional[int]:
        return self.best_bid() if side is BookSide.BID else self.best_ask()

    def midprice_ticks(self) -> Optional[float]:
        if not self._bid_prices or not self._ask_prices:
            return None
        return (self._bid_prices[-1] + self._ask_prices[0]) / 2

    def midprice(self) -> Optional[float]:
        m = self.midprice_ticks()
        return None if m is None else m * self.tick_size

    def is_empty(self, side: BookSide) -> bool:
        return not (self._bid_prices if side is BookSide.BID else self._ask_prices)

    def volume_at(self, side: BookSide, price: int) -> int:
        return (self._bids if side is BookSide.BID else self._asks).get(price, 0)

    def levels(self, side: BookSide) -> list[tuple[int, int]]:
        """(price, volume) pairs ordered from the best outward."""
        if side is BookSide.BID:
            return [(p, self._bids[p]) for p in reversed(self._bid_prices)]
        return [(p, self._asks[p]) for p in self._ask_prices]

    def total_volume(self, side: BookSide) -> int:
        return sum((self._bids if side is BookSide.BID else self._asks).values())

    def depth_volume(self, side: BookSide, n: int) -> int:
        """Volume resting within ``n`` ticks of the side's best (best included)."""
        if side is BookSide.BID:
            prices = self._bid_prices
            if not prices:
                return 0
            lo = bisect.bisect_right(prices, prices[-1] - n)
            levels = self._bids
            return sum([levels[p] for p in prices[lo:]])
        prices = self._ask_prices
        if not prices:
            return 0
        hi = bisect.bisect_left(prices, prices[0] + n)
        levels = self._asks
        return sum([levels[p] for p in prices[:hi]])

    def side_profile(self, side: BookSide, n: int) -> np.ndarray:
        """Volumes at tick distance 1..n from the best (element 0 is the best)."""
        if n < 1:
            raise ValueError("profile depth must be >= 1")
        out = np.zeros(n, dtype=np.int64)
        if side is BookSide.BID:
            prices = self._bid_prices
            if not prices:
                raise EmptySideError("bid side is empty")
            best = prices[-1]
            lo = bisect.bisect_right(prices, best - n)
            for p in prices[lo:]:
                out[best - p] = self._bids[p]
        else:
            prices = self._ask_prices
            if not prices:
                raise EmptySideError("ask side is empty")
            best = prices[0]
            hi = bisect.bisect_left(prices, best + n)
            for p in prices[:hi]:
                out[p - best] = self._asks[p]
        return out

    def state_key(self) -> tuple:
        """Hashable full state, used for equality checks between books."""
        return (
            tuple((p, self._bids[p]) for p in self._bid_prices),
            tuple((p, self._asks[p]) for p in self._ask_prices),
        )


class BookSnapshot(_BookView):
    """Immutable view of a book at one instant.

    Shares level storage with the book that produced it; the book copies a
    side before its next write to that side.
    """

    __slots__ = ()

    def __init__(self, book: "OrderBook"):
        self.tick_size = book.tick_size
        self.last_update = book.last_update
        self._bids = book._bids
        self._bid_prices = book._bid_prices
        self._asks = book._asks
        self._ask_prices = book._ask_prices

    def __eq__(self, other):
        if not isinstance(other, _BookView):
            return NotImplemented
        return self.state_key() == other.state_key()

    __hash__ = None


class OrderBook(_BookView):
    """Mutable two-sided book storing aggregate volume per tick level.

    ``strict=False`` (the default) clamps cancellations that exceed the
    resting volume and logs them; ``strict=True`` raises
    :class:`InconsistentStreamError` instead.
    """

    __slots__ = ("strict", "_refs", "_bid_shared", "_ask_shared")

    def __init__(self, tick_size: float = 0.01, strict: bool = False):
        if tick_size <= 0:
            raise ValueError("tick_size must be positive")
        self.tick_size = tick_size
        self.strict = strict
        self.last_update = 0
        self._bids: dict[int, int] = {}
        self._bid_prices: list[int] = []
        self._asks: dict[int, int] = {}
        self._ask_prices: list[int] = []
        self._refs: dict[str, tuple[BookSide, int]] = {}
        self._bid_shared = False
        self._ask_shared = False

    def snapshot(self) -> BookSnapshot:
        self._bid_shared = True
        self._ask_shared = True
        return BookSnapshot(self)

    def __eq__(self, other):
        if not isinstance(other, _BookView):
            return NotImplemented
        return self.state_key() == other.state_key()

    __hash__ = None

    def _writable(self, side: BookSide):
        if side is BookSide.BID:
            if self._bid_shared:
                self._bids = dict(self._bids)
                self._bid_prices = list(self._bid_prices)
                self._bid_shared = False
            return self._bids, self._bid_prices
        if self._ask_shared:
            self._asks = dict(self._asks)
            self._ask_prices = list(self._ask_prices)
            self._ask_shared = False
        return self._asks, self._ask_prices

    def _add(self, side: BookSide, price: int, volume: int) -> None:
        levels, prices = self._writable(side)
        if price in levels:
            levels[price] += volume
        else:
            levels[price] = volume
            bisect.insort(prices, price)

    def _remove(self, side: BookSide, price: int, volume: int) -> None:
        levels, prices = self._writable(side)
        left = levels[price] - volume
        if left > 0:
            levels[price] = left
        else:
            del levels[price]
            del prices[bisect.bisect_left(prices, price)]

    def _sweep(self, side: BookSide, volume: int, limit: Optional[int], touched: list) -> int:
        """Execute up to ``volume`` against ``side`` in price priority."""
        levels, prices = self._writable(side)
        is_ask = side is BookSide.ASK
        best0 = prices[0] if is_ask else prices[-1]
        remaining = volume
        while remaining and prices:
            price = prices[0] if is_ask else prices[-1]
            if limit is not None and (price > limit if is_ask else price < limit):
                break
            avail = levels[price]
            take = avail if avail < remaining else remaining
            if take == avail:
                del levels[price]
                if is_ask:
                    del prices[0]
                else:
                    prices.pop()
            else:
                levels[price] = avail - take
            remaining -= take
            touched.append(LevelChange(side, price, abs(price - best0), -take))
        return volume - remaining

    def _begin(self, ev: OrderEvent) -> BookDelta:
        bb = self._bid_prices[-1] if self._bid_prices else None
        ba = self._ask_prices[0] if self._ask_prices else None
        mid = None if bb is None or ba is None else (bb + ba) / 2 * self.tick_size
        return BookDelta(midprice_before=mid, midprice_after=None,
                         best_bid_before=bb, best_ask_before=ba)

    def _finish(self, ev: OrderEvent, delta: BookDelta) -> BookDelta:
        delta.midprice_after = self.midprice()
        if ev.timestamp > self.last_update:
            self.last_update = ev.timestamp
        return delta

    def apply(self, ev: OrderEvent) -> BookDelta:
        if ev.op is Op.LO:
            return self.apply_limit_order(ev)
        if ev.op is Op.MO:
            return self.apply_market_order(ev)
        if ev.op is Op.C:
            return self.apply_cancellation(ev)
        raise RejectedMessageError(f"unknown operation {ev.op!r}")

    def apply_limit_order(self, ev: OrderEvent) -> BookDelta:
        if ev.op is not Op.LO:
            raise RejectedMessageError(f"expected LO, got {ev.op}")
        volume = _check_volume(ev.volume)
        if ev.price is None:
            raise RejectedMessageError("limit order without price")
        price = to_ticks(ev.price)
        if price <= 0:
            raise GridError(f"price {price} is not a positive tick index")
        delta = self._begin(ev)
        own = resting_side(ev.side)
        other = own.opposite
        opp_best = delta.best_ask_before if other is BookSide.ASK else delta.best_bid_before
        executed = 0
        if opp_best is not None and (price >= opp_best if other is BookSide.ASK else price <= opp_best):
            executed = self._sweep(other, volume, price, delta.levels_touched)
        residual = volume - executed
        if residual:
            own_best = delta.best_bid_before if own is BookSide.BID else delta.best_ask_before
            dist = None if own_best is None else (own_best - price if own is BookSide.BID else price - own_best)
            self._add(own, price, residual)
            delta.levels_touched.append(LevelChange(own, price, dist, residual))
            if ev.order_ref is not None:
                self._refs[ev.order_ref] = (own, price)
        delta.executed_volume = executed
        delta.rested_volume = residual
        return self._finish(ev, delta)

    def apply_market_order(self, ev: OrderEvent) -> BookDelta:
        if ev.op is not Op.MO:
            raise RejectedMessageError(f"expected MO, got {ev.op}")
        volume = _check_volume(ev.volume)
        other = passive_side(ev.side)
        if self.is_empty(other):
            raise NoLiquidityError(f"market order against empty {other.value} side")
        delta = self._begin(ev)
        delta.executed_volume = self._sweep(other, volume, None, delta.levels_touched)
        delta.liquidity_exhausted = self.is_empty(other)
        return self._finish(ev, delta)

    def apply_cancellation(self, ev: OrderEvent) -> BookDelta:
        if ev.op is not Op.C:
            raise RejectedMessageError(f"expected C, got {ev.op}")
        volume = _check_volume(ev.volume)
        side = resting_side(ev.side)
        price = None
        if ev.order_ref is not None and ev.order_ref in self._refs:
            ref_side, price = self._refs[ev.order_ref]
            if ref_side is not side:
                raise InconsistentStreamError(f"order_ref {ev.order_ref!r} rests on the {ref_side.value} side")
        elif ev.price is not None:
            price = to_ticks(ev.price)
        delta = self._begin(ev)
        if price is None:
            self._inconsistent(f"cannot resolve cancellation target (order_ref={ev.order_ref!r})")
            return self._finish(ev, delta)
        resting = self.volume_at(side, price)
        removed = volume
        if resting < volume:
            self._inconsistent(
                f"cancel of {volume} at {side.value} {price} but only {resting} resting")
            removed = resting
        if removed:
            own_best = delta.best_bid_before if side is BookSide.BID else delta.best_ask_before
            self._remove(side, price, removed)
            delta.levels_touched.append(LevelChange(side, price, abs(price - own_best), -removed))
        if ev.order_ref is not None and not self.volume_at(side, price):
            self._refs.pop(ev.order_ref, None)
        delta.cancelled_volume = removed
        return self._finish(ev, delta)

    def _inconsistent(self, msg: str) -> None:
        if self.strict:
            raise InconsistentStreamError(msg)
        logger.warning("clamped inconsistent cancellation: %s", msg)


def apply_limit_order(book: OrderBook, ev: OrderEvent) -> BookDelta:
    return book.apply_limit_order(ev)


def apply_market_order(book: OrderBook, ev: OrderEvent) -> BookDelta:
    return book.apply_market_order(ev)


def apply_cancellation(book: OrderBook, ev: OrderEvent) -> BookDelta:
    return book.apply_cancellation(ev)


def side_profile(book: _BookView, side: BookSide, n: int) -> np.ndarray:
    return book.side_profile(side, n)
