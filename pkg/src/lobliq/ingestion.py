"""Message-file parsing, session filtering and book replay.

Message files are UTF-8 CSV with the header::

    timestamp_us,op,side,price_ticks,volume,order_ref

``timestamp_us`` counts microseconds since the session open, ``op`` is one
of LO/MO/C, ``side`` is B or S, ``price_ticks`` is empty for market orders
and ``order_ref`` is optional.  Lines starting with ``#`` are comments.
One file holds one trading day.
"""

from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, time, timedelta
from typing import IO, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from .lob import (BookDelta, BookError, BookSide, BookSnapshot, GridError, Op, OrderBook,
                  OrderEvent, Side)

logger = logging.getLogger(__name__)

HEADER = ("timestamp_us", "op", "side", "price_ticks", "volume", "order_ref")
US = 1_000_000
# lenient mode re-sorts timestamps that go backwards by at most this much
RESORT_TOLERANCE_US = US

Source = Union[str, os.PathLike, bytes, IO[bytes], IO[str]]


class ParseError(ValueError):
    def __init__(self, errors: list[tuple[int, str]]):
        self.errors = errors
        shown = "; ".join(f"line {n}: {msg}" for n, msg in errors[:10])
        more = f" (+{len(errors) - 10} more)" if len(errors) > 10 else ""
        super().__init__(shown + more)

    @property
    def line(self) -> int:
        return self.errors[0][0]


class StreamOrderError(ValueError):
    pass


class ReplayError(Exception):
    """A book error raised while replaying event ``index``."""

    def __init__(self, index: int, cause: BookError):
        self.index = index
        self.cause = cause
        super().__init__(f"event {index}: {type(cause).__name__}: {cause}")


def _time_us(t: time) -> int:
    return ((t.hour * 60 + t.minute) * 60 + t.second) * US + t.microsecond


@dataclass(frozen=True)
class SessionConfig:
    session_open: time = time(8, 0)
    session_close: time = time(16, 30)
    open_skip: timedelta = timedelta(minutes=30)
    tick_size: float = 0.01

    def __post_init__(self):
        if self.open_skip < timedelta(0):
            raise ValueError("open_skip must be >= 0")
        if self.open_skip_us >= self.session_length_us:
            raise ValueError("session_open + open_skip must precede session_close")
        if self.tick_size <= 0:
            raise ValueError("tick_size must be positive")

    @property
    def session_length_us(self) -> int:
        return _time_us(self.session_close) - _time_us(self.session_open)

    @property
    def open_skip_us(self) -> int:
        return self.open_skip // timedelta(microseconds=1)

    @classmethod
    def from_length(cls, length_s: float, open_skip_s: float = 1800.0, tick_size: float = 0.01,
                    session_open: time = time(8, 0)) -> "SessionConfig":
        close = (datetime.combine(datetime(2000, 1, 1), session_open)
                 + timedelta(seconds=length_s)).time()
        return cls(session_open, close, timedelta(seconds=open_skip_s), tick_size)


def _open_text(source: Source) -> tuple[IO[str], bool]:
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8")), True
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8", newline=""), True
    if isinstance(source, io.TextIOBase):
        return source, False
    return io.TextIOWrapper(source, encoding="utf-8", newline=""), False


def _parse_int(text: str, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ValueError(f"{what} {text!r} is not an integer") from None


def _parse_row(row: list[str]) -> OrderEvent:
    if len(row) != len(HEADER):
        raise ValueError(f"expected {len(HEADER)} fields, got {len(row)}")
    ts, op, side, price, volume, ref = (f.strip() for f in row)
    timestamp = _parse_int(ts, "timestamp")
    if timestamp < 0:
        raise ValueError("negative timestamp")
    try:
        op_ = Op(op)
    except ValueError:
        raise ValueError(f"unknown op {op!r}") from None
    try:
        side_ = Side(side)
    except ValueError:
        raise ValueError(f"unknown side {side!r}") from None
    if price:
        try:
            price_ = int(price)
        except ValueError:
            raise GridError(f"price_ticks {price!r} is not on the tick grid") from None
    else:
        price_ = None
    if op_ is Op.MO and price_ is not None:
        raise ValueError("market orders carry no price")
    if op_ is Op.LO and price_ is None:
        raise ValueError("limit order without price")
    if op_ is Op.C and price_ is None and not ref:
        raise ValueError("cancellation needs a price or an order_ref")
    vol = _parse_int(volume, "volume")
    if vol <= 0:
        raise ValueError(f"non-positive volume {vol}")
    return OrderEvent(op_, side_, price_, vol, timestamp, ref or None)


def parse_messages(source: Source, cfg: Optional[SessionConfig] = None, *, strict: bool = True,
                   keep_warmup: bool = False) -> list[OrderEvent]:
    """Parse a message file into time-ordered events.

    Events stamped before ``open_skip`` are dropped unless ``keep_warmup``.
    In strict mode a decreasing timestamp raises :class:`StreamOrderError`;
    otherwise events are stably re-sorted when the disorder is within one
    second.  All malformed lines are collected into a single
    :class:`ParseError`.
    """
    cfg = cfg or SessionConfig()
    fh, owned = _open_text(source)
    events: list[OrderEvent] = []
    errors: list[tuple[int, str]] = []
    unsorted = False
    try:
        reader = csv.reader(fh)
        header_seen = False
        latest = -1
        for row in reader:
            lineno = reader.line_num
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            if not header_seen:
                if tuple(f.strip() for f in row) != HEADER:
                    raise ParseError([(lineno, f"bad header {','.join(row)!r}")])
                header_seen = True
                continue
            try:
                ev = _parse_row(row)
            except (ValueError, GridError) as exc:
                errors.append((lineno, str(exc)))
                continue
            if ev.timestamp < latest:
                if strict or latest - ev.timestamp > RESORT_TOLERANCE_US:
                    raise StreamOrderError(
                        f"line {lineno}: timestamp {ev.timestamp} precedes {latest}")
                unsorted = True
            latest = max(latest, ev.timestamp)
            events.append(ev)
        if not header_seen:
            raise ParseError([(1, "missing header")])
    finally:
        if owned:
            fh.close()
        elif isinstance(fh, io.TextIOWrapper):
            fh.detach()
    if errors:
        raise ParseError(errors)
    if unsorted:
        events.sort(key=lambda e: e.timestamp)
    if not keep_warmup:
        skip = cfg.open_skip_us
        events = [e for e in events if e.timestamp >= skip]
    return events


def format_event(ev: OrderEvent) -> str:
    price = "" if ev.price is None else str(ev.price)
    return f"{ev.timestamp},{ev.op.value},{ev.side.value},{price},{ev.volume},{ev.order_ref or ''}"


def serialize_messages(events: Iterable[OrderEvent], fh: Optional[IO[str]] = None) -> str:
    """Canonical text form: header, one event per line, ``\\n`` endings, no comments."""
    text = ",".join(HEADER) + "\n" + "".join(format_event(e) + "\n" for e in events)
    if fh is not None:
        fh.write(text)
    return text


@dataclass(frozen=True, slots=True)
class ReplayFrame:
    index: int
    event: OrderEvent
    delta: BookDelta
    midprice: Optional[float]
    book_after: Optional[BookSnapshot]


def iter_replay(events: Iterable[OrderEvent], tick_size: float = 0.01, *, strict: bool = False,
                snapshots: bool = True) -> Iterator[ReplayFrame]:
    book = OrderBook(tick_size, strict=strict)
    last = None
    for i, ev in enumerate(events):
        if last is not None and ev.timestamp < last:
            raise StreamOrderError(f"event {i}: timestamp {ev.timestamp} precedes {last}")
        last = ev.timestamp
        try:
            delta = book.apply(ev)
        except BookError as exc:
            raise ReplayError(i, exc) from exc
        yield ReplayFrame(i, ev, delta, delta.midprice_after,
                          book.snapshot() if snapshots else None)


def replay(events: Iterable[OrderEvent], tick_size: float = 0.01, *, strict: bool = False,
           snapshots: bool = True) -> list[ReplayFrame]:
    """Replay one day from an empty book, one frame per event."""
    return list(iter_replay(events, tick_size, strict=strict, snapshots=snapshots))


# Flow columns; the first three belong to the ask side, the last three to the bid side.
FLOW_COLUMNS = ("LOS", "MOB", "CS", "LOB", "MOS", "CB")
SIDE_COLUMNS = {BookSide.ASK: (0, 1, 2), BookSide.BID: (3, 4, 5)}


def _flow_row(ev: OrderEvent, d: BookDelta) -> tuple[list[int], list[int]]:
    """Per-event flow volumes (all levels, at-the-best only)."""
    allv = [0] * 6
    best = [0] * 6
    buy = ev.side is Side.BUY
    if ev.op is Op.LO:
        if d.executed_volume:
            col = 1 if buy else 4
            allv[col] = best[col] = d.executed_volume
        if d.rested_volume:
            col = 3 if buy else 0
            allv[col] = d.rested_volume
            own_best = d.best_bid_before if buy else d.best_ask_before
            if ev.price == own_best:
                best[col] = d.rested_volume
    elif ev.op is Op.MO:
        col = 1 if buy else 4
        allv[col] = best[col] = d.executed_volume
    else:
        if d.cancelled_volume:
            col = 5 if buy else 2
            allv[col] = d.cancelled_volume
            own_best = d.best_bid_before if buy else d.best_ask_before
            if d.levels_touched and d.levels_touched[0].price == own_best:
                best[col] = d.cancelled_volume
    return allv, best


class DayTrace:
    """Columnar summary of one replayed trading day.

    Holds, per operation, the timestamp, the midprice after it and the flow
    volumes it contributes.  Book states are not retained; :meth:`states_at`
    and :meth:`iter_books` replay the day again on demand.
    """

    def __init__(self, events: Sequence[OrderEvent], *, tick_size: float = 0.01,
                 session_length_us: int, analysis_start_us: int = 0, day: int = 0,
                 strict: bool = False):
        self.events = list(events)
        self.tick_size = tick_size
        self.session_length_us = int(session_length_us)
        self.analysis_start_us = int(analysis_start_us)
        self.day = day
        self.strict = strict
        n = len(self.events)
        t = np.empty(n, dtype=np.int64)
        mid = np.full(n, np.nan)
        flows = np.zeros((n, 6), dtype=np.int64)
        flows_best = np.zeros((n, 6), dtype=np.int64)
        for fr in iter_replay(self.events, tick_size, strict=strict, snapshots=False):
            i = fr.index
            t[i] = fr.event.timestamp
            if fr.midprice is not None:
                mid[i] = fr.midprice
            a, b = _flow_row(fr.event, fr.delta)
            flows[i] = a
            flows_best[i] = b
        self._init_arrays(t, mid, flows, flows_best)

    def _init_arrays(self, t, mid, flows, flows_best):
        self.t = t
        self.mid = mid
        self.flows = flows
        self.flows_best = flows_best
        mask = (t >= self.analysis_start_us)[:, None]
        zero = np.zeros((1, 6), dtype=np.int64)
        self._cum = np.concatenate([zero, np.cumsum(flows * mask, axis=0)])
        self._cum_best = np.concatenate([zero, np.cumsum(flows_best * mask, axis=0)])

    @classmethod
    def from_arrays(cls, t, mid, *, session_length_us: int, analysis_start_us: int = 0,
                    day: int = 0, flows=None, flows_best=None, tick_size: float = 0.01) -> "DayTrace":
        """Trace built directly from columns (no message stream behind it)."""
        self = cls.__new__(cls)
        self.events = []
        self.tick_size = tick_size
        self.session_length_us = int(session_length_us)
        self.analysis_start_us = int(analysis_start_us)
        self.day = day
        self.strict = False
        t = np.asarray(t, dtype=np.int64)
        n = len(t)
        flows = np.zeros((n, 6), dtype=np.int64) if flows is None else np.asarray(flows, dtype=np.int64)
        flows_best = flows if flows_best is None else np.asarray(flows_best, dtype=np.int64)
        self._init_arrays(t, np.asarray(mid, dtype=float), flows, flows_best)
        return self

    @classmethod
    def from_events(cls, events: Sequence[OrderEvent], cfg: SessionConfig, day: int = 0,
                    strict: bool = False) -> "DayTrace":
        return cls(events, tick_size=cfg.tick_size, session_length_us=cfg.session_length_us,
                   analysis_start_us=cfg.open_skip_us, day=day, strict=strict)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def analysis_mask(self) -> np.ndarray:
        return self.t >= self.analysis_start_us

    def index_at(self, times) -> np.ndarray:
        """Index of the last operation stamped at or before each time (-1 if none)."""
        return np.searchsorted(self.t, np.asarray(times, dtype=np.int64), side="right") - 1

    def window_sums(self, starts, ends, best_only: bool = False) -> np.ndarray:
        """Flow volumes over operations with ``start <= t < end`` inside the analysis period."""
        cum = self._cum_best if best_only else self._cum
        lo = np.searchsorted(self.t, np.asarray(starts, dtype=np.int64), side="left")
        hi = np.searchsorted(self.t, np.asarray(ends, dtype=np.int64), side="left")
        hi = np.maximum(hi, lo)
        return cum[hi] - cum[lo]

    def iter_books(self) -> Iterator[tuple[int, OrderBook]]:
        """Replay the day yielding the live book after each operation (do not retain it)."""
        if not self.events:
            if len(self.t):
                raise ValueError("trace was built from arrays; no book states available")
            return
        book = OrderBook(self.tick_size, strict=self.strict)
        for i, ev in enumerate(self.events):
            book.apply(ev)
            yield i, book

    def states_at(self, indices: Iterable[int]) -> dict[int, BookSnapshot]:
        wanted = sorted({int(i) for i in indices if i >= 0})
        out: dict[int, BookSnapshot] = {}
        if not wanted:
            return out
        k = 0
        for i, book in self.iter_books():
            if i == wanted[k]:
                out[i] = book.snapshot()
                k += 1
                if k == len(wanted):
                    break
        return out


def load_day(path: Union[str, os.PathLike], cfg: SessionConfig, day: int = 0, *,
             strict_order: bool = True, strict_book: bool = False) -> DayTrace:
    """Parse and replay one day; warm-up events rebuild the book but are excluded from analysis."""
    events = parse_messages(path, cfg, strict=strict_order, keep_warmup=True)
    return DayTrace.from_events(events, cfg, day=day, strict=strict_book)
