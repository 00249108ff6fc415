"""Price and news ingestion, indicators, sentiment aggregation and the per-stock
daily feature vectors.

File formats
------------
prices CSV
    header ``date,ticker,open,high,low,close,volume``; ``date`` is
    ``YYYY-MM-DD``; one row per (ticker, date).
news JSONL
    one object per line with ``id``, ``timestamp`` (RFC 3339, offset
    required), ``text``, ``sentiment`` (``negative|neutral|positive``),
    ``tickers`` (list of symbols) and optional ``embedding_id`` (defaults to
    ``id``).
embeddings JSONL
    one object per line: ``{"id": ..., "vector": [floats]}``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import re
import warnings
from bisect import bisect_left, bisect_right
from collections import defaultdict
from dataclasses import dataclass
from datetime import date, datetime, time, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels

SENTIMENT_SCORES = {"negative": -1, "neutral": 0, "positive": 1}
SENTIMENT_LABELS = {v: k for k, v in SENTIMENT_SCORES.items()}

FEATURE_NAMES = (
    "daily_return",
    "sentiment",
    "tweet_count",
    "log_volume",
    "ma20_rel",
    "ma50_rel",
    "rsi_scaled",
    "macd_rel",
)

PRICE_COLUMNS = ("date", "ticker", "open", "high", "low", "close", "volume")


class IngestError(ValueError):
    """Input data is malformed or violates a data invariant."""


# ---------------------------------------------------------------------------
# prices
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PriceSeries:
    ticker: str
    dates: tuple
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray

    def __post_init__(self):
        n = len(self.dates)
        for name in ("open", "high", "low", "close", "volume"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise IngestError(f"{self.ticker}: {name} has {arr.shape[0]} values for {n} dates")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise IngestError(f"{self.ticker}: dates must be strictly increasing")
        if n and min(self.open.min(), self.high.min(), self.low.min(), self.close.min()) <= 0:
            raise IngestError(f"{self.ticker}: prices must be positive")
        if n and self.volume.min() < 0:
            raise IngestError(f"{self.ticker}: volume must be non-negative")

    def __len__(self):
        return len(self.dates)

    @classmethod
    def from_bars(cls, ticker: str, bars: Iterable[tuple]) -> "PriceSeries":
        """Build from ``(date, open, high, low, close, volume)`` tuples in any order."""
        rows = sorted(bars, key=lambda b: b[0])
        for a, b in zip(rows, rows[1:]):
            if a[0] == b[0]:
                raise IngestError(f"{ticker}: duplicate date {a[0].isoformat()}")
        cols = list(zip(*rows)) if rows else [(), (), (), (), (), ()]
        return cls(
            ticker,
            tuple(cols[0]),
            *(np.asarray(c, dtype=np.float64) for c in cols[1:]),
        )


def _parse_date(text: str) -> date:
    return date.fromisoformat(text.strip())


def load_prices(path, min_bars: int = 2) -> dict[str, PriceSeries]:
    """Read a prices CSV into one :class:`PriceSeries` per ticker.

    Tickers with fewer than ``min_bars`` bars are dropped with a warning.
    """
    bars: dict[str, list] = defaultdict(list)
    seen: set = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != PRICE_COLUMNS:
            raise IngestError(f"{path}: line 1: expected header {','.join(PRICE_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(PRICE_COLUMNS):
                raise IngestError(f"{path}: line {lineno}: expected 7 fields, got {len(row)}")
            try:
                day = _parse_date(row[0])
                ticker = row[1].strip()
                o, h, lo, c, v = (float(x) for x in row[2:])
            except ValueError as exc:
                raise IngestError(f"{path}: line {lineno}: {exc}") from None
            if not ticker:
                raise IngestError(f"{path}: line {lineno}: empty ticker")
            if not all(math.isfinite(x) for x in (o, h, lo, c, v)):
                raise IngestError(f"{path}: line {lineno}: non-finite value")
            if min(o, h, lo, c) <= 0:
                raise IngestError(f"{path}: line {lineno}: non-positive price")
            if v < 0:
                raise IngestError(f"{path}: line {lineno}: negative volume")
            if (ticker, day) in seen:
                raise IngestError(f"{path}: line {lineno}: duplicate date {day.isoformat()} for {ticker}")
            seen.add((ticker, day))
            bars[ticker].append((day, o, h, lo, c, v))

    out = {}
    for ticker in sorted(bars):
        if len(bars[ticker]) < min_bars:
            warnings.warn(
                f"dropping {ticker}: {len(bars[ticker])} bars < minimum {min_bars}",
                stacklevel=2,
            )
            continue
        out[ticker] = PriceSeries.from_bars(ticker, bars[ticker])
    return out


def write_prices(path, series: Iterable[PriceSeries]) -> None:
    rows = []
    for s in series:
        for k, d in enumerate(s.dates):
            rows.append((d, s.ticker, k, s))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRICE_COLUMNS)
        for d, ticker, k, s in rows:
            w.writerow(
                [d.isoformat(), ticker]
                + [repr(float(x)) for x in (s.open[k], s.high[k], s.low[k], s.close[k])]
                + [repr(float(s.volume[k]))]
            )


def compute_returns(series: PriceSeries) -> np.ndarray:
    """Simple daily returns; entry ``t-1`` is the return realised on ``dates[t]``."""
    if len(series) < 2:
        raise IngestError(f"{series.ticker}: need at least 2 bars for returns, got {len(series)}")
    c = series.close
    return (c[1:] - c[:-1]) / c[:-1]


@dataclass(frozen=True)
class Indicators:
    """Indicator columns aligned with the series dates; NaN marks warm-up."""

    ma20: np.ndarray
    ma50: np.ndarray
    rsi14: np.ndarray
    macd: np.ndarray
    macd_signal: np.ndarray


def compute_indicators(
    series: PriceSeries,
    rsi_period: int = 14,
    macd_fast: int = 12,
    macd_slow: int = 26,
    signal_span: int = 9,
) -> Indicators:
    """Moving averages, Wilder RSI and MACD from closes.

    EMAs are seeded with the simple mean of their first ``span`` inputs, so the
    MACD line exists from bar ``macd_slow`` onward and its signal line
    ``signal_span - 1`` bars later.
    """
    close = np.ascontiguousarray(series.close)
    n = close.shape[0]
    fast = kernels.ema(close, macd_fast)
    slow = kernels.ema(close, macd_slow)
    macd = fast - slow
    signal = np.full(n, np.nan)
    start = macd_slow - 1
    if n > start:
        signal[start:] = kernels.ema(np.ascontiguousarray(macd[start:]), signal_span)
    return Indicators(
        ma20=kernels.rolling_mean(close, 20),
        ma50=kernels.rolling_mean(close, 50),
        rsi14=kernels.wilder_rsi(close, rsi_period),
        macd=macd,
        macd_signal=signal,
    )


# ---------------------------------------------------------------------------
# news
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NewsEvent:
    id: str
    timestamp: datetime
    text: str
    sentiment: int
    tickers: tuple = ()
    embedding_id: str = ""

    def __post_init__(self):
        if self.sentiment not in SENTIMENT_LABELS:
            raise IngestError(f"event {self.id}: sentiment score {self.sentiment} not in -1/0/+1")
        if not self.embedding_id:
            object.__setattr__(self, "embedding_id", self.id)

    @property
    def sentiment_label(self) -> str:
        return SENTIMENT_LABELS[self.sentiment]

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "timestamp": format_timestamp(self.timestamp),
            "text": self.text,
            "sentiment": self.sentiment_label,
            "tickers": list(self.tickers),
            "embedding_id": self.embedding_id,
        }


def parse_timestamp(text: str) -> datetime:
    """RFC 3339 timestamp to an aware UTC datetime; a UTC offset is required."""
    s = text.strip()
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    ts = datetime.fromisoformat(s)
    if ts.tzinfo is None:
        raise ValueError(f"timestamp {text!r} has no UTC offset")
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def load_news(path) -> list[NewsEvent]:
    events = []
    ids = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            try:
                eid = str(rec["id"])
                raw_ts = rec["timestamp"]
                text = rec.get("text", "")
                label = rec["sentiment"]
                tickers = rec.get("tickers", [])
            except KeyError as exc:
                raise IngestError(f"{path}: line {lineno}: missing field {exc.args[0]}") from None
            if label not in SENTIMENT_SCORES:
                raise IngestError(f"{path}: line {lineno}: unknown sentiment label {label!r}")
            try:
                ts = parse_timestamp(str(raw_ts))
            except ValueError:
                raise IngestError(f"{path}: line {lineno}: unparseable timestamp {raw_ts!r}") from None
            if not isinstance(tickers, list) or not all(isinstance(t, str) for t in tickers):
                raise IngestError(f"{path}: line {lineno}: tickers must be a list of strings")
            if eid in ids:
                raise IngestError(f"{path}: line {lineno}: duplicate event id {eid!r}")
            ids.add(eid)
            events.append(
                NewsEvent(
                    id=eid,
                    timestamp=ts,
                    text=str(text),
                    sentiment=SENTIMENT_SCORES[label],
                    tickers=tuple(dict.fromkeys(t.strip() for t in tickers if t.strip())),
                    embedding_id=str(rec.get("embedding_id") or eid),
                )
            )
    return events


def write_news(path, events: Iterable[NewsEvent]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(json.dumps(ev.to_record(), sort_keys=True) + "\n")


def assign_trading_day(ts: datetime, calendar: Sequence[date], close_utc: time = time(20, 0)):
    """Trading day whose next-day return an event can first influence.

    Events at or after the close, or on non-trading days, roll to the next
    trading day. Returns ``None`` past the end of the calendar.
    """
    ts = ts.astimezone(timezone.utc)
    day = ts.date()
    if ts.time() >= close_utc:
        k = bisect_right(calendar, day)
    else:
        k = bisect_left(calendar, day)
    return calendar[k] if k < len(calendar) else None


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


class EmbeddingStore:
    """Fixed-dimension text vectors keyed by embedding id."""

    def __init__(self, vectors: Mapping[str, np.ndarray] | None = None, dim: int | None = None):
        self._vectors: dict[str, np.ndarray] = {}
        self.dim = dim
        for key, vec in (vectors or {}).items():
            self.add(key, vec)

    def add(self, key: str, vector) -> None:
        vec = np.asarray(vector, dtype=np.float64)
        if vec.ndim != 1:
            raise IngestError(f"embedding {key!r}: vector must be 1-D")
        if self.dim is None:
            self.dim = vec.shape[0]
        if vec.shape[0] != self.dim:
            raise IngestError(f"embedding {key!r}: dimension {vec.shape[0]} != expected {self.dim}")
        if not np.all(np.isfinite(vec)):
            raise IngestError(f"embedding {key!r}: non-finite values")
        vec = vec.copy()
        vec.setflags(write=False)
        self._vectors[key] = vec

    def __getitem__(self, key: str) -> np.ndarray:
        try:
            return self._vectors[key]
        except KeyError:
            raise IngestError(f"embedding id {key!r} not found in store") from None

    def __contains__(self, key) -> bool:
        return key in self._vectors

    def __len__(self) -> int:
        return len(self._vectors)

    def keys(self):
        return self._vectors.keys()

    def matrix(self, keys: Sequence[str]) -> np.ndarray:
        if not keys:
            return np.zeros((0, self.dim or 0))
        return np.stack([self[k] for k in keys])


def load_embeddings(path, expected_dim: int | None = None) -> EmbeddingStore:
    store = EmbeddingStore(dim=expected_dim)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                key, vector = str(rec["id"]), rec["vector"]
            except (json.JSONDecodeError, KeyError, TypeError):
                raise IngestError(f"{path}: line {lineno}: expected {{id, vector}} record") from None
            if key in store:
                raise IngestError(f"{path}: line {lineno}: duplicate embedding id {key!r}")
            try:
                store.add(key, vector)
            except (IngestError, ValueError, TypeError) as exc:
                raise IngestError(f"{path}: line {lineno}: {exc}") from None
    return store


def write_embeddings(path, store: EmbeddingStore) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in store.keys():
            # repr round-trips float64 exactly
            vec = ",".join(repr(float(x)) for x in store[key])
            fh.write(f'{{"id": {json.dumps(key)}, "vector": [{vec}]}}\n')


_TOKEN = re.compile(r"[a-z0-9$']+")


def hash_embed(text: str, dim: int = 768, seed: int = 0) -> np.ndarray:
    """Signed feature-hashing bag of words, L2-normalised; empty text maps to zeros."""
    if dim <= 0:
        raise ValueError("hash_embed: dim must be positive")
    vec = np.zeros(dim)
    key = seed.to_bytes(8, "little", signed=True)
    for token in _TOKEN.findall(text.lower()):
        h = int.from_bytes(hashlib.blake2b(token.encode(), digest_size=8, key=key).digest(), "little")
        vec[h % dim] += 1.0 if (h >> 63) & 1 else -1.0
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


# ---------------------------------------------------------------------------
# sentiment and features
# ---------------------------------------------------------------------------


def _event_day(ev: NewsEvent, day_of):
    if day_of is None:
        return ev.timestamp.astimezone(timezone.utc).date()
    return day_of.get(ev.id)


def aggregate_sentiment(events: Iterable[NewsEvent], ticker: str, day: date, day_of=None):
    """Mean sentiment score of the events mentioning ``ticker`` on ``day``.

    ``day_of`` maps event id to its assigned trading day (calendar UTC date if
    omitted). Returns ``None`` when no event mentions the ticker that day.
    """
    scores = [ev.sentiment for ev in events if ticker in ev.tickers and _event_day(ev, day_of) == day]
    if not scores:
        return None
    return float(np.mean(scores))


def sentiment_table(events: Iterable[NewsEvent], day_of=None) -> dict:
    """``(ticker, day) -> (mean score, count)`` for every mentioned pair."""
    acc: dict = defaultdict(lambda: [0, 0])
    for ev in events:
        day = _event_day(ev, day_of)
        if day is None:
            continue
        for t in ev.tickers:
            cell = acc[(t, day)]
            cell[0] += ev.sentiment
            cell[1] += 1
    return {k: (s / n, n) for k, (s, n) in acc.items()}


@dataclass(frozen=True)
class FeatureTable:
    """Per-(date, stock) features; ``values`` are z-scored with training-range stats."""

    dates: tuple
    tickers: tuple
    raw: np.ndarray
    values: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    train_end: date
    names: tuple = FEATURE_NAMES

    def row(self, ticker: str, day: date) -> np.ndarray:
        return self.values[self.dates.index(day), self.tickers.index(ticker)]


def raw_features(series: PriceSeries, ind: Indicators, k: int, sentiment: tuple | None) -> np.ndarray:
    """Unnormalised feature vector of ``series`` at bar ``k`` in FEATURE_NAMES order."""
    close = series.close[k]
    mean_s, count = sentiment if sentiment else (0.0, 0)
    return np.array(
        [
            (close - series.close[k - 1]) / series.close[k - 1] if k >= 1 else np.nan,
            mean_s,
            float(count),
            math.log1p(series.volume[k]),
            ind.ma20[k] / close - 1.0,
            ind.ma50[k] / close - 1.0,
            ind.rsi14[k] / 100.0,
            ind.macd[k] / close,
        ]
    )


def build_feature_vectors(
    prices: Mapping[str, PriceSeries],
    indicators: Mapping[str, Indicators],
    sentiment: Mapping,
    dates: Sequence[date],
    train_end: date,
) -> FeatureTable:
    """Assemble and z-score feature vectors for every ticker on ``dates``.

    ``sentiment`` is a :func:`sentiment_table`. Normalisation statistics are
    pooled over all tickers on dates ``<= train_end`` only.
    """
    tickers = tuple(sorted(prices))
    dates = tuple(dates)
    raw = np.empty((len(dates), len(tickers), len(FEATURE_NAMES)))
    for j, t in enumerate(tickers):
        s = prices[t]
        pos = {d: k for k, d in enumerate(s.dates)}
        for i, d in enumerate(dates):
            k = pos.get(d)
            if k is None:
                raise IngestError(f"{t}: no bar on {d.isoformat()}")
            raw[i, j] = raw_features(s, indicators[t], k, sentiment.get((t, d)))
            bad = ~np.isfinite(raw[i, j])
            if bad.any():
                name = FEATURE_NAMES[int(np.argmax(bad))]
                raise IngestError(f"{t}: feature {name} undefined on {d.isoformat()} (warm-up)")
    train_rows = np.array([d <= train_end for d in dates])
    if not train_rows.any():
        raise IngestError("no dates fall in the training range")
    flat = raw[train_rows].reshape(-1, len(FEATURE_NAMES))
    for f, name in enumerate(FEATURE_NAMES):
        if np.ptp(flat[:, f]) == 0.0:
            raise IngestError(f"feature {name} has zero variance over the training range")
    mu = flat.mean(axis=0)
    sd = flat.std(axis=0)
    return FeatureTable(dates, tickers, raw, (raw - mu) / sd, mu, sd, train_end)
