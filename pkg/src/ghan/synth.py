"""Deterministic synthetic market with a planted news -> next-day return effect.

Return of stock ``s`` on day ``t``::

    R[t, s] = drift + noise * eps[t, s] + signal * sum(sentiment of day t-1 events mentioning s)

with ``eps`` standard normal. Every random quantity is drawn from its own
named stream, so changing ``signal`` leaves all other draws untouched.
Text embeddings are ``sentiment * u + embedding_noise * g / sqrt(dim)`` for a
fixed unit vector ``u`` and standard normal ``g``.

The ground-truth log holds one record per (event, mentioned stock) pair
whose shock lands inside the simulated range.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .ingest import EmbeddingStore, NewsEvent, PriceSeries, write_embeddings, write_news, write_prices
from .rng import stream

_TEMPLATES = {
    1: (
        "{t} shares rally after earnings beat expectations",
        "{t} raises full-year guidance as demand surges",
        "analysts upgrade {t} citing strong margins",
        "{t} wins major contract, stock climbs",
    ),
    0: (
        "{t} to present at industry conference next week",
        "{t} schedules quarterly earnings call",
        "{t} announces board meeting date",
        "{t} files routine quarterly report",
    ),
    -1: (
        "{t} shares slump after earnings miss",
        "{t} cuts outlook amid weak demand",
        "analysts downgrade {t} on margin pressure",
        "{t} faces regulatory probe, stock falls",
    ),
}


@dataclass(frozen=True)
class SynthConfig:
    n_stocks: int = 20
    n_days: int = 250
    events_per_day: float = 10.0
    min_mentions: int = 1
    max_mentions: int = 3
    signal: float = 0.01
    noise: float = 0.005
    drift: float = 0.0
    seed: int = 42
    text_dim: int = 768
    embedding_noise: float = 0.5
    start: str = "2020-01-02"

    def __post_init__(self):
        if self.n_stocks < 2 or self.n_days < 2:
            raise ValueError("n_stocks and n_days must be >= 2")
        if self.signal < 0 or self.noise < 0 or self.embedding_noise < 0:
            raise ValueError("signal, noise and embedding_noise must be >= 0")
        if not 1 <= self.min_mentions <= self.max_mentions <= self.n_stocks:
            raise ValueError("need 1 <= min_mentions <= max_mentions <= n_stocks")
        if self.events_per_day < 0 or self.text_dim < 1:
            raise ValueError("events_per_day must be >= 0 and text_dim >= 1")


@dataclass
class SynthData:
    config: SynthConfig
    prices: dict
    events: list
    embeddings: EmbeddingStore
    truth: list
    returns: np.ndarray = field(repr=False)
    shocks: np.ndarray = field(repr=False)

    @property
    def tickers(self) -> tuple:
        return tuple(self.prices)


def business_days(start: date, n: int) -> list:
    out = []
    d = start
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d)
        d += timedelta(days=1)
    return out


def generate(config: SynthConfig = SynthConfig()) -> SynthData:
    n, T, seed = config.n_stocks, config.n_days, config.seed
    tickers = [f"SYN{k:02d}" for k in range(n)]
    days = business_days(date.fromisoformat(config.start), T)

    news_rng = stream(seed, "news")
    counts = news_rng.poisson(config.events_per_day, size=T)
    events = []
    shocks = np.zeros((T, n))
    truth = []
    serial = 0
    for t, day in enumerate(days):
        open_ = datetime(day.year, day.month, day.day, 13, 30, tzinfo=timezone.utc)
        secs = np.sort(news_rng.integers(0, 6 * 3600 + 30 * 60, size=counts[t]))
        for s_off in secs:
            k = int(news_rng.integers(config.min_mentions, config.max_mentions + 1))
            members = sorted(news_rng.choice(n, size=k, replace=False).tolist())
            sentiment = int(news_rng.integers(-1, 2))
            template = _TEMPLATES[sentiment][int(news_rng.integers(len(_TEMPLATES[sentiment])))]
            eid = f"ev{serial:07d}"
            serial += 1
            names = [tickers[m] for m in members]
            events.append(
                NewsEvent(
                    id=eid,
                    timestamp=open_ + timedelta(seconds=int(s_off)),
                    text=template.format(t=" and ".join(names)),
                    sentiment=sentiment,
                    tickers=tuple(names),
                    embedding_id=eid,
                )
            )
            if t + 1 < T:
                for m in members:
                    shock = config.signal * sentiment
                    shocks[t + 1, m] += shock
                    truth.append(
                        {
                            "event_id": eid,
                            "event_date": day.isoformat(),
                            "date": days[t + 1].isoformat(),
                            "ticker": tickers[m],
                            "sentiment": sentiment,
                            "shock": shock,
                        }
                    )

    eps = stream(seed, "returns").standard_normal((T, n))
    returns = config.drift + config.noise * eps + shocks
    returns[0] = 0.0
    if np.any(returns <= -1.0):
        raise ValueError("synthetic return <= -100%; lower signal or noise")
    start_px = stream(seed, "start-price").uniform(20.0, 200.0, size=n)
    close = start_px * np.cumprod(1.0 + returns, axis=0)

    bar_rng = stream(seed, "bars")
    prev = np.vstack([start_px, close[:-1]])
    open_px = prev * (1.0 + 0.001 * bar_rng.standard_normal((T, n)))
    high = np.maximum(open_px, close) * (1.0 + np.abs(0.003 * bar_rng.standard_normal((T, n))))
    low = np.minimum(open_px, close) * (1.0 - np.abs(0.003 * bar_rng.standard_normal((T, n))))
    volume = np.round(np.exp(13.0 + 0.3 * bar_rng.standard_normal((T, n))))

    prices = {
        tk: PriceSeries(tk, tuple(days), open_px[:, j], high[:, j], low[:, j], close[:, j], volume[:, j])
        for j, tk in enumerate(tickers)
    }

    d = config.text_dim
    direction = stream(seed, "embed-direction").standard_normal(d)
    direction /= np.linalg.norm(direction)
    emb_rng = stream(seed, "embed-noise")
    store = EmbeddingStore(dim=d)
    for ev in events:
        vec = ev.sentiment * direction + config.embedding_noise * emb_rng.standard_normal(d) / np.sqrt(d)
        store.add(ev.embedding_id, vec)

    return SynthData(config, prices, events, store, truth, returns, shocks)


def write_synth(data: SynthData, out_dir) -> dict:
    """Write prices.csv, news.jsonl, embeddings.jsonl and truth.jsonl; return their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "prices": out / "prices.csv",
        "news": out / "news.jsonl",
        "embeddings": out / "embeddings.jsonl",
        "truth": out / "truth.jsonl",
    }
    write_prices(paths["prices"], data.prices.values())
    write_news(paths["news"], data.events)
    write_embeddings(paths["embeddings"], data.embeddings)
    with open(paths["truth"], "w", encoding="utf-8") as fh:
        for rec in data.truth:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return paths


def load_truth(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
