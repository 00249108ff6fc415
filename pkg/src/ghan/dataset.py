"""Assembled dataset: aligned trading days, normalised stock features,
next-day returns, news events per day with their text vectors, and the
chronological split. Snapshots are rebuilt on demand from these arrays.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, time, timezone
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from .container import read_container, write_container
from .hypergraph import HypergraphSnapshot, build_snapshot
from .ingest import (
    FEATURE_NAMES,
    EmbeddingStore,
    FeatureTable,
    IngestError,
    NewsEvent,
    PriceSeries,
    assign_trading_day,
    build_feature_vectors,
    compute_indicators,
    hash_embed,
    sentiment_table,
)
from .train import SplitSpec, split

DATASET_KIND = "ghan-dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class IngestConfig:
    min_bars: int = 60
    close_utc: str = "20:00"
    text_dim: int = 768
    hash_seed: int = 0

    @property
    def close_time(self) -> time:
        return time.fromisoformat(self.close_utc)


@dataclass
class Dataset:
    dates: tuple
    tickers: tuple
    features: FeatureTable
    next_returns: np.ndarray
    day_events: list
    embeddings: EmbeddingStore
    split_counts: tuple
    ingest_config: IngestConfig = field(default_factory=IngestConfig)

    def __post_init__(self):
        self._snapshots: dict[int, HypergraphSnapshot] = {}

    def __len__(self):
        return len(self.dates)

    @property
    def text_dim(self) -> int:
        return self.embeddings.dim or 0

    @property
    def feature_dim(self) -> int:
        return len(self.features.names)

    def ranges(self) -> dict[str, range]:
        a, b, _ = self.split_counts
        n = len(self.dates)
        return {"train": range(0, a), "val": range(a, a + b), "test": range(a + b, n), "all": range(n)}

    def snapshot(self, t: int) -> HypergraphSnapshot:
        snap = self._snapshots.get(t)
        if snap is None:
            snap = build_snapshot(
                self.dates[t], self.day_events[t], self.features.values[t], self.tickers, self.embeddings
            )
            self._snapshots[t] = snap
        return snap

    def layout(self) -> dict:
        return {
            "feature_names": list(self.features.names),
            "feature_dim": self.feature_dim,
            "text_dim": self.text_dim,
            "tickers": list(self.tickers),
        }

    def layout_digest(self) -> str:
        return hashlib.sha256(json.dumps(self.layout(), sort_keys=True).encode()).hexdigest()

    def realized(self, t: int) -> dict[str, float]:
        return {s: float(r) for s, r in zip(self.tickers, self.next_returns[t]) if np.isfinite(r)}

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        events = [ev for day in self.day_events for ev in day]
        day_index = [t for t, day in enumerate(self.day_events) for _ in day]
        emb_ids = sorted({ev.embedding_id for ev in events})
        arrays = {
            "features.raw": self.features.raw,
            "features.values": self.features.values,
            "features.mean": self.features.mean,
            "features.std": self.features.std,
            "next_returns": self.next_returns,
            "events.day": np.asarray(day_index, dtype=np.int64),
            "embeddings": self.embeddings.matrix(emb_ids) if emb_ids else np.zeros((0, self.text_dim)),
        }
        meta = {
            "kind": DATASET_KIND,
            "version": DATASET_VERSION,
            "dates": [d.isoformat() for d in self.dates],
            "tickers": list(self.tickers),
            "feature_names": list(self.features.names),
            "train_end": self.features.train_end.isoformat(),
            "split_counts": list(self.split_counts),
            "events": [ev.to_record() for ev in events],
            "embedding_ids": emb_ids,
            "text_dim": self.text_dim,
            "ingest_config": asdict(self.ingest_config),
        }
        write_container(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "Dataset":
        from .ingest import SENTIMENT_SCORES, parse_timestamp

        arrays, meta = read_container(path)
        if meta.get("kind") != DATASET_KIND:
            raise IngestError(f"{path}: not a dataset archive")
        if meta.get("version") != DATASET_VERSION:
            raise IngestError(f"{path}: unsupported dataset version {meta.get('version')}")
        dates = tuple(date.fromisoformat(d) for d in meta["dates"])
        table = FeatureTable(
            dates=dates,
            tickers=tuple(meta["tickers"]),
            raw=arrays["features.raw"],
            values=arrays["features.values"],
            mean=arrays["features.mean"],
            std=arrays["features.std"],
            train_end=date.fromisoformat(meta["train_end"]),
            names=tuple(meta["feature_names"]),
        )
        store = EmbeddingStore(dim=meta["text_dim"])
        for k, vec in zip(meta["embedding_ids"], arrays["embeddings"]):
            store.add(k, vec)
        day_events: list[list] = [[] for _ in dates]
        for rec, t in zip(meta["events"], arrays["events.day"]):
            day_events[int(t)].append(
                NewsEvent(
                    id=rec["id"],
                    timestamp=parse_timestamp(rec["timestamp"]),
                    text=rec["text"],
                    sentiment=SENTIMENT_SCORES[rec["sentiment"]],
                    tickers=tuple(rec["tickers"]),
                    embedding_id=rec["embedding_id"],
                )
            )
        return cls(
            dates=dates,
            tickers=table.tickers,
            features=table,
            next_returns=arrays["next_returns"],
            day_events=day_events,
            embeddings=store,
            split_counts=tuple(meta["split_counts"]),
            ingest_config=IngestConfig(**meta["ingest_config"]),
        )


def trading_calendar(prices: Mapping[str, PriceSeries]) -> tuple:
    """Dates on which every ticker has a bar."""
    if not prices:
        raise IngestError("no price series")
    common = None
    for s in prices.values():
        common = set(s.dates) if common is None else common & set(s.dates)
    return tuple(sorted(common))


def assemble_dataset(
    prices: Mapping[str, PriceSeries],
    events: Sequence[NewsEvent],
    embeddings: EmbeddingStore | None = None,
    config: IngestConfig = IngestConfig(),
    split_spec: SplitSpec = SplitSpec(),
) -> Dataset:
    """Align everything on the common trading calendar and build the dataset.

    Usable days are those on which every ticker has all features defined
    (indicator warm-up excluded). Without an embedding store, text vectors come
    from :func:`~ghan.ingest.hash_embed`.
    """
    calendar = trading_calendar(prices)
    if embeddings is None:
        embeddings = EmbeddingStore(dim=config.text_dim)
        for ev in events:
            if ev.embedding_id not in embeddings:
                embeddings.add(ev.embedding_id, hash_embed(ev.text, config.text_dim, config.hash_seed))
    missing = sorted({ev.embedding_id for ev in events if ev.embedding_id not in embeddings})
    if missing:
        raise IngestError(f"{len(missing)} event embedding ids not found in store, e.g. {missing[0]!r}")

    close = config.close_time
    day_of = {ev.id: assign_trading_day(ev.timestamp, calendar, close) for ev in events}
    indicators = {t: compute_indicators(s) for t, s in prices.items()}

    usable = []
    for d in calendar:
        ok = True
        for t, s in prices.items():
            k = s.dates.index(d)
            ind = indicators[t]
            if k < 1 or not all(np.isfinite(a[k]) for a in (ind.ma20, ind.ma50, ind.rsi14, ind.macd)):
                ok = False
                break
        if ok:
            usable.append(d)
    if len(usable) < 3:
        raise IngestError(f"only {len(usable)} trading days have complete features; need at least 3")

    train_days, val_days, test_days = split(usable, split_spec)
    table = build_feature_vectors(prices, indicators, sentiment_table(events, day_of), usable, train_days[-1])

    tickers = table.tickers
    next_ret = np.full((len(usable), len(tickers)), np.nan)
    for j, t in enumerate(tickers):
        s = prices[t]
        pos = {d: k for k, d in enumerate(s.dates)}
        for i, d in enumerate(usable):
            c = calendar.index(d)
            if c + 1 < len(calendar):
                k0, k1 = pos[d], pos[calendar[c + 1]]
                next_ret[i, j] = (s.close[k1] - s.close[k0]) / s.close[k0]

    index = {d: i for i, d in enumerate(usable)}
    day_events: list[list] = [[] for _ in usable]
    for ev in sorted(events, key=lambda e: e.id):
        i = index.get(day_of[ev.id])
        if i is not None:
            day_events[i].append(ev)

    used_ids = {ev.embedding_id for day in day_events for ev in day}
    store = EmbeddingStore(dim=embeddings.dim)
    for k in sorted(used_ids):
        store.add(k, embeddings[k])

    return Dataset(
        dates=tuple(usable),
        tickers=tickers,
        features=table,
        next_returns=next_ret,
        day_events=day_events,
        embeddings=store,
        split_counts=(len(train_days), len(val_days), len(test_days)),
        ingest_config=config,
    )
