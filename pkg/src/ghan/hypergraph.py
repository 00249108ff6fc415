"""Per-trading-day hypergraphs: one node per stock in the universe, one node
and one hyperedge per news event that mentions at least one universe stock.

Node table layout is stocks first (universe order), then news nodes in
canonical order (sorted by event id). Hyperedge ``j`` belongs to news node
``n_stocks + j``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from datetime import date
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .ingest import NewsEvent


class HypergraphError(ValueError):
    pass


class NodeKind(enum.Enum):
    STOCK = "stock"
    NEWS = "news"


@dataclass(frozen=True)
class NodeRef:
    kind: NodeKind
    index: int


@dataclass(frozen=True)
class Hyperedge:
    event: int
    members: tuple

    @property
    def nodes(self) -> tuple:
        """Full member set: event node first, then stocks ascending."""
        return (self.event,) + self.members


@dataclass(frozen=True)
class HypergraphSnapshot:
    date: date
    tickers: tuple
    stock_features: np.ndarray
    news_ids: tuple
    news_sentiment: np.ndarray
    news_rank: np.ndarray
    news_text: np.ndarray
    embedding_ids: tuple
    hyperedges: tuple
    n_events: int
    # incidence pairs, edge-major: member i of edge j at pair_node/pair_edge
    pair_node: np.ndarray = field(repr=False, default=None)
    pair_edge: np.ndarray = field(repr=False, default=None)
    use_geometric: bool = True
    use_positional: bool = True

    def __post_init__(self):
        if self.pair_node is None:
            nodes, edges = [], []
            for j, e in enumerate(self.hyperedges):
                nodes.extend(e.nodes)
                edges.extend([j] * len(e.nodes))
            object.__setattr__(self, "pair_node", np.asarray(nodes, dtype=np.int64))
            object.__setattr__(self, "pair_edge", np.asarray(edges, dtype=np.int64))

    @property
    def n_stocks(self) -> int:
        return len(self.tickers)

    @property
    def n_news(self) -> int:
        return len(self.news_ids)

    @property
    def n_nodes(self) -> int:
        return self.n_stocks + self.n_news

    @property
    def n_edges(self) -> int:
        return len(self.hyperedges)

    def node(self, index: int) -> NodeRef:
        if not 0 <= index < self.n_nodes:
            raise IndexError(f"node {index} out of range for {self.n_nodes} nodes")
        return NodeRef(NodeKind.STOCK if index < self.n_stocks else NodeKind.NEWS, index)

    def incidence(self) -> sp.csr_array:
        data = np.ones(self.pair_node.shape[0])
        return sp.csr_array(
            (data, (self.pair_node, self.pair_edge)), shape=(self.n_nodes, self.n_edges)
        )

    def with_inputs(self, **changes) -> "HypergraphSnapshot":
        """Copy with replaced input arrays/flags; structure is shared."""
        return replace(self, **changes)


def build_snapshot(
    day: date,
    day_events: Sequence[NewsEvent],
    stock_features: np.ndarray,
    universe: Sequence[str],
    embeddings=None,
) -> HypergraphSnapshot:
    """Snapshot for ``day`` from the events assigned to it.

    ``stock_features[k]`` is the feature vector of ``universe[k]``. Mentions of
    tickers outside the universe are dropped; events left with no mention are
    counted in ``n_events`` but produce neither a node nor a hyperedge.
    ``embeddings`` (an :class:`~ghan.ingest.EmbeddingStore` or mapping) supplies
    text vectors; without it ``news_text`` has zero width.
    """
    universe = tuple(universe)
    if not universe:
        raise HypergraphError("empty stock universe")
    feats = np.asarray(stock_features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != len(universe):
        raise HypergraphError(f"stock_features shape {feats.shape} does not match {len(universe)} stocks")
    index = {t: k for k, t in enumerate(universe)}

    events = sorted(day_events, key=lambda ev: ev.id)
    if len({ev.id for ev in events}) != len(events):
        raise HypergraphError("duplicate event ids within a day")
    kept = []
    for ev in events:
        members = tuple(sorted({index[t] for t in ev.tickers if t in index}))
        if members:
            kept.append((ev, members))

    n = len(universe)
    by_time = sorted(range(len(kept)), key=lambda k: (kept[k][0].timestamp, kept[k][0].id))
    rank = np.empty(len(kept), dtype=np.int64)
    rank[by_time] = np.arange(len(kept))
    hyperedges = tuple(Hyperedge(n + j, members) for j, (_, members) in enumerate(kept))
    emb_ids = tuple(ev.embedding_id for ev, _ in kept)
    if embeddings is not None and kept:
        text = np.stack([np.asarray(embeddings[k], dtype=np.float64) for k in emb_ids])
    else:
        dim = getattr(embeddings, "dim", None) or 0
        text = np.zeros((len(kept), dim))
    return HypergraphSnapshot(
        date=day,
        tickers=universe,
        stock_features=feats,
        news_ids=tuple(ev.id for ev, _ in kept),
        news_sentiment=np.asarray([ev.sentiment for ev, _ in kept], dtype=np.float64),
        news_rank=rank,
        news_text=text,
        embedding_ids=emb_ids,
        hyperedges=hyperedges,
        n_events=len(events),
    )


def _check_node(snapshot: HypergraphSnapshot, v) -> int:
    idx = v.index if isinstance(v, NodeRef) else int(v)
    if not 0 <= idx < snapshot.n_nodes:
        raise IndexError(f"node {idx} out of range for {snapshot.n_nodes} nodes")
    if isinstance(v, NodeRef) and snapshot.node(idx).kind is not v.kind:
        raise HypergraphError(f"node {idx} is not a {v.kind.value} node")
    return idx


def edges_of_node(snapshot: HypergraphSnapshot, v) -> list[int]:
    """Hyperedges incident to node ``v`` (NodeRef or index), ascending."""
    idx = _check_node(snapshot, v)
    return sorted(set(snapshot.pair_edge[snapshot.pair_node == idx].tolist()))


def members_of_edge(snapshot: HypergraphSnapshot, e: int) -> list[NodeRef]:
    """Members of hyperedge ``e``: its event node first, then stocks ascending."""
    if not 0 <= e < snapshot.n_edges:
        raise IndexError(f"hyperedge {e} out of range for {snapshot.n_edges} hyperedges")
    return [snapshot.node(i) for i in snapshot.hyperedges[e].nodes]


def export_snapshot(snapshot: HypergraphSnapshot, path) -> None:
    """Write a debug view as JSON lines: a header, nodes, edges, incidence triples."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "type": "snapshot",
            "date": snapshot.date.isoformat(),
            "n_nodes": snapshot.n_nodes,
            "n_edges": snapshot.n_edges,
            "n_events": snapshot.n_events,
        }
        fh.write(json.dumps(header) + "\n")
        for k, t in enumerate(snapshot.tickers):
            fh.write(json.dumps({"type": "node", "index": k, "kind": "stock", "ticker": t}) + "\n")
        for k, eid in enumerate(snapshot.news_ids):
            rec = {
                "type": "node",
                "index": snapshot.n_stocks + k,
                "kind": "news",
                "event_id": eid,
                "sentiment": int(snapshot.news_sentiment[k]),
                "rank": int(snapshot.news_rank[k]),
            }
            fh.write(json.dumps(rec) + "\n")
        for j, e in enumerate(snapshot.hyperedges):
            fh.write(json.dumps({"type": "edge", "index": j, "members": list(e.nodes)}) + "\n")
        for v, j in zip(snapshot.pair_node.tolist(), snapshot.pair_edge.tolist()):
            fh.write(json.dumps({"type": "incidence", "node": v, "edge": j, "value": 1}) + "\n")
