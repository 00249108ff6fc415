import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import DAY, make_event, random_snapshot
from ghan.hypergraph import (
    HypergraphError,
    NodeKind,
    NodeRef,
    build_snapshot,
    edges_of_node,
    export_snapshot,
    members_of_edge,
)


def feats(n):
    return np.zeros((n, 8))


def brute_incidence(universe, events):
    """Oracle: H[v, e] = 1 iff v is the event node or a mentioned in-universe stock."""
    kept = []
    for ev in sorted(events, key=lambda e: e.id):
        members = [universe.index(t) for t in universe if t in ev.tickers]
        if members:
            kept.append(members)
    n = len(universe)
    H = np.zeros((n + len(kept), len(kept)), dtype=int)
    for j, members in enumerate(kept):
        H[n + j, j] = 1
        for i in members:
            H[i, j] = 1
    return H


def test_two_stocks_one_event():
    snap = build_snapshot(DAY, [make_event("e1", ["A", "B"])], feats(2), ["A", "B"])
    assert snap.n_nodes == 3 and snap.n_edges == 1
    assert snap.incidence().toarray()[:, 0].tolist() == [1, 1, 1]


def test_event_without_mentions_excluded():
    snap = build_snapshot(DAY, [make_event("e1", [])], feats(2), ["A", "B"])
    assert snap.n_edges == 0 and snap.n_events == 1
    assert snap.n_edges <= snap.n_events
    assert snap.n_nodes == 2


def test_hand_written_incidence():
    events = [make_event("e1", ["A"]), make_event("e2", ["A", "C"])]
    snap = build_snapshot(DAY, events, feats(3), ["A", "B", "C"])
    want = np.array(
        [
            [1, 1],  # A
            [0, 0],  # B
            [0, 1],  # C
            [1, 0],  # e1
            [0, 1],  # e2
        ]
    )
    assert np.array_equal(snap.incidence().toarray(), want)


def test_out_of_universe_mentions_dropped():
    snap = build_snapshot(DAY, [make_event("e1", ["A", "ZZZ"]), make_event("e2", ["ZZZ"])], feats(2), ["A", "B"])
    assert snap.n_edges == 1
    assert snap.hyperedges[0].members == (0,)
    assert snap.n_events == 2


def test_empty_universe_rejected():
    with pytest.raises(HypergraphError):
        build_snapshot(DAY, [], np.zeros((0, 8)), [])


def test_neighbourhood_queries():
    events = [make_event("e1", ["B"]), make_event("e2", ["C", "A"])]
    snap = build_snapshot(DAY, events, feats(3), ["A", "B", "C"])
    assert edges_of_node(snap, NodeRef(NodeKind.STOCK, 0)) == [1]
    assert edges_of_node(snap, 4) == [1]
    assert edges_of_node(snap, NodeRef(NodeKind.NEWS, 3)) == [0]
    lonely = build_snapshot(DAY, events[:1], feats(3), ["A", "B", "C"])
    assert edges_of_node(lonely, 0) == []
    assert [m.index for m in members_of_edge(snap, 1)] == [4, 0, 2]
    assert members_of_edge(snap, 0)[0].kind is NodeKind.NEWS
    assert [m.index for m in members_of_edge(snap, 0)] == [3, 1]


def test_query_range_errors():
    snap = build_snapshot(DAY, [make_event("e1", ["A"])], feats(1), ["A"])
    with pytest.raises(IndexError):
        edges_of_node(snap, 5)
    with pytest.raises(IndexError):
        members_of_edge(snap, 1)
    with pytest.raises(HypergraphError):
        edges_of_node(snap, NodeRef(NodeKind.NEWS, 0))


def test_news_rank_by_timestamp():
    events = [make_event("e1", ["A"], minute=30), make_event("e2", ["A"], minute=5), make_event("e3", ["A"], minute=10)]
    snap = build_snapshot(DAY, events, feats(1), ["A"])
    assert snap.news_ids == ("e1", "e2", "e3")
    assert snap.news_rank.tolist() == [2, 0, 1]


event_specs = st.lists(
    st.tuples(st.sets(st.sampled_from(["A", "B", "C", "D", "X"]), max_size=4), st.integers(0, 400)),
    max_size=12,
)


@given(event_specs, st.randoms(use_true_random=False))
def test_incidence_matches_oracle_and_is_order_independent(spec, rnd):
    universe = ["A", "B", "C", "D"]
    events = [make_event(f"e{i:02d}", sorted(t), minute=m) for i, (t, m) in enumerate(spec)]
    snap = build_snapshot(DAY, events, feats(4), universe)
    H = snap.incidence().toarray().astype(int)
    assert np.array_equal(H, brute_incidence(universe, events))
    if snap.n_edges:
        assert H.sum(axis=0).min() >= 2
        assert np.all(H[4:].sum(axis=1) == 1)
    assert snap.n_edges <= snap.n_events == len(events)
    shuffled = list(events)
    rnd.shuffle(shuffled)
    again = build_snapshot(DAY, shuffled, feats(4), universe)
    assert np.array_equal(again.incidence().toarray(), snap.incidence().toarray())
    assert again.news_ids == snap.news_ids and np.array_equal(again.news_rank, snap.news_rank)


@given(st.integers(0, 10_000))
def test_queries_mutually_inverse(seed):
    snap = random_snapshot(np.random.default_rng(seed), n_stocks=5, n_events=6, p_empty=0.2)
    H = snap.incidence().toarray()
    for v in range(snap.n_nodes):
        assert edges_of_node(snap, v) == [int(e) for e in np.flatnonzero(H[v])]
    for e in range(snap.n_edges):
        members = [m.index for m in members_of_edge(snap, e)]
        assert sorted(members) == [int(v) for v in np.flatnonzero(H[:, e])]
        assert members[0] >= snap.n_stocks and members[1:] == sorted(members[1:])
        for v in members:
            assert e in edges_of_node(snap, v)


def test_node_kinds_partition():
    snap = build_snapshot(DAY, [make_event("e1", ["A"])], feats(2), ["A", "B"])
    assert [snap.node(i).kind for i in range(3)] == [NodeKind.STOCK, NodeKind.STOCK, NodeKind.NEWS]
    with pytest.raises(IndexError):
        snap.node(3)


def test_export_snapshot(tmp_path):
    snap = build_snapshot(DAY, [make_event("e1", ["A", "B"])], feats(2), ["A", "B"])
    path = tmp_path / "snap.jsonl"
    export_snapshot(snap, path)
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert lines[0]["type"] == "snapshot" and lines[0]["n_edges"] == 1
    triples = [l for l in lines if l["type"] == "incidence"]
    assert len(triples) == 3
