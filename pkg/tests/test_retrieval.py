import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ekg.core import EventKind, FeatureStore
from ekg.errors import DimMismatch, EmptyHits, EmptySubgraph, InvalidConfig, InvalidVector, UnknownNode
from ekg.retrieval import (
    ScoredHit,
    SubGraph,
    build_index,
    coarse_retrieve,
    exhaustive_oracle,
    expand_causal,
    fine_retrieve,
    index_for_graph,
    select_tail,
)

import oracles
from factories import make_graph


def _pairs(hits):
    return [(h.node_id, h.score) for h in hits]


def test_build_index_normalizes_and_flags_zero_rows():
    data = np.array([[3, 4, 0], [0, 0, 0], [1, 1, 1]], np.float32)
    idx = build_index(FeatureStore(data))
    assert len(idx) == 3
    np.testing.assert_allclose(np.linalg.norm(idx.entries[[0, 2]], axis=1), 1.0, atol=1e-6)
    assert idx.zero.tolist() == [False, True, False]
    assert 1 not in [h.node_id for h in coarse_retrieve(idx, [0, 0, 1], 10)]


def test_index_entries_match_per_row_normalization():
    data = np.random.default_rng(0).standard_normal((10_000, 8)).astype(np.float32)
    idx = build_index(FeatureStore(data))
    ref = data / np.linalg.norm(data.astype(np.float64), axis=1, keepdims=True)
    assert np.abs(idx.entries - ref).max() < 1e-6


def test_non_finite_rows_rejected():
    with pytest.raises(InvalidVector):
        build_index(FeatureStore(np.array([[np.nan, 1.0]])))


def test_self_retrieval_and_saturation():
    data = np.random.default_rng(1).standard_normal((6, 5)).astype(np.float32)
    idx = build_index(FeatureStore(data))
    hit = coarse_retrieve(idx, data[4], 1)[0]
    assert hit.node_id == 4 and hit.score == pytest.approx(1.0)
    hits = coarse_retrieve(idx, data[0], 50)
    assert len(hits) == 6
    assert [(-h.score, h.node_id) for h in hits] == sorted((-h.score, h.node_id) for h in hits)


def test_coarse_matches_oracles():
    rng = np.random.default_rng(2)
    data = rng.standard_normal((1000, 12)).astype(np.float32)
    q = rng.standard_normal(12)
    hits = coarse_retrieve(build_index(FeatureStore(data)), q, 10)
    assert hits == exhaustive_oracle(FeatureStore(data), q, 10)
    ref = oracles.topk(data, q, 10)
    assert [h.node_id for h in hits] == [i for i, _ in ref]
    np.testing.assert_allclose([h.score for h in hits], [s for _, s in ref], atol=1e-12)


def test_errors():
    idx = build_index(FeatureStore(np.eye(3, dtype=np.float32)))
    with pytest.raises(DimMismatch):
        coarse_retrieve(idx, [1, 0], 1)
    with pytest.raises(InvalidConfig):
        coarse_retrieve(idx, [1, 0, 0], 0)
    with pytest.raises(DimMismatch):
        exhaustive_oracle(np.eye(3, dtype=np.float32), [1, 0], 1)


def test_duplicates_tie_by_ascending_id():
    rng = np.random.default_rng(3)
    base = rng.standard_normal((50, 16)).astype(np.float32)
    data = np.concatenate([base, base, base])
    q = base[7].astype(np.float64) + 0.1
    for screen in (False, True):
        hits = coarse_retrieve(build_index(FeatureStore(data), screen=screen), q, 6)
        ids = [h.node_id for h in hits]
        assert ids[:3] == [ids[0], ids[0] + 50, ids[0] + 100]
        assert hits[0].score == hits[1].score == hits[2].score


@given(st.floats(1e-3, 1e3), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_scale_invariance(c, seed):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((200, 8)).astype(np.float32)
    idx = build_index(FeatureStore(data))
    q = rng.standard_normal(8)
    a = [h.node_id for h in coarse_retrieve(idx, q, 7)]
    b = [h.node_id for h in coarse_retrieve(idx, c * q, 7)]
    assert a == b


@pytest.mark.parametrize("seed", range(5))
def test_screened_path_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    n, d = 5000, 64
    data = rng.standard_normal((n, d)).astype(np.float32)
    data[rng.choice(n, 300)] = data[rng.choice(n, 300)]  # plenty of exact duplicates
    data[rng.choice(n, 5)] = 0.0
    store = FeatureStore(data)
    idx = build_index(store, screen=True)
    for _ in range(10):
        q = rng.standard_normal(d) if rng.random() < 0.5 else data[rng.integers(n)].astype(np.float64)
        k = int(rng.integers(1, 40))
        assert coarse_retrieve(idx, q, k) == exhaustive_oracle(store, q, k)


def test_expand_examples(three_node_graph):
    g = make_graph([5])
    assert expand_causal(g, [4]).node_ids == (4,)
    assert expand_causal(g, [2]).node_ids == (2, 3, 4)
    assert expand_causal(g, [1, 3]).node_ids == (1, 2, 3, 4)
    assert expand_causal(g, [1], max_depth=2).node_ids == (1, 2, 3)
    with pytest.raises(UnknownNode):
        expand_causal(g, [9])


@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.data())
@settings(max_examples=60, deadline=None)
def test_expand_matches_transitive_closure(lengths, data):
    g = make_graph(lengths, dim=2)
    n = len(g.nodes)
    seeds = data.draw(st.lists(st.integers(0, n - 1), min_size=1, max_size=3))
    reach = oracles.closure(n, g.edges)
    expected = tuple(j for j in range(n) if any(reach[s][j] for s in seeds))
    sub = expand_causal(g, seeds)
    assert sub.node_ids == expected
    assert set(sub.seed_ids) <= set(sub.node_ids)
    assert expand_causal(g, sub.node_ids).node_ids == sub.node_ids


def test_fine_single_event_equal_to_obs():
    g = make_graph([3], dim=4)
    idx = index_for_graph(g)
    obs = g.features.data[g.nodes[1].feature_row]
    hits = fine_retrieve(idx, SubGraph((1,), (1,), g), obs, (1, 0))
    assert [h.node_id for h in hits] == [1] and hits[0].score == pytest.approx(1.0)


def test_fine_respects_quota_and_subgraph(mixed_graph):
    g = mixed_graph
    idx = index_for_graph(g)
    kinds = [g.nodes[i].kind for i in g.sorted_ids()]
    rng = np.random.default_rng(4)
    sub = expand_causal(g, [0, 9])
    for quota in [(2, 1), (1, 0), (0, 2), (5, 5)]:
        obs = rng.standard_normal(16)
        hits = fine_retrieve(idx, sub, obs, quota)
        assert all(h.node_id in sub.node_ids for h in hits)
        ev = [h for h in hits if h.kind is EventKind.EVENT]
        sc = [h for h in hits if h.kind is EventKind.SCENE]
        sub_kinds = [kinds[i] for i in sub.node_ids]
        assert len(ev) == min(quota[0], sub_kinds.count(EventKind.EVENT))
        assert len(sc) == min(quota[1], sub_kinds.count(EventKind.SCENE))
        rows = g.features.data[list(sub.node_ids)]
        for kind, got, m in ((EventKind.EVENT, ev, quota[0]), (EventKind.SCENE, sc, quota[1])):
            keep = [kinds[i] is kind for i in sub.node_ids]
            ref = oracles.topk(rows, obs, m, keep)
            assert [h.node_id for h in got] == [sub.node_ids[i] for i, _ in ref]


def test_fine_errors(mixed_graph):
    idx = index_for_graph(mixed_graph)
    with pytest.raises(EmptySubgraph):
        fine_retrieve(idx, SubGraph((), ()), np.ones(16))
    with pytest.raises(InvalidConfig):
        fine_retrieve(idx, SubGraph((0,), ()), np.ones(16), (0, 0))
    with pytest.raises(UnknownNode):
        fine_retrieve(idx, SubGraph((999,), ()), np.ones(16))


def test_select_tail_examples():
    g = make_graph([4, 2], scene_every=0)
    ev = EventKind.EVENT
    assert select_tail(g, [ScoredHit(3, 0.9, ev)]) == 3
    assert select_tail(g, [ScoredHit(0, 0.9, ev), ScoredHit(4, 0.5, ev)]) == 3
    assert select_tail(g, [ScoredHit(0, 0.9, ev)], max_depth=1) == 1
    scenes = [ScoredHit(5, 0.2, EventKind.SCENE), ScoredHit(4, 0.7, EventKind.SCENE)]
    assert select_tail(g, scenes) == 4
    with pytest.raises(EmptyHits):
        select_tail(g, [])
