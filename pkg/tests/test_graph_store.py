import json
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ekg.core import FeatureStore, check_graph
from ekg.errors import CorruptStore, DuplicateClip, FormatError, GraphInvariantError
from ekg.graph_store import (
    build_graph,
    compute_stats,
    graphs_equal,
    load_graph,
    load_text_features,
    save_graph,
)

from factories import make_graph, make_records


def test_three_record_fixture(three_node_graph):
    g = three_node_graph
    assert sorted(g.edges) == [(0, 1), (1, 2)]
    stats = compute_stats(g)
    assert (stats.node_count, stats.edge_count, stats.chain_count) == (3, 2, 1)


def test_ids_follow_clip_order():
    recs = make_records([3, 2])
    random.Random(0).shuffle(recs)
    feats = FeatureStore(np.zeros((5, 2), np.float32))
    g = build_graph(recs, feats)
    keys = [g.nodes[i].clip_key for i in g.sorted_ids()]
    assert keys == sorted(keys)
    assert sorted(g.edges) == [(0, 1), (1, 2), (3, 4)]


def test_duplicate_clip_rejected():
    recs = make_records([2])
    with pytest.raises(DuplicateClip):
        build_graph(recs + recs[:1], FeatureStore(np.zeros((2, 2), np.float32)))


def test_gap_in_sequence_breaks_chain():
    recs = make_records([4])
    del recs[2]
    g = build_graph(recs, FeatureStore(np.zeros((4, 2), np.float32)))
    assert sorted(g.edges) == [(0, 1)]
    assert compute_stats(g).chain_count == 2


def test_dangling_feature_row_rejected():
    with pytest.raises(GraphInvariantError):
        build_graph(make_records([3]), FeatureStore(np.zeros((2, 2), np.float32)))


def test_round_trip(tmp_path, mixed_graph):
    text = FeatureStore(np.arange(mixed_graph.features.rows * 3, dtype=np.float32).reshape(-1, 3))
    save_graph(mixed_graph, tmp_path / "g", text)
    back = load_graph(tmp_path / "g")
    assert graphs_equal(back, mixed_graph)
    assert back.features.to_bytes() == mixed_graph.features.to_bytes()
    assert load_text_features(tmp_path / "g").equals(text)
    manifest = json.loads((tmp_path / "g" / "manifest.json").read_text())
    assert set(manifest["files"]) == {"nodes.jsonl", "edges.bin", "features.ekgf", "text.ekgf"}


def test_save_is_deterministic(tmp_path, mixed_graph):
    save_graph(mixed_graph, tmp_path / "a")
    save_graph(load_graph(tmp_path / "a"), tmp_path / "b")
    for name in ("nodes.jsonl", "edges.bin", "features.ekgf", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_edges_file_layout(tmp_path, three_node_graph):
    save_graph(three_node_graph, tmp_path)
    pairs = np.frombuffer((tmp_path / "edges.bin").read_bytes(), dtype="<u8").reshape(-1, 2)
    assert pairs.tolist() == [[0, 1], [1, 2]]


@pytest.mark.parametrize("name", ["nodes.jsonl", "edges.bin", "features.ekgf"])
def test_corruption_detected(tmp_path, mixed_graph, name):
    save_graph(mixed_graph, tmp_path)
    path = tmp_path / name
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptStore):
        load_graph(tmp_path)


def test_not_a_store(tmp_path):
    with pytest.raises(FormatError):
        load_graph(tmp_path)


def test_stats_histogram_and_mean(mixed_graph):
    stats = compute_stats(mixed_graph)
    durations = [r.duration_s for r in mixed_graph.nodes.values()]
    assert sum(c for _, c in stats.duration_histogram) == stats.node_count
    assert stats.mean_duration_s == pytest.approx(math.fsum(durations) / len(durations))
    assert stats.event_node_count + stats.scene_node_count == stats.node_count
    assert stats.chain_count == stats.node_count - stats.edge_count == 5


@given(st.lists(st.integers(1, 6), min_size=1, max_size=8), st.integers(0, 3))
@settings(max_examples=40, deadline=None)
def test_built_graphs_are_path_unions(lengths, scene_every):
    g = make_graph(lengths, dim=2, scene_every=scene_every)
    check_graph(g)
    assert len(g.nodes) - len(g.edges) == compute_stats(g).chain_count == len(lengths)
