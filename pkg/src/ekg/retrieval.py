"""Coarse-to-fine retrieval over the event graph.

Coarse: exact top-K cosine search of the instruction embedding over event
text embeddings, then expansion of the seeds along causal edges. Fine:
per-step top-n search of the observation embedding restricted to the
expanded subgraph, with separate quotas for event and scene nodes, and
selection of the tail node the agent should head for.

All results are exact. Large indexes screen candidates with an int8 pass
whose worst-case error is bounded, then rescore survivors in float64, so
the output always equals :func:`exhaustive_oracle`.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .core import (
    ZERO_NORM,
    EventGraph,
    EventKind,
    FeatureStore,
    l2_normalize,
    normalize_rows,
    row_norms,
)
from .errors import (
    DimMismatch,
    EmptyHits,
    EmptySubgraph,
    InvalidConfig,
    InvalidVector,
    UnknownNode,
)

# indexes at least this large (rows, and rows * dim) use int8 screening
SCREEN_MIN_ROWS = 4096
SCREEN_MIN_CELLS = 1 << 21
_SUB_CACHE_SIZE = 64


@dataclass(frozen=True)
class ScoredHit:
    node_id: int
    score: float
    kind: EventKind

    def to_json(self) -> dict:
        return {"id": self.node_id, "score": self.score, "kind": self.kind.value}


@dataclass(frozen=True)
class SubGraph:
    node_ids: tuple[int, ...]
    seed_ids: tuple[int, ...]
    parent: EventGraph | None = field(default=None, compare=False, repr=False)


class VectorIndex:
    """Exact cosine index over the rows of a feature store.

    Entry ``i`` belongs to ``node_ids[i]`` (ascending). Zero rows are kept
    but never returned.
    """

    def __init__(self, store: FeatureStore, node_ids: Sequence[int] | None = None,
                 kinds: Sequence[EventKind] | None = None, screen: bool | None = None):
        if store.dim <= 0:
            raise InvalidVector("index dimension must be positive")
        self.store = store
        self.dim = store.dim
        n = store.rows
        ids = np.arange(n, dtype=np.int64) if node_ids is None else np.asarray(node_ids, dtype=np.int64)
        if ids.shape != (n,):
            raise InvalidConfig("node_ids must have one entry per row")
        if n > 1 and not np.all(np.diff(ids) > 0):
            raise InvalidConfig("node_ids must be strictly ascending")
        self.node_ids = ids
        if kinds is None:
            self.is_event = np.ones(n, dtype=bool)
        else:
            if len(kinds) != n:
                raise InvalidConfig("kinds must have one entry per row")
            self.is_event = np.fromiter((k is EventKind.EVENT for k in kinds), dtype=bool, count=n)
        self.entries = store.normalize().data
        self.zero = row_norms(store.data) < ZERO_NORM
        if screen is None:
            screen = n >= SCREEN_MIN_ROWS and n * self.dim >= SCREEN_MIN_CELLS
        self.screen = screen
        self._quant: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None
        self._sub_cache: OrderedDict[tuple[int, ...], tuple] = OrderedDict()
        self._lock = threading.Lock()
        if screen:
            self._quantized()

    def __len__(self) -> int:
        return self.store.rows

    def kind_at(self, pos: int) -> EventKind:
        return EventKind.EVENT if self.is_event[pos] else EventKind.SCENE

    def positions(self, node_ids: Iterable[int]) -> np.ndarray:
        ids = np.asarray(list(node_ids), dtype=np.int64)
        pos = np.searchsorted(self.node_ids, ids)
        ok = pos < len(self.node_ids)
        ok[ok] = self.node_ids[pos[ok]] == ids[ok]
        if not ok.all():
            raise UnknownNode(f"node {int(ids[~ok][0])} is not in the index")
        return pos

    def _quantized(self):
        with self._lock:
            if self._quant is None:
                self._quant = _kernels.quantize_rows(self.entries)
            return self._quant

    def restricted(self, node_ids: tuple[int, ...]):
        """Float64 unit rows for a node subset, cached per subset."""
        cached = self._sub_cache.get(node_ids)
        if cached is not None:
            return cached
        pos = self.positions(node_ids)
        pos = pos[~self.zero[pos]]
        view = (self.node_ids[pos], normalize_rows(self.store.data[pos]), self.is_event[pos])
        with self._lock:
            self._sub_cache[node_ids] = view
            while len(self._sub_cache) > _SUB_CACHE_SIZE:
                self._sub_cache.popitem(last=False)
        return view


def build_index(features: FeatureStore, node_ids: Sequence[int] | None = None,
                kinds: Sequence[EventKind] | None = None, screen: bool | None = None) -> VectorIndex:
    return VectorIndex(features, node_ids, kinds, screen)


def index_for_graph(g: EventGraph, store: FeatureStore | None = None, screen: bool | None = None) -> VectorIndex:
    """Index ``store`` (default: the graph's visual features) with one entry
    per node in ascending id order."""
    store = g.features if store is None else store
    ids = g.sorted_ids()
    rows = [g.nodes[i].feature_row for i in ids]
    if rows != list(range(store.rows)):
        store = store.take(rows)
    return VectorIndex(store, ids, [g.nodes[i].kind for i in ids], screen)


def _query_unit(query, dim: int) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != dim:
        raise DimMismatch(f"query has shape {q.shape}, index dimension is {dim}")
    return l2_normalize(q)


def _exact_scores(unit_rows64: np.ndarray, q: np.ndarray) -> np.ndarray:
    # einsum keeps the per-row summation order independent of row position,
    # so duplicate rows score identically
    return np.clip(np.einsum("ij,j->i", unit_rows64, q), -1.0, 1.0)


def _ranked(ids: np.ndarray, scores: np.ndarray, is_event: np.ndarray, k: int) -> list[ScoredHit]:
    order = np.lexsort((ids, -scores))[:k]
    return [
        ScoredHit(int(ids[i]), float(scores[i]), EventKind.EVENT if is_event[i] else EventKind.SCENE)
        for i in order
    ]


def _screen_candidates(index: VectorIndex, q: np.ndarray, k: int) -> np.ndarray:
    codes, scales, l1 = index._quantized()
    qmax = float(np.abs(q).max())
    if qmax == 0.0:
        return np.flatnonzero(~index.zero)
    sq = qmax / 127.0
    qcodes = np.clip(np.rint(q / sq), -127, 127).astype(np.int8)
    approx = scales * sq * _kernels.int8_scores(codes, qcodes).astype(np.float64)
    q_l1 = float(np.abs(q).sum())
    # rounding of row codes, query codes and the float32 unit rows
    bound = scales * (0.5 * sq * l1 + 0.5 * q_l1) + 1e-7 * q_l1 + 1e-6
    lo = np.where(index.zero, -np.inf, approx - bound)
    hi = np.where(index.zero, -np.inf, approx + bound)
    n = lo.shape[0]
    threshold = np.partition(lo, n - k)[n - k]
    return np.flatnonzero(hi >= threshold)


def coarse_retrieve(index: VectorIndex, query, k: int) -> list[ScoredHit]:
    """The ``k`` entries most cosine-similar to ``query``, ordered by score
    descending then node id ascending."""
    if k < 1:
        raise InvalidConfig(f"K must be >= 1, got {k}")
    q = _query_unit(query, index.dim)
    valid = int((~index.zero).sum())
    if index.screen and valid > k:
        cand = _screen_candidates(index, q, k)
    else:
        cand = np.flatnonzero(~index.zero)
    scores = _exact_scores(normalize_rows(index.store.data[cand]), q)
    return _ranked(index.node_ids[cand], scores, index.is_event[cand], k)


def expand_causal(g: EventGraph, seeds: Iterable[int], max_depth: int | None = None) -> SubGraph:
    """Seeds plus every node reachable along directed edges (at most
    ``max_depth`` hops when given)."""
    seed_list = [int(s) for s in seeds]
    for s in seed_list:
        if s not in g.nodes:
            raise UnknownNode(f"unknown seed node {s}")
    if max_depth is not None and max_depth < 0:
        raise InvalidConfig("max_depth must be non-negative")
    out: set[int] = set()
    for s in seed_list:
        cur: int | None = s
        depth = 0
        while cur is not None:
            if max_depth is None and cur in out and cur != s:
                break  # the rest of this chain is already included
            out.add(cur)
            if max_depth is not None and depth >= max_depth:
                break
            cur = g.successor(cur)
            depth += 1
    return SubGraph(tuple(sorted(out)), tuple(sorted(set(seed_list))), g)


def fine_retrieve(index: VectorIndex, sub: SubGraph, obs, quota: tuple[int, int] = (2, 1)) -> list[ScoredHit]:
    """Top ``quota[0]`` event hits and top ``quota[1]`` scene hits within
    the subgraph, merged into one ranking."""
    if not sub.node_ids:
        raise EmptySubgraph("fine retrieval needs a non-empty subgraph")
    max_events, max_scenes = (int(x) for x in quota)
    if max_events < 0 or max_scenes < 0 or max_events + max_scenes < 1:
        raise InvalidConfig(f"invalid quota {quota}")
    q = _query_unit(obs, index.dim)
    ids, unit, is_event = index.restricted(tuple(sub.node_ids))
    scores = _exact_scores(unit, q)
    hits = []
    for want_event, m in ((True, max_events), (False, max_scenes)):
        if m == 0:
            continue
        mask = is_event == want_event
        hits.extend(_ranked(ids[mask], scores[mask], is_event[mask], m))
    hits.sort(key=lambda h: (-h.score, h.node_id))
    return hits


def select_tail(g: EventGraph, hits: Sequence[ScoredHit], max_depth: int | None = None) -> int:
    """Walk from the best event hit to the end of its chain (or
    ``max_depth`` hops); fall back to the best scene hit."""
    if not hits:
        raise EmptyHits("select_tail needs at least one hit")
    ranked = sorted(hits, key=lambda h: (-h.score, h.node_id))
    events = [h for h in ranked if h.kind is EventKind.EVENT]
    if not events:
        return ranked[0].node_id
    cur = events[0].node_id
    if cur not in g.nodes:
        raise UnknownNode(f"hit references unknown node {cur}")
    depth = 0
    while max_depth is None or depth < max_depth:
        nxt = g.successor(cur)
        if nxt is None:
            break
        cur, depth = nxt, depth + 1
    return cur


def exhaustive_oracle(features: FeatureStore | np.ndarray, query, k: int,
                      kind_filter: EventKind | None = None, kinds: Sequence[EventKind] | None = None,
                      node_ids: Sequence[int] | None = None) -> list[ScoredHit]:
    """Reference linear scan in float64 with the same ordering contract."""
    data = features.data if isinstance(features, FeatureStore) else np.asarray(features, dtype=np.float32)
    n, dim = data.shape
    q = _query_unit(query, dim)
    ids = np.arange(n, dtype=np.int64) if node_ids is None else np.asarray(node_ids, dtype=np.int64)
    is_event = (np.ones(n, bool) if kinds is None
                else np.array([kd is EventKind.EVENT for kd in kinds], dtype=bool))
    norms = np.sqrt(np.einsum("ij,ij->i", data.astype(np.float64), data.astype(np.float64)))
    keep = norms >= ZERO_NORM
    if kind_filter is not None:
        keep &= is_event == (kind_filter is EventKind.EVENT)
    sel = np.flatnonzero(keep)
    scores = _exact_scores(normalize_rows(data[sel]), q)
    return _ranked(ids[sel], scores, is_event[sel], k)
