"""Synthetic navigation benchmark for knowledge injection.

Houses grow from a fixed room-type grammar (entrance, corridor, living
room, kitchen, ...), so which room type leads toward which is consistent
across houses while the layout of any single house is random. Room features
are noisy copies of per-type prototypes. Walkthroughs of training houses
are mined into an event graph; test houses are never seen during mining.

Two policies are compared on unseen houses:

* ``baseline`` greedily moves to the neighbour whose feature best matches
  the target type's prototype.
* ``knowledge`` retrieves seed events for the instruction once, expands them
  along causal edges, and at every step retrieves the events closest to the
  current view, looks ahead along the chain (``select_tail``) and moves to
  the neighbour that best matches the look-ahead node's feature.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import EventGraph, EventKind, EventRecord, FeatureStore, l2_normalize
from .errors import EmptyResults, InvalidConfig
from .fusion import augment_instruction
from .graph_store import build_graph
from .retrieval import (
    VectorIndex,
    coarse_retrieve,
    expand_causal,
    fine_retrieve,
    index_for_graph,
    select_tail,
)

ROOM_TYPES = (
    "entrance", "corridor", "living room", "kitchen", "dining room", "bedroom",
    "bathroom", "office", "closet", "laundry room", "garage", "balcony", "pantry",
)

# child type -> maximum count, per parent type
GRAMMAR: dict[str, dict[str, int]] = {
    "entrance": {"corridor": 1},
    "corridor": {"living room": 1, "bedroom": 3, "bathroom": 1, "office": 1, "closet": 1},
    "living room": {"kitchen": 1, "dining room": 1, "balcony": 1},
    "kitchen": {"pantry": 1, "laundry room": 1},
    "laundry room": {"garage": 1},
    "bedroom": {"bathroom": 1, "closet": 1},
    "dining room": {},
    "bathroom": {},
    "office": {},
    "closet": {},
    "garage": {},
    "balcony": {},
    "pantry": {},
}

BASELINE = "baseline"
KNOWLEDGE = "knowledge"

DEFAULT_DIM = 64
DEFAULT_SIGMA = 0.6
DEFAULT_SIZE_RANGE = (6, 14)
_PROTOTYPE_SEED = 20240611


def _digest_seed(*parts) -> int:
    h = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def hash_vector(token: str, dim: int) -> np.ndarray:
    """Deterministic unit vector for a string."""
    rng = np.random.default_rng(_digest_seed("token", token))
    return l2_normalize(rng.standard_normal(dim))


def embed_triple(src: str, action: str, dst: str, dim: int) -> np.ndarray:
    v = hash_vector(f"src:{src}", dim) + hash_vector(f"act:{action}", dim) + hash_vector(f"dst:{dst}", dim)
    return l2_normalize(v)


def embed_scene(room_type: str, dim: int) -> np.ndarray:
    return hash_vector(f"scene:{room_type}", dim)


def goal_action(room_type: str) -> str:
    return f"walk toward the {room_type}"


def embed_instruction(target_type: str, dim: int) -> np.ndarray:
    """Text embedding of the instruction ``walk toward the <target>``; it
    lives in the action slot of the event-triple embedding."""
    return hash_vector(f"act:{goal_action(target_type)}", dim)


def prototypes(dim: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(_digest_seed("prototypes", _PROTOTYPE_SEED, dim))
    return {t: l2_normalize(rng.standard_normal(dim)) for t in ROOM_TYPES}


@dataclass(frozen=True)
class HouseWorld:
    name: str
    room_types: tuple[str, ...]
    features: np.ndarray = field(repr=False)
    doors: tuple[tuple[int, int], ...]
    start_room: int
    target_room_type: str
    rng_seed: int

    @property
    def size(self) -> int:
        return len(self.room_types)

    def neighbors(self, room: int) -> list[int]:
        return self._adjacency()[room]

    def _adjacency(self) -> list[list[int]]:
        adj = self.__dict__.get("_adj")
        if adj is None:
            adj = [[] for _ in self.room_types]
            for a, b in self.doors:
                adj[a].append(b)
                adj[b].append(a)
            adj = [sorted(x) for x in adj]
            object.__setattr__(self, "_adj", adj)
        return adj

    def distances(self, source: int) -> list[int]:
        dist = [-1] * self.size
        dist[source] = 0
        queue = deque([source])
        while queue:
            u = queue.popleft()
            for v in self.neighbors(u):
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        return dist

    def is_connected(self) -> bool:
        return all(d >= 0 for d in self.distances(0))

    def diameter(self) -> int:
        return max(max(self.distances(s)) for s in range(self.size))

    def shortest_to_target(self, source: int) -> int:
        dist = self.distances(source)
        return min(d for d, t in zip(dist, self.room_types) if t == self.target_room_type and d >= 0)

    def signature(self) -> str:
        return json.dumps([self.room_types, self.doors], separators=(",", ":"))

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "room_types": list(self.room_types),
            "doors": [list(d) for d in self.doors],
            "start_room": self.start_room,
            "target_room_type": self.target_room_type,
            "rng_seed": self.rng_seed,
            "features": self.features.astype("<f4").tobytes().hex(),
        }

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode("utf-8")


def _grow_house(rng: np.random.Generator, size: int) -> tuple[list[str], list[tuple[int, int]]]:
    types = ["entrance"]
    doors: list[tuple[int, int]] = []
    counts: list[dict[str, int]] = [{}]
    while len(types) < size:
        options = []
        for room, t in enumerate(types):
            for child, cap in GRAMMAR[t].items():
                if counts[room].get(child, 0) < cap:
                    options.append((room, child))
        if not options:
            break
        room, child = options[int(rng.integers(len(options)))]
        counts[room][child] = counts[room].get(child, 0) + 1
        types.append(child)
        counts.append({})
        doors.append((room, len(types) - 1))
    return types, doors


def _make_world(name: str, seed: int, size_range: tuple[int, int], dim: int, sigma: float,
                protos: dict[str, np.ndarray]) -> HouseWorld:
    rng = np.random.default_rng(seed)
    size = int(rng.integers(size_range[0], size_range[1] + 1))
    types, doors = _grow_house(rng, size)
    noise = rng.standard_normal((len(types), dim)) * (sigma / math.sqrt(dim))
    feats = np.stack([protos[t] for t in types]) + noise
    n = len(types)
    start = int(rng.integers(n))
    dist = _bfs(n, doors, start)
    far = sorted({types[r] for r in range(n) if dist[r] >= 2 and types[r] != types[start]})
    near = sorted({t for t in types if t != types[start]})
    pool = far or near or [types[start]]
    target = pool[int(rng.integers(len(pool)))]
    return HouseWorld(name, tuple(types), feats.astype(np.float32), tuple(doors), start, target, seed)


def _bfs(n: int, doors: Sequence[tuple[int, int]], source: int) -> list[int]:
    adj: list[list[int]] = [[] for _ in range(n)]
    for a, b in doors:
        adj[a].append(b)
        adj[b].append(a)
    dist = [-1] * n
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in sorted(adj[u]):
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def generate_worlds(seed: int, count: int, size_range: tuple[int, int] = DEFAULT_SIZE_RANGE,
                    dim: int = DEFAULT_DIM, sigma: float = DEFAULT_SIGMA, split: str = "train",
                    exclude: Iterable[str] = ()) -> list[HouseWorld]:
    """Deterministic houses for one split. Houses whose layout signature is
    in ``exclude`` (or repeats within the split) are regenerated."""
    if count < 1:
        raise InvalidConfig("count must be >= 1")
    lo, hi = size_range
    if lo < 1 or hi < lo:
        raise InvalidConfig(f"empty size range {size_range}")
    protos = prototypes(dim)
    seen = set(exclude)
    worlds = []
    for i in range(count):
        attempt = 0
        while True:
            w = _make_world(f"{split}-{i}", _digest_seed("world", seed, split, i, attempt),
                            size_range, dim, sigma, protos)
            # tiny houses have few distinct layouts; only enforce uniqueness when it is attainable
            if w.signature() not in seen or attempt >= 50:
                break
            attempt += 1
        seen.add(w.signature())
        worlds.append(w)
    return worlds


def train_test_worlds(seed: int, n_train: int, n_test: int, size_range: tuple[int, int] = DEFAULT_SIZE_RANGE,
                      dim: int = DEFAULT_DIM, sigma: float = DEFAULT_SIGMA):
    train = generate_worlds(seed, n_train, size_range, dim, sigma, "train")
    test = generate_worlds(seed, n_test, size_range, dim, sigma, "test",
                           exclude={w.signature() for w in train})
    return train, test


def _shortest_path_to_type(world: HouseWorld, start: int, goal: str) -> list[int]:
    parent = {start: -1}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        if world.room_types[u] == goal:
            path = [u]
            while parent[path[-1]] >= 0:
                path.append(parent[path[-1]])
            return path[::-1]
        for v in world.neighbors(u):
            if v not in parent:
                parent[v] = u
                queue.append(v)
    return [start]


def mine_world_events(worlds: Sequence[HouseWorld], walks_per_world: int, seed: int,
                      include_scenes: bool = True) -> tuple[list[EventRecord], FeatureStore, FeatureStore]:
    """Record goal-directed walkthroughs of ``worlds`` as event chains.

    Each walk starts in a random room and follows a shortest route to the
    nearest room of a random goal type; every door crossed becomes an event
    whose action names the goal, and the walk closes with a scene node for
    the goal room. Returns ``(records, text_store, visual_store)`` with
    ``feature_row`` indexing both stores.
    """
    records: list[EventRecord] = []
    text_rows: list[np.ndarray] = []
    vis_rows: list[np.ndarray] = []
    for world in worlds:
        dim = world.features.shape[1]
        rng = np.random.default_rng(_digest_seed("walks", seed, world.name, world.rng_seed))
        for w in range(walks_per_world):
            start = int(rng.integers(world.size))
            goals = sorted({t for t in world.room_types if t != world.room_types[start]})
            if not goals:
                continue
            goal = goals[int(rng.integers(len(goals)))]
            path = _shortest_path_to_type(world, start, goal)
            records_for_walk(records, text_rows, vis_rows, world, path, f"{world.name}/walk-{w}",
                             goal, rng, include_scenes)
    dim = worlds[0].features.shape[1] if worlds else DEFAULT_DIM
    text = FeatureStore(np.array(text_rows, dtype=np.float32).reshape(-1, dim))
    vis = FeatureStore(np.array(vis_rows, dtype=np.float32).reshape(-1, dim))
    return records, text, vis


def records_for_walk(records, text_rows, vis_rows, world: HouseWorld, path: Sequence[int], video_id: str,
                     goal: str, rng: np.random.Generator | None = None, include_scenes: bool = True) -> None:
    """Append the event (and closing scene) records of one walk."""
    if len(path) < 2:
        return
    dim = world.features.shape[1]
    action = goal_action(goal)
    seq = 0
    for a, b in zip(path, path[1:]):
        src, dst = world.room_types[a], world.room_types[b]
        duration = float(rng.uniform(6.0, 13.0)) if rng is not None else 10.0
        records.append(EventRecord(
            id=len(records), video_id=video_id, seq_index=seq, source_room=src, action=action,
            target_room=dst, scene_context="", description=f"{action}: leave the {src} and enter the {dst}",
            kind=EventKind.EVENT, duration_s=round(duration, 3), feature_row=len(vis_rows),
        ))
        text_rows.append(embed_triple(src, action, dst, dim))
        vis_rows.append(0.5 * (world.features[a].astype(np.float64) + world.features[b]))
        seq += 1
    if include_scenes:
        last = path[-1]
        room = world.room_types[last]
        records.append(EventRecord(
            id=len(records), video_id=video_id, seq_index=seq, source_room="", action="", target_room="",
            scene_context=f"the {room}", description=f"The {room} is furnished and well lit.",
            kind=EventKind.SCENE, duration_s=round(float(rng.uniform(6.0, 13.0)) if rng is not None else 10.0, 3),
            feature_row=len(vis_rows),
        ))
        text_rows.append(embed_scene(room, dim))
        vis_rows.append(world.features[last].astype(np.float64))


@dataclass
class KnowledgeEngine:
    """Read-only bundle the knowledge policy queries."""

    graph: EventGraph
    text_index: VectorIndex
    visual_index: VectorIndex
    k: int = 24
    quota: tuple[int, int] = (2, 1)
    lookahead: int | None = 1

    @classmethod
    def from_corpus(cls, records, text: FeatureStore, visual: FeatureStore, **kw) -> "KnowledgeEngine":
        g = build_graph(records, visual)
        return cls(g, index_for_graph(g, text), index_for_graph(g, visual), **kw)


@dataclass(frozen=True)
class EpisodeResult:
    world: str
    policy: str
    success: bool
    path_length: int
    shortest_length: int
    spl_term: float
    path: tuple[int, ...]
    instruction: str = ""

    def to_json(self) -> dict:
        return {
            "world": self.world,
            "policy": self.policy,
            "success": self.success,
            "path_length": self.path_length,
            "shortest_length": self.shortest_length,
            "spl_term": self.spl_term,
            "path": list(self.path),
            "instruction": self.instruction,
        }


def spl_term(success: bool, shortest: int, taken: int) -> float:
    if not success:
        return 0.0
    if taken == 0:
        return 1.0
    return shortest / max(shortest, taken)


def _best_neighbor(world: HouseWorld, room: int, target_vec: np.ndarray) -> int:
    nbrs = world.neighbors(room)
    feats = world.features[nbrs].astype(np.float64)
    norms = np.linalg.norm(feats, axis=1)
    scores = feats @ l2_normalize(target_vec) / np.where(norms > 0, norms, 1.0)
    return nbrs[int(np.argmax(scores))]  # first maximum -> lowest room index


def run_episode(world: HouseWorld, policy: str, engine: KnowledgeEngine | None = None,
                step_budget: int | None = None) -> EpisodeResult:
    if policy not in (BASELINE, KNOWLEDGE):
        raise InvalidConfig(f"unknown policy {policy!r}")
    if step_budget is None:
        step_budget = max(1, 3 * world.diameter())
    if step_budget <= 0:
        raise InvalidConfig("step budget must be positive")
    if policy == KNOWLEDGE and engine is None:
        raise InvalidConfig("the knowledge policy needs an engine")
    dim = world.features.shape[1]
    target = world.target_room_type
    goal_vec = prototypes(dim)[target]
    instruction = goal_action(target)

    sub = None
    use_kg = policy == KNOWLEDGE and sum(engine.quota) > 0
    if use_kg:
        seeds = coarse_retrieve(engine.text_index, embed_instruction(target, dim), engine.k)
        sub = expand_causal(engine.graph, [h.node_id for h in seeds])

    room = world.start_room
    path = [room]
    while world.room_types[room] != target and len(path) - 1 < step_budget:
        move_vec = goal_vec
        if use_kg:
            hits = fine_retrieve(engine.visual_index, sub, world.features[room], engine.quota)
            if len(path) == 1:
                instruction = augment_instruction(
                    goal_action(target), [(h.kind, engine.graph.nodes[h.node_id].description) for h in hits]).text
            tail = select_tail(engine.graph, hits, engine.lookahead)
            move_vec = engine.graph.features.data[engine.graph.nodes[tail].feature_row].astype(np.float64)
        room = _best_neighbor(world, room, move_vec)
        path.append(room)

    success = world.room_types[room] == target
    shortest = world.shortest_to_target(world.start_room)
    taken = len(path) - 1
    return EpisodeResult(world.name, policy, success, taken, shortest, spl_term(success, shortest, taken),
                         tuple(path), instruction)


def evaluate(results: Sequence[EpisodeResult]) -> dict[str, float]:
    if not results:
        raise EmptyResults("no episode results to summarize")
    n = len(results)
    return {
        "episodes": n,
        "SR": 100.0 * sum(r.success for r in results) / n,
        "SPL": 100.0 * math.fsum(r.spl_term for r in results) / n,
    }


@dataclass(frozen=True)
class SimConfig:
    seed: int = 42
    episodes: int = 200
    n_train: int = 120
    walks_per_world: int = 8
    dim: int = DEFAULT_DIM
    sigma: float = DEFAULT_SIGMA
    size_range: tuple[int, int] = DEFAULT_SIZE_RANGE
    k: int = 24
    quota: tuple[int, int] = (2, 1)
    lookahead: int | None = 1

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "episodes": self.episodes,
            "n_train": self.n_train,
            "walks_per_world": self.walks_per_world,
            "dim": self.dim,
            "sigma": self.sigma,
            "size_range": list(self.size_range),
            "k": self.k,
            "quota": list(self.quota),
            "lookahead": self.lookahead,
        }


def run_sim(cfg: SimConfig) -> dict:
    """Mine training houses, run both policies on unseen houses and return
    the report (also the content of ``sim-report.json``)."""
    train, test = train_test_worlds(cfg.seed, cfg.n_train, cfg.episodes, cfg.size_range, cfg.dim, cfg.sigma)
    records, text, visual = mine_world_events(train, cfg.walks_per_world, cfg.seed)
    engine = KnowledgeEngine.from_corpus(records, text, visual, k=cfg.k, quota=tuple(cfg.quota),
                                         lookahead=cfg.lookahead)
    no_fine = KnowledgeEngine(engine.graph, engine.text_index, engine.visual_index, k=cfg.k, quota=(0, 0),
                              lookahead=cfg.lookahead)
    runs = {
        BASELINE: [run_episode(w, BASELINE) for w in test],
        KNOWLEDGE: [run_episode(w, KNOWLEDGE, engine) for w in test],
        "knowledge_quota_0_0": [run_episode(w, KNOWLEDGE, no_fine) for w in test],
    }
    summary = {name: evaluate(res) for name, res in runs.items()}
    return {
        "config": cfg.to_json(),
        "seeds": {"world_seed": cfg.seed, "walk_seed": cfg.seed},
        "graph": {"nodes": len(engine.graph.nodes), "edges": len(engine.graph.edges)},
        "summary": summary,
        "sr_margin": summary[KNOWLEDGE]["SR"] - summary[BASELINE]["SR"],
        "episodes": {name: [r.to_json() for r in res] for name, res in runs.items()},
    }
