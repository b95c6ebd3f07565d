"""Graph construction, on-disk persistence and corpus statistics.

Directory layout::

    nodes.jsonl     one EventRecord per line, ascending id
    edges.bin       (src, dst) pairs as u64 little-endian, ascending
    features.ekgf   visual features (EKGF)
    text.ekgf       optional text embeddings, row-aligned with features.ekgf
    manifest.json   dims, counts and CRC32C of every file above
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import crc32c
import numpy as np

from .core import EventGraph, EventKind, EventRecord, FeatureStore, check_graph
from .errors import CorruptStore, DuplicateClip, FormatError

STORE_FORMAT = "ekg-graph"
STORE_VERSION = 1
NODES_FILE = "nodes.jsonl"
EDGES_FILE = "edges.bin"
FEATURES_FILE = "features.ekgf"
TEXT_FILE = "text.ekgf"
MANIFEST_FILE = "manifest.json"


@dataclass(frozen=True)
class GraphStats:
    node_count: int
    edge_count: int
    event_node_count: int
    scene_node_count: int
    chain_count: int
    duration_histogram: tuple[tuple[int, int], ...]
    mean_duration_s: float

    def to_json(self) -> dict:
        return {
            "node_count": self.node_count,
            "edge_count": self.edge_count,
            "event_node_count": self.event_node_count,
            "scene_node_count": self.scene_node_count,
            "chain_count": self.chain_count,
            "duration_histogram": [[b, c] for b, c in self.duration_histogram],
            "mean_duration_s": self.mean_duration_s,
        }


def build_graph(records: Sequence[EventRecord], features: FeatureStore) -> EventGraph:
    """Assign dense ids in ``(video_id, seq_index)`` order and link each clip
    to the next clip of the same video, so a chain's successor of node ``i``
    is always ``i + 1``."""
    ordered = sorted(records, key=lambda r: r.clip_key)
    for a, b in zip(ordered, ordered[1:]):
        if a.clip_key == b.clip_key:
            raise DuplicateClip(f"duplicate clip {a.clip_key}")
    nodes = {i: (r if r.id == i else replace(r, id=i)) for i, r in enumerate(ordered)}
    edges = frozenset(
        (i, i + 1)
        for i in range(len(ordered) - 1)
        if ordered[i].video_id == ordered[i + 1].video_id
        and ordered[i + 1].seq_index == ordered[i].seq_index + 1
    )
    g = EventGraph(nodes, edges, features)
    check_graph(g)
    return g


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _crc(data: bytes) -> str:
    return f"{crc32c.crc32c(data):08x}"


def encode_nodes(g: EventGraph) -> bytes:
    return "".join(_canonical_json(g.nodes[i].to_json()) + "\n" for i in g.sorted_ids()).encode("utf-8")


def encode_edges(g: EventGraph) -> bytes:
    arr = np.asarray(sorted(g.edges), dtype="<u8").reshape(-1, 2)
    return arr.tobytes()


def save_graph(g: EventGraph, directory: str | Path, text_features: FeatureStore | None = None) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    payloads = {
        NODES_FILE: encode_nodes(g),
        EDGES_FILE: encode_edges(g),
        FEATURES_FILE: g.features.to_bytes(),
    }
    if text_features is not None:
        if text_features.rows != g.features.rows:
            raise FormatError("text features must be row-aligned with the visual features")
        payloads[TEXT_FILE] = text_features.to_bytes()
    stale = out / TEXT_FILE
    if text_features is None and stale.exists():
        stale.unlink()
    for name, data in payloads.items():
        (out / name).write_bytes(data)
    manifest = {
        "format": STORE_FORMAT,
        "version": STORE_VERSION,
        "dim": g.features.dim,
        "feature_rows": g.features.rows,
        "node_count": len(g.nodes),
        "edge_count": len(g.edges),
        "files": {name: {"bytes": len(data), "crc32c": _crc(data)} for name, data in sorted(payloads.items())},
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _read_manifest(directory: Path) -> dict:
    try:
        manifest = json.loads((directory / MANIFEST_FILE).read_text(encoding="utf-8"))
    except OSError as exc:
        raise FormatError(f"cannot read {directory / MANIFEST_FILE}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    if manifest.get("format") != STORE_FORMAT:
        raise FormatError(f"not an {STORE_FORMAT} directory")
    if manifest.get("version") != STORE_VERSION:
        raise FormatError(f"unsupported store version {manifest.get('version')}")
    return manifest


def _read_checked(directory: Path, manifest: dict, name: str) -> bytes:
    entry = manifest["files"].get(name)
    if entry is None:
        raise FormatError(f"manifest does not list {name}")
    try:
        data = (directory / name).read_bytes()
    except OSError as exc:
        raise CorruptStore(f"cannot read {name}: {exc}") from exc
    if len(data) != entry["bytes"] or _crc(data) != entry["crc32c"]:
        raise CorruptStore(f"{name} fails its checksum")
    return data


def load_graph(directory: str | Path) -> EventGraph:
    d = Path(directory)
    manifest = _read_manifest(d)
    node_bytes = _read_checked(d, manifest, NODES_FILE)
    edge_bytes = _read_checked(d, manifest, EDGES_FILE)
    features = FeatureStore.from_bytes(_read_checked(d, manifest, FEATURES_FILE))

    nodes: dict[int, EventRecord] = {}
    for line in node_bytes.decode("utf-8").splitlines():
        if not line:
            continue
        try:
            rec = EventRecord.from_json(json.loads(line))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise FormatError(f"bad node record: {exc}") from exc
        nodes[rec.id] = rec
    if len(edge_bytes) % 16:
        raise CorruptStore("edges.bin is not a whole number of u64 pairs")
    pairs = np.frombuffer(edge_bytes, dtype="<u8").reshape(-1, 2)
    edges = frozenset((int(a), int(b)) for a, b in pairs)
    if len(nodes) != manifest["node_count"] or len(edges) != manifest["edge_count"]:
        raise CorruptStore("node/edge counts disagree with the manifest")
    g = EventGraph(nodes, edges, features)
    check_graph(g)
    return g


def load_text_features(directory: str | Path) -> FeatureStore | None:
    d = Path(directory)
    manifest = _read_manifest(d)
    if TEXT_FILE not in manifest["files"]:
        return None
    return FeatureStore.from_bytes(_read_checked(d, manifest, TEXT_FILE))


def graphs_equal(a: EventGraph, b: EventGraph) -> bool:
    """Structural equality plus bit-identical feature bytes."""
    return a.nodes == b.nodes and a.edges == b.edges and a.features.equals(b.features)


def compute_stats(g: EventGraph) -> GraphStats:
    durations = [g.nodes[i].duration_s for i in g.sorted_ids()]
    events = sum(1 for r in g.nodes.values() if r.kind is EventKind.EVENT)
    hist = Counter(int(math.floor(d)) for d in durations)
    mean = math.fsum(durations) / len(durations) if durations else 0.0
    return GraphStats(
        node_count=len(g.nodes),
        edge_count=len(g.edges),
        event_node_count=events,
        scene_node_count=len(g.nodes) - events,
        chain_count=sum(1 for nid in g.nodes if g.predecessor(nid) is None),
        duration_histogram=tuple(sorted(hist.items())),
        mean_duration_s=mean,
    )
