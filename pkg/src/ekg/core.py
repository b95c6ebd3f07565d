"""Shared domain types, the EKGF matrix container and the numeric primitives
(normalization, cosine similarity, entropy) used across the engine."""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    CorruptStore,
    DimMismatch,
    FormatError,
    GraphInvariantError,
    InvalidDistribution,
    InvalidVector,
)

ZERO_NORM = 1e-12
UNIT_TOL = 1e-5
DIST_TOL = 1e-5
_CHUNK = 8192

EKGF_MAGIC = b"EKGF"
EKGF_VERSION = 1
_EKGF_HEADER = struct.Struct("<4sIIQB")


class EventKind(enum.Enum):
    EVENT = "Event-0"
    SCENE = "Scene-1"

    @classmethod
    def parse(cls, value: "EventKind | str") -> "EventKind":
        if isinstance(value, EventKind):
            return value
        v = str(value).strip()
        for kind in cls:
            if v == kind.value or v.lower() == kind.name.lower():
                return kind
        raise ValueError(f"unknown event kind: {value!r}")

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class EventRecord:
    """One node of the knowledge graph: a room transition (``Event-0``) or a
    static scene description (``Scene-1``) mined from a source video.

    ``feature_row`` indexes the visual feature store and, when present, the
    text-embedding store that is row-aligned with it.
    """

    id: int
    video_id: str
    seq_index: int
    source_room: str
    action: str
    target_room: str
    scene_context: str
    description: str
    kind: EventKind
    duration_s: float
    feature_row: int

    def __post_init__(self):
        if not (self.duration_s >= 0) or not math.isfinite(self.duration_s):
            raise ValueError(f"duration_s must be finite and >= 0, got {self.duration_s}")
        if self.id < 0 or self.seq_index < 0 or self.feature_row < 0:
            raise ValueError("id, seq_index and feature_row must be non-negative")
        if self.kind is EventKind.EVENT and not (
            self.source_room and self.action and self.target_room
        ):
            raise ValueError(f"event record {self.video_id}/{self.seq_index} has an incomplete transition")

    @property
    def clip_key(self) -> tuple[str, int]:
        return (self.video_id, self.seq_index)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "video_id": self.video_id,
            "seq_index": self.seq_index,
            "source_room": self.source_room,
            "action": self.action,
            "target_room": self.target_room,
            "scene_context": self.scene_context,
            "description": self.description,
            "kind": self.kind.value,
            "duration_s": self.duration_s,
            "feature_row": self.feature_row,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "EventRecord":
        return cls(
            id=int(obj["id"]),
            video_id=str(obj["video_id"]),
            seq_index=int(obj["seq_index"]),
            source_room=str(obj.get("source_room", "")),
            action=str(obj.get("action", "")),
            target_room=str(obj.get("target_room", "")),
            scene_context=str(obj.get("scene_context", "")),
            description=str(obj.get("description", "")),
            kind=EventKind.parse(obj["kind"]),
            duration_s=float(obj.get("duration_s", 0.0)),
            feature_row=int(obj["feature_row"]),
        )


@dataclass(frozen=True)
class FeatureStore:
    """Dense ``rows x dim`` float32 matrix, row-major."""

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise InvalidVector(f"feature data must be 2-D, got shape {arr.shape}")
        if arr.size and not np.isfinite(arr).all():
            raise InvalidVector("feature store contains non-finite entries")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        if self.normalized and arr.size:
            norms = row_norms(arr)
            nz = norms >= ZERO_NORM
            if np.any(np.abs(norms[nz] - 1.0) > UNIT_TOL):
                raise InvalidVector("store flagged normalized but has non-unit rows")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @classmethod
    def empty(cls, dim: int) -> "FeatureStore":
        return cls(np.zeros((0, dim), dtype=np.float32))

    def normalize(self) -> "FeatureStore":
        if self.normalized:
            return self
        out = np.empty_like(self.data)
        for lo in range(0, self.rows, _CHUNK):
            out[lo:lo + _CHUNK] = normalize_rows(self.data[lo:lo + _CHUNK])
        return FeatureStore(out, normalized=True)

    def take(self, rows: Iterable[int]) -> "FeatureStore":
        idx = np.asarray(list(rows), dtype=np.int64)
        return FeatureStore(self.data[idx] if idx.size else np.zeros((0, self.dim), np.float32),
                            normalized=self.normalized)

    def to_bytes(self) -> bytes:
        header = _EKGF_HEADER.pack(EKGF_MAGIC, EKGF_VERSION, self.dim, self.rows, int(self.normalized))
        return header + self.data.astype("<f4", copy=False).tobytes(order="C")

    @classmethod
    def from_bytes(cls, buf: bytes) -> "FeatureStore":
        if len(buf) < _EKGF_HEADER.size:
            raise FormatError("EKGF header truncated")
        magic, version, dim, rows, flag = _EKGF_HEADER.unpack_from(buf, 0)
        if magic != EKGF_MAGIC:
            raise FormatError(f"bad EKGF magic {magic!r}")
        if version != EKGF_VERSION:
            raise FormatError(f"unsupported EKGF version {version}")
        if flag not in (0, 1):
            raise FormatError(f"bad normalized flag {flag}")
        expected = _EKGF_HEADER.size + rows * dim * 4
        if len(buf) != expected:
            raise CorruptStore(f"EKGF payload is {len(buf)} bytes, expected {expected}")
        data = np.frombuffer(buf, dtype="<f4", offset=_EKGF_HEADER.size).reshape(rows, dim)
        # skip the unit-norm re-check on load: the flag was validated on write
        store = cls.__new__(cls)
        arr = data.astype(np.float32)
        if arr.size and not np.isfinite(arr).all():
            raise InvalidVector("feature store contains non-finite entries")
        arr.setflags(write=False)
        object.__setattr__(store, "data", arr)
        object.__setattr__(store, "normalized", bool(flag))
        return store

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "FeatureStore":
        try:
            buf = Path(path).read_bytes()
        except OSError as exc:
            raise FormatError(f"cannot read {path}: {exc}") from exc
        return cls.from_bytes(buf)

    def equals(self, other: "FeatureStore") -> bool:
        """Bit-exact comparison."""
        return (
            self.normalized == other.normalized
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True)
class ProbMatrix:
    probs: np.ndarray
    label_names: tuple[str, ...]

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != len(self.label_names):
            raise InvalidDistribution(f"probability matrix shape {p.shape} vs {len(self.label_names)} labels")
        if p.size:
            if (p < 0).any() or (p > 1).any():
                raise InvalidDistribution("probabilities must lie in [0, 1]")
            if np.any(np.abs(p.sum(axis=1) - 1.0) > DIST_TOL):
                raise InvalidDistribution("rows must sum to 1")
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "label_names", tuple(self.label_names))

    @property
    def frames(self) -> int:
        return self.probs.shape[0]

    @property
    def labels(self) -> int:
        return self.probs.shape[1]


@dataclass
class EventGraph:
    """Directed graph of event/scene nodes linked by temporal succession.

    Construction does not validate; call :func:`check_graph` (``build_graph``
    and ``load_graph`` always do).
    """

    nodes: dict[int, EventRecord]
    edges: frozenset[tuple[int, int]]
    features: FeatureStore
    _succ: dict[int, int] = field(init=False, repr=False, compare=False)
    _pred: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.edges = frozenset((int(a), int(b)) for a, b in self.edges)
        self._succ = {}
        self._pred = {}
        for a, b in sorted(self.edges):
            self._succ.setdefault(a, b)
            self._pred.setdefault(b, a)

    def successor(self, node_id: int) -> int | None:
        return self._succ.get(node_id)

    def predecessor(self, node_id: int) -> int | None:
        return self._pred.get(node_id)

    def __len__(self) -> int:
        return len(self.nodes)

    def sorted_ids(self) -> list[int]:
        return sorted(self.nodes)


def check_graph(g: EventGraph) -> None:
    """Raise GraphInvariantError unless ``g`` is a disjoint union of directed
    paths whose edges follow the same-video adjacency rule."""
    out_deg: dict[int, int] = {}
    in_deg: dict[int, int] = {}
    for a, b in g.edges:
        if a not in g.nodes or b not in g.nodes:
            raise GraphInvariantError(f"edge ({a}, {b}) references a missing node")
        out_deg[a] = out_deg.get(a, 0) + 1
        in_deg[b] = in_deg.get(b, 0) + 1
    for nid, deg in out_deg.items():
        if deg > 1:
            raise GraphInvariantError(f"node {nid} has out-degree {deg}")
    for nid, deg in in_deg.items():
        if deg > 1:
            raise GraphInvariantError(f"node {nid} has in-degree {deg}")

    # with degrees <= 1, a cycle is a walk that returns to its start
    succ = dict(g.edges)
    state: dict[int, int] = {}
    for start in g.nodes:
        if start in state:
            continue
        path = []
        cur: int | None = start
        while cur is not None and cur not in state:
            state[cur] = 1
            path.append(cur)
            cur = succ.get(cur)
        if cur is not None and state.get(cur) == 1:
            raise GraphInvariantError(f"cycle through node {cur}")
        for p in path:
            state[p] = 2

    for nid, rec in g.nodes.items():
        if rec.id != nid:
            raise GraphInvariantError(f"node key {nid} does not match record id {rec.id}")
        if rec.feature_row >= g.features.rows:
            raise GraphInvariantError(
                f"node {nid} references feature row {rec.feature_row} of {g.features.rows}"
            )

    by_clip: dict[tuple[str, int], int] = {}
    for nid, rec in g.nodes.items():
        if rec.clip_key in by_clip:
            raise GraphInvariantError(f"duplicate clip {rec.clip_key}")
        by_clip[rec.clip_key] = nid
    for a, b in g.edges:
        ra, rb = g.nodes[a], g.nodes[b]
        if ra.video_id != rb.video_id or rb.seq_index != ra.seq_index + 1:
            raise GraphInvariantError(f"edge ({a}, {b}) does not join adjacent clips of one video")
    for nid, rec in g.nodes.items():
        nxt = by_clip.get((rec.video_id, rec.seq_index + 1))
        if nxt is not None and (nid, nxt) not in g.edges:
            raise GraphInvariantError(f"missing edge ({nid}, {nxt})")


def _as_vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidVector(f"expected a non-empty 1-D vector, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise InvalidVector("vector has non-finite entries")
    return arr


def l2_normalize(v) -> np.ndarray:
    arr = _as_vector(v)
    norm = math.sqrt(float(np.dot(arr, arr)))
    if norm < ZERO_NORM:
        return arr
    return arr / norm


def row_norms(m: np.ndarray) -> np.ndarray:
    """Float64 row norms, computed in chunks to bound temporary memory."""
    out = np.empty(m.shape[0], dtype=np.float64)
    for lo in range(0, m.shape[0], _CHUNK):
        block = np.asarray(m[lo:lo + _CHUNK], dtype=np.float64)
        out[lo:lo + _CHUNK] = np.sqrt(np.einsum("ij,ij->i", block, block))
    return out


def normalize_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise L2 normalization in float64; zero rows are left as they are."""
    m64 = np.asarray(m, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", m64, m64))
    safe = np.where(norms < ZERO_NORM, 1.0, norms)
    return m64 / safe[:, None]


def cosine_sim(a, b) -> float:
    va, vb = _as_vector(a), _as_vector(b)
    if va.shape != vb.shape:
        raise DimMismatch(f"dimension mismatch: {va.size} vs {vb.size}")
    s = float(np.dot(l2_normalize(va), l2_normalize(vb)))
    return min(1.0, max(-1.0, s))


def shannon_entropy(p) -> float:
    """Entropy in nats, with ``0 ln 0 = 0``."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidDistribution("expected a non-empty probability vector")
    if not np.isfinite(arr).all() or (arr < 0).any():
        raise InvalidDistribution("probabilities must be finite and non-negative")
    if abs(arr.sum() - 1.0) > DIST_TOL:
        raise InvalidDistribution(f"probabilities sum to {arr.sum()}, not 1")
    nz = arr[arr > 0]
    return float(max(0.0, -np.sum(nz * np.log(nz))))


def row_entropies(p: np.ndarray) -> np.ndarray:
    """Vectorized :func:`shannon_entropy` over the rows of a validated matrix."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return np.maximum(0.0, -terms.sum(axis=1))
