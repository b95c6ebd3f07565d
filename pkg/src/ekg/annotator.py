"""Two-stage clip annotation (describe, then refine and classify), structural
validation of transitions, and assembly of the verified clip/text corpus."""

from __future__ import annotations

import json
import logging
import re
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import httpx

from .core import EventKind, EventRecord, FeatureStore
from .errors import (
    AnnotationError,
    AnnotationRejected,
    DuplicateClip,
    FormatError,
    MissingFeature,
    ProtocolError,
)

log = logging.getLogger(__name__)

ClipId = tuple[str, int]

DEFAULT_PROMPT = "Describe how the camera moves between rooms in this clip."
RETRY_ATTEMPTS = 3
RETRY_BACKOFF_S = 0.5


@dataclass(frozen=True)
class ClipRecord:
    """One line of the clip manifest."""

    video_id: str
    seq_index: int
    start_frame: int
    end_frame: int
    src_label: str
    dst_label: str
    duration_s: float
    feature_row: int

    @property
    def clip_id(self) -> ClipId:
        return (self.video_id, self.seq_index)

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "seq_index": self.seq_index,
            "start_frame": self.start_frame,
            "end_frame": self.end_frame,
            "src_label": self.src_label,
            "dst_label": self.dst_label,
            "duration_s": self.duration_s,
            "feature_row": self.feature_row,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ClipRecord":
        try:
            return cls(
                video_id=str(obj["video_id"]),
                seq_index=int(obj["seq_index"]),
                start_frame=int(obj["start_frame"]),
                end_frame=int(obj["end_frame"]),
                src_label=str(obj["src_label"]),
                dst_label=str(obj["dst_label"]),
                duration_s=float(obj["duration_s"]),
                feature_row=int(obj["feature_row"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad manifest record {obj!r}: {exc}") from exc


@dataclass(frozen=True)
class AnnotationRequest:
    clip_id: ClipId
    prompt_template: str = DEFAULT_PROMPT
    frame_summary: Any = None

    def to_json(self, stage: str, raw_text: str | None = None) -> dict:
        obj = {
            "stage": stage,
            "clip_id": [self.clip_id[0], self.clip_id[1]],
            "prompt": self.prompt_template,
            "frame_summary": self.frame_summary,
        }
        if raw_text is not None:
            obj["raw_text"] = raw_text
        return obj


@dataclass(frozen=True)
class Annotation:
    clip_id: ClipId
    raw_text: str
    refined_text: str
    kind: EventKind
    transition: tuple[str, str, str] | None = None

    def to_json(self) -> dict:
        return {
            "clip_id": [self.clip_id[0], self.clip_id[1]],
            "raw_text": self.raw_text,
            "refined_text": self.refined_text,
            "kind": self.kind.value,
            "transition": list(self.transition) if self.transition is not None else None,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Annotation":
        try:
            vid, seq = obj["clip_id"]
            fields = parse_refinement(obj)
            return cls(
                clip_id=(str(vid), int(seq)),
                raw_text=str(obj.get("raw_text", "")),
                refined_text=fields["refined_text"],
                kind=fields["kind"],
                transition=fields["transition"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad annotation record: {exc}") from exc


class AnnotationClient(Protocol):
    """Anything that can run the two annotation stages.

    ``describe`` returns the raw clip description; ``refine`` returns a
    mapping with ``refined_text``, ``kind`` and ``transition`` (the wire
    response schema).
    """

    def describe(self, request: AnnotationRequest) -> str: ...

    def refine(self, request: AnnotationRequest, raw_text: str) -> Mapping[str, Any]: ...


def extract_json_object(text: str) -> dict:
    """Return the first JSON object embedded in ``text``, tolerating prose
    around it."""
    decoder = json.JSONDecoder()
    for m in re.finditer(r"\{", text):
        try:
            obj, _ = decoder.raw_decode(text, m.start())
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    raise ProtocolError(f"no JSON object in reply: {text[:80]!r}")


def parse_refinement(payload: Mapping[str, Any] | str) -> dict:
    if isinstance(payload, str):
        payload = extract_json_object(payload)
    if not isinstance(payload, Mapping):
        raise ProtocolError("refinement payload is not an object")
    try:
        refined = payload["refined_text"]
        kind = EventKind.parse(payload["kind"])
    except KeyError as exc:
        raise ProtocolError(f"refinement payload lacks {exc}") from exc
    except ValueError as exc:
        raise ProtocolError(str(exc)) from exc
    if not isinstance(refined, str):
        raise ProtocolError("refined_text must be a string")
    trans = payload.get("transition")
    if trans is not None:
        if not isinstance(trans, (list, tuple)) or len(trans) != 3:
            raise ProtocolError("transition must be null or a 3-array")
        trans = tuple("" if t is None else str(t).strip() for t in trans)
    return {"refined_text": refined, "kind": kind, "transition": trans}


_MOVE = re.compile(
    r"(?P<verb>\w+)\s+from\s+(?:the\s+)?(?P<src>[a-z][a-z ]*?)\s+"
    r"(?P<prep>into|to|toward|towards|through)\s+(?:the\s+)?(?P<dst>[a-z][a-z ]*?)\s*(?:[.,;]|$)",
    re.IGNORECASE,
)


def heuristic_refine(raw_text: str) -> dict:
    """Rule-based refinement: a ``<verb> from <room> into <room>`` sentence
    becomes an event, anything else a scene description."""
    text = raw_text.strip()
    m = _MOVE.search(text)
    if m:
        action = f"{m['verb'].lower()} {m['prep'].lower()}"
        return {
            "refined_text": text,
            "kind": EventKind.EVENT.value,
            "transition": [m["src"].strip().lower(), action, m["dst"].strip().lower()],
        }
    return {"refined_text": text, "kind": EventKind.SCENE.value, "transition": None}


class MockAnnotationClient:
    """Deterministic in-process client.

    ``canned`` maps clip ids to raw descriptions. Without an entry the
    description is synthesized from a ``{"src_label", "dst_label"}`` frame
    summary. ``fail_times`` forces that many leading failures per clip.
    """

    def __init__(self, canned: Mapping[ClipId, str] | None = None, fail_times: int = 0):
        self.canned = dict(canned or {})
        self.fail_times = fail_times
        self.calls: dict[ClipId, int] = {}

    def describe(self, request: AnnotationRequest) -> str:
        n = self.calls.get(request.clip_id, 0)
        self.calls[request.clip_id] = n + 1
        if n < self.fail_times:
            raise ConnectionError(f"mock failure {n + 1} for {request.clip_id}")
        if request.clip_id in self.canned:
            return self.canned[request.clip_id]
        summary = request.frame_summary or {}
        src, dst = summary.get("src_label"), summary.get("dst_label")
        if src and dst and src != dst:
            return f"The camera walks from the {src} into the {dst}."
        room = src or dst or "room"
        return f"The {room} has plain walls and a wooden floor."

    def refine(self, request: AnnotationRequest, raw_text: str) -> Mapping[str, Any]:
        return heuristic_refine(raw_text)


class HttpAnnotationClient:
    """Posts single-line JSON requests to an annotation endpoint."""

    def __init__(self, url: str, timeout_s: float = 60.0, client: httpx.Client | None = None):
        self.url = url
        self._http = client or httpx.Client(timeout=timeout_s)

    def _post(self, payload: dict) -> dict:
        resp = self._http.post(self.url, content=json.dumps(payload, separators=(",", ":")),
                               headers={"content-type": "application/json"})
        resp.raise_for_status()
        try:
            obj = json.loads(resp.text)
        except json.JSONDecodeError:
            obj = extract_json_object(resp.text)
        if not isinstance(obj, dict):
            raise ProtocolError("response is not a JSON object")
        return obj

    def describe(self, request: AnnotationRequest) -> str:
        obj = self._post(request.to_json("describe"))
        if not isinstance(obj.get("raw_text"), str):
            raise ProtocolError("describe response lacks raw_text")
        return obj["raw_text"]

    def refine(self, request: AnnotationRequest, raw_text: str) -> Mapping[str, Any]:
        return self._post(request.to_json("refine", raw_text))


class StdioAnnotationClient:
    """Talks to a subprocess over stdin/stdout, one JSON object per line."""

    def __init__(self, argv: Sequence[str]):
        self.proc = subprocess.Popen(list(argv), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                     text=True, bufsize=1)

    def _call(self, payload: dict) -> dict:
        assert self.proc.stdin is not None and self.proc.stdout is not None
        self.proc.stdin.write(json.dumps(payload, separators=(",", ":")) + "\n")
        self.proc.stdin.flush()
        line = self.proc.stdout.readline()
        if not line:
            raise ConnectionError("annotation subprocess closed its output")
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            obj = extract_json_object(line)
        if not isinstance(obj, dict):
            raise ProtocolError("response is not a JSON object")
        return obj

    def describe(self, request: AnnotationRequest) -> str:
        obj = self._call(request.to_json("describe"))
        if not isinstance(obj.get("raw_text"), str):
            raise ProtocolError("describe response lacks raw_text")
        return obj["raw_text"]

    def refine(self, request: AnnotationRequest, raw_text: str) -> Mapping[str, Any]:
        return self._call(request.to_json("refine", raw_text))

    def close(self) -> None:
        if self.proc.stdin:
            self.proc.stdin.close()
        self.proc.wait(timeout=5)


def annotate_clip(request: AnnotationRequest, client: AnnotationClient, attempts: int = RETRY_ATTEMPTS,
                  backoff_s: float = RETRY_BACKOFF_S, sleep: Callable[[float], None] = time.sleep) -> Annotation:
    """Run describe then refine, retrying transport failures with
    exponential backoff. Malformed payloads are not retried."""
    last: Exception | None = None
    for attempt in range(attempts):
        try:
            raw = client.describe(request)
            fields = parse_refinement(client.refine(request, raw))
            trans = fields["transition"]
            if fields["kind"] is EventKind.EVENT and trans is None:
                raise ProtocolError("event refinement without a transition")
            if fields["kind"] is EventKind.SCENE:
                trans = None
            return Annotation(request.clip_id, raw, fields["refined_text"], fields["kind"], trans)
        except ProtocolError:
            raise
        except Exception as exc:  # transport-level failure
            last = exc
            log.warning("annotation of %s failed (attempt %d/%d): %s", request.clip_id, attempt + 1, attempts, exc)
            if attempt + 1 < attempts:
                sleep(backoff_s * (2 ** attempt))
    raise AnnotationError(attempts, f"annotation of {request.clip_id} failed after {attempts} attempts: {last}")


def annotate_many(requests: Sequence[AnnotationRequest], client: AnnotationClient, max_in_flight: int = 4,
                  **kwargs) -> list[Annotation]:
    """Annotate concurrently; results keep the order of ``requests``."""
    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        return list(pool.map(lambda r: annotate_clip(r, client, **kwargs), requests))


def _norm_room(name: str) -> str:
    return " ".join(name.lower().split())


def validate_annotation(a: Annotation, vocabulary: Iterable[str] | None = None) -> Annotation:
    """Accept, downgrade to a scene, or reject an annotation.

    Events need a complete transition whose rooms belong to ``vocabulary``
    (any non-empty room when it is None); failing events keep their text as
    a scene node.
    """
    if not a.refined_text.strip():
        raise AnnotationRejected("EmptyText")
    if a.kind is EventKind.SCENE:
        return a if a.transition is None else replace(a, transition=None)
    vocab = None if vocabulary is None else {_norm_room(v) for v in vocabulary}
    trans = a.transition
    ok = trans is not None and all(part.strip() for part in trans)
    if ok and vocab is not None:
        ok = _norm_room(trans[0]) in vocab and _norm_room(trans[2]) in vocab
    if ok:
        return a
    return replace(a, kind=EventKind.SCENE, transition=None)


def build_corpus(annotations: Sequence[Annotation], clips: Sequence[ClipRecord], features: FeatureStore,
                 vocabulary: Iterable[str] | None = None) -> list[EventRecord]:
    """Join validated annotations with their manifest entries.

    Rejected annotations are dropped. Output is sorted by
    ``(video_id, seq_index)`` and ids are assigned densely in that order.
    """
    vocab = list(vocabulary) if vocabulary is not None else None
    manifest: dict[ClipId, ClipRecord] = {}
    for c in clips:
        if c.clip_id in manifest:
            raise DuplicateClip(f"clip {c.clip_id} appears twice in the manifest")
        manifest[c.clip_id] = c

    seen: set[ClipId] = set()
    accepted: list[tuple[Annotation, ClipRecord]] = []
    for a in annotations:
        if a.clip_id in seen:
            raise DuplicateClip(f"clip {a.clip_id} annotated twice")
        seen.add(a.clip_id)
        clip = manifest.get(a.clip_id)
        if clip is None:
            raise MissingFeature(f"clip {a.clip_id} is not in the manifest")
        if clip.feature_row >= features.rows:
            raise MissingFeature(f"clip {a.clip_id} needs feature row {clip.feature_row}, store has {features.rows}")
        try:
            accepted.append((validate_annotation(a, vocab), clip))
        except AnnotationRejected as exc:
            log.info("rejected %s: %s", a.clip_id, exc.reason)

    accepted.sort(key=lambda pair: pair[1].clip_id)
    records = []
    for i, (a, clip) in enumerate(accepted):
        src, action, dst = a.transition if a.transition else ("", "", "")
        records.append(EventRecord(
            id=i,
            video_id=clip.video_id,
            seq_index=clip.seq_index,
            source_room=src,
            action=action,
            target_room=dst,
            scene_context="" if a.kind is EventKind.EVENT else a.refined_text,
            description=a.refined_text,
            kind=a.kind,
            duration_s=clip.duration_s,
            feature_row=clip.feature_row,
        ))
    return records


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from exc
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return out


def dumps_line(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_jsonl(path: str | Path, objs: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for obj in objs:
            fh.write(dumps_line(obj) + "\n")


def read_manifest(path: str | Path) -> list[ClipRecord]:
    return [ClipRecord.from_json(o) for o in read_jsonl(path)]


def read_annotations(path: str | Path) -> list[Annotation]:
    return [Annotation.from_json(o) for o in read_jsonl(path)]
