import json
import sys

import httpx
import numpy as np
import pytest

from ekg.annotator import (
    Annotation,
    AnnotationRequest,
    ClipRecord,
    HttpAnnotationClient,
    MockAnnotationClient,
    StdioAnnotationClient,
    annotate_clip,
    annotate_many,
    build_corpus,
    extract_json_object,
    read_annotations,
    read_manifest,
    validate_annotation,
    write_jsonl,
)
from ekg.core import EventKind, FeatureStore
from ekg.errors import AnnotationError, AnnotationRejected, DuplicateClip, MissingFeature, ProtocolError

ROOMS = ["bedroom", "bathroom", "kitchen", "living room", "corridor"]


def _no_sleep(_):
    pass


def test_mock_event_annotation():
    client = MockAnnotationClient({("v", 0): "walks from the living room into the kitchen"})
    a = annotate_clip(AnnotationRequest(("v", 0)), client)
    assert a.kind is EventKind.EVENT
    assert a.transition == ("living room", "walks into", "kitchen")


def test_mock_scene_annotation():
    client = MockAnnotationClient({("v", 0): "The room has red curtains and a wooden table"})
    a = annotate_clip(AnnotationRequest(("v", 0)), client)
    assert a.kind is EventKind.SCENE and a.transition is None


def test_retries_exhausted():
    sleeps = []
    client = MockAnnotationClient(fail_times=3)
    with pytest.raises(AnnotationError) as info:
        annotate_clip(AnnotationRequest(("v", 0)), client, sleep=sleeps.append)
    assert info.value.attempts == 3
    assert sleeps == [0.5, 1.0]


def test_retry_then_success():
    client = MockAnnotationClient(fail_times=2)
    a = annotate_clip(AnnotationRequest(("v", 0), frame_summary={"src_label": "a", "dst_label": "b"}),
                      client, sleep=_no_sleep)
    assert a.kind is EventKind.EVENT and client.calls[("v", 0)] == 3


class _BadRefiner(MockAnnotationClient):
    def refine(self, request, raw_text):
        return {"refined_text": "x"}


def test_malformed_payload_is_protocol_error():
    client = _BadRefiner()
    with pytest.raises(ProtocolError):
        annotate_clip(AnnotationRequest(("v", 0)), client, sleep=_no_sleep)
    assert client.calls[("v", 0)] == 1


def test_extract_json_tolerates_prose():
    assert extract_json_object('Sure! {"kind": "Scene-1", "refined_text": "x"} hope it helps') == {
        "kind": "Scene-1", "refined_text": "x"}
    with pytest.raises(ProtocolError):
        extract_json_object("no json here")


def _event(trans, text="walk"):
    return Annotation(("v", 0), "raw", text, EventKind.EVENT, trans)


def test_validate_accepts_known_rooms():
    a = _event(("bedroom", "walk across the corridor", "bathroom"))
    assert validate_annotation(a, ROOMS) == a
    assert validate_annotation(validate_annotation(a, ROOMS), ROOMS) == a


def test_validate_downgrades():
    assert validate_annotation(_event(("bedroom", "walk", "")), ROOMS).kind is EventKind.SCENE
    b = validate_annotation(_event(("bedroom", "walk", "spaceship")), ROOMS)
    assert b.kind is EventKind.SCENE and b.transition is None


def test_validate_rejects_empty_text():
    with pytest.raises(AnnotationRejected) as info:
        validate_annotation(_event(("a", "b", "c"), text="  "))
    assert info.value.reason == "EmptyText"


def _manifest(n, video="v"):
    return [ClipRecord(video, i, 2 * i, 2 * i + 2, "kitchen", "bedroom", 4.0, i) for i in range(n)]


def test_build_corpus_counts_and_order():
    clips = _manifest(3)
    notes = [
        Annotation(("v", 2), "r", "walk from the kitchen into the bedroom", EventKind.EVENT,
                   ("kitchen", "walk into", "bedroom")),
        Annotation(("v", 0), "r", "", EventKind.SCENE),
        Annotation(("v", 1), "r", "A tidy bedroom.", EventKind.SCENE),
    ]
    feats = FeatureStore(np.zeros((3, 4), np.float32))
    recs = build_corpus(notes, clips, feats, ROOMS)
    assert [(r.id, r.seq_index, r.kind) for r in recs] == [(0, 1, EventKind.SCENE), (1, 2, EventKind.EVENT)]
    assert recs[0].scene_context == "A tidy bedroom."
    assert build_corpus(list(reversed(notes)), clips, feats, ROOMS) == recs


def test_build_corpus_errors():
    clips = _manifest(3)
    note = Annotation(("v", 2), "r", "A room.", EventKind.SCENE)
    with pytest.raises(MissingFeature):
        build_corpus([note], clips, FeatureStore(np.zeros((2, 4), np.float32)))
    with pytest.raises(DuplicateClip):
        build_corpus([note, note], clips, FeatureStore(np.zeros((3, 4), np.float32)))
    with pytest.raises(DuplicateClip):
        build_corpus([note], clips + clips[:1], FeatureStore(np.zeros((3, 4), np.float32)))
    with pytest.raises(MissingFeature):
        build_corpus([Annotation(("w", 0), "r", "x", EventKind.SCENE)], clips,
                     FeatureStore(np.zeros((3, 4), np.float32)))


def test_jsonl_round_trip(tmp_path):
    clips = _manifest(2)
    write_jsonl(tmp_path / "m.jsonl", [c.to_json() for c in clips])
    assert read_manifest(tmp_path / "m.jsonl") == clips
    notes = annotate_many([AnnotationRequest(c.clip_id, frame_summary={"src_label": c.src_label,
                                                                        "dst_label": c.dst_label})
                           for c in clips], MockAnnotationClient())
    write_jsonl(tmp_path / "a.jsonl", [a.to_json() for a in notes])
    assert read_annotations(tmp_path / "a.jsonl") == notes


def test_http_client_wire_contract():
    seen = []

    def handler(request):
        body = json.loads(request.content)
        seen.append(body["stage"])
        if body["stage"] == "describe":
            return httpx.Response(200, json={"raw_text": "walks from the kitchen into the hallway"})
        return httpx.Response(200, text='ok: {"refined_text": "walk into the hallway", "kind": "Event-0", '
                                        '"transition": ["kitchen", "walk into", "hallway"]}')

    client = HttpAnnotationClient("http://annotator.test/", client=httpx.Client(transport=httpx.MockTransport(handler)))
    a = annotate_clip(AnnotationRequest(("v", 3)), client)
    assert seen == ["describe", "refine"]
    assert a.transition == ("kitchen", "walk into", "hallway")


def test_http_client_transport_failure_is_retried():
    def handler(request):
        raise httpx.ConnectError("refused")

    client = HttpAnnotationClient("http://annotator.test/", client=httpx.Client(transport=httpx.MockTransport(handler)))
    with pytest.raises(AnnotationError):
        annotate_clip(AnnotationRequest(("v", 0)), client, sleep=_no_sleep)


STDIO_SERVER = r"""
import json, sys
for line in sys.stdin:
    req = json.loads(line)
    if req["stage"] == "describe":
        out = {"raw_text": "The hall has a red rug."}
    else:
        out = {"refined_text": req["raw_text"], "kind": "Scene-1", "transition": None}
    print(json.dumps(out), flush=True)
"""


def test_stdio_client():
    client = StdioAnnotationClient([sys.executable, "-c", STDIO_SERVER])
    try:
        a = annotate_clip(AnnotationRequest(("v", 0)), client)
    finally:
        client.close()
    assert a.kind is EventKind.SCENE and a.refined_text == "The hall has a red rug."
