import json
import socket

import numpy as np
import pytest

from ekg.cli import main
from ekg.core import FeatureStore

LABELS = ["corridor", "kitchen", "bedroom"]


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr().out


@pytest.fixture
def pipeline(tmp_path, capsys, monkeypatch):
    for key in ("EKG_K", "EKG_ADDR"):
        monkeypatch.delenv(key, raising=False)
    seq = [0, 0, 1, 1, 1, 2, 2, 0, 0]
    sims = np.full((len(seq), 3), 0.1, np.float32)
    sims[np.arange(len(seq)), seq] = 0.9
    FeatureStore(sims).save(tmp_path / "walk.ekgf")
    (tmp_path / "walk.ekgf.labels").write_text("\n".join(LABELS) + "\n")
    FeatureStore(np.random.default_rng(0).standard_normal((3, 8)).astype(np.float32)).save(tmp_path / "feats.ekgf")
    assert _run(capsys, "segment", tmp_path / "walk.ekgf", "--out", tmp_path / "clips.jsonl")[0] == 0
    assert _run(capsys, "annotate", "--manifest", tmp_path / "clips.jsonl", "--out", tmp_path / "notes.jsonl")[0] == 0
    code, out = _run(capsys, "build", "--manifest", tmp_path / "clips.jsonl", "--annotations",
                     tmp_path / "notes.jsonl", "--features", tmp_path / "feats.ekgf", "--graph", tmp_path / "g")
    assert code == 0
    return tmp_path, json.loads(out)


def test_build_and_stats(pipeline, capsys):
    tmp, built = pipeline
    assert (built["node_count"], built["edge_count"]) == (3, 2)
    code, out = _run(capsys, "stats", "--graph", tmp / "g", "--figures", tmp / "fig")
    assert code == 0 and json.loads(out) == built
    assert (tmp / "fig" / "durations.png").stat().st_size > 0


def test_query_ops(pipeline, capsys):
    tmp, _ = pipeline
    code, out = _run(capsys, "query", "--graph", tmp / "g", "--op", "coarse", "--like", 1, "--k", 10)
    hits = [json.loads(line) for line in out.splitlines()]
    assert code == 0 and len(hits) == 3 and hits[0]["id"] == 1
    code, out = _run(capsys, "query", "--graph", tmp / "g", "--op", "expand", "--seeds", "1", "--json")
    assert json.loads(out) == {"nodes": [1, 2]}
    assert _run(capsys, "query", "--graph", tmp / "g", "--op", "expand", "--seeds", "7")[0] == 24


def test_exit_codes(pipeline, capsys, monkeypatch):
    tmp, _ = pipeline
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
    (tmp / "bad.toml").write_text("k = [")
    assert main(["stats", "--graph", str(tmp / "g"), "--config", str(tmp / "bad.toml")]) == 3
    (tmp / "zero.toml").write_text("k = 0\n")
    assert main(["stats", "--graph", str(tmp / "g"), "--config", str(tmp / "zero.toml")]) == 14
    monkeypatch.setenv("EKG_K", "lots")
    assert main(["stats", "--graph", str(tmp / "g")]) == 3
    monkeypatch.delenv("EKG_K")
    assert main(["stats", "--graph", str(tmp / "nowhere")]) != 0
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        s.listen()
        host, port = s.getsockname()
        assert main(["serve", "--graph", str(tmp / "g"), "--addr", f"{host}:{port}"]) == 4
    capsys.readouterr()


def test_bench_and_sim(tmp_path, capsys):
    code, out = _run(capsys, "bench", "--n", 2000, "--dim", 16, "--reps", 10, "--sub-size", 50,
                     "--figures", tmp_path)
    rep = json.loads(out)
    assert code == 0 and rep["N"] == 2000 and rep["coarse_ms_p50"] > 0
    assert (tmp_path / "latency.png").exists()
    args = ["sim", "--episodes", 20, "--n-train", 10, "--walks", 3]
    code, first = _run(capsys, *args, "--out", tmp_path / "a.json", "--figures", tmp_path)
    _, second = _run(capsys, *args, "--out", tmp_path / "b.json")
    assert code == 0 and first == second
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "sim.png").exists()
