import io
import json
import socket
import threading

import numpy as np
import pytest

from ekg.config import EngineConfig
from ekg.errors import BindError
from ekg.service import Client, Engine, QueryServer, dispatch, handle_line, serve_stdio, start_server


@pytest.fixture
def engine(mixed_graph):
    return Engine.from_graph(mixed_graph, EngineConfig(addr="127.0.0.1:0"))


@pytest.fixture
def server(engine):
    srv = start_server(engine, workers=4)
    yield srv
    srv.shutdown()
    srv.server_close()


def _requests(g, n, seed=0):
    rng = np.random.default_rng(seed)
    ops = []
    for i in range(n):
        q = rng.standard_normal(16).round(4).tolist()
        kind = i % 4
        if kind == 0:
            ops.append({"op": "coarse", "query": q, "k": 4, "req": i})
        elif kind == 1:
            ops.append({"op": "fine", "obs": q, "seeds": [int(rng.integers(len(g.nodes)))], "req": i})
        elif kind == 2:
            ops.append({"op": "expand", "seeds": [int(rng.integers(len(g.nodes)))], "req": i})
        else:
            ops.append({"op": "fine", "obs": q, "seeds": [999], "req": i})
    return ops


def test_dispatch_ops(engine, mixed_graph):
    assert dispatch(engine, {"op": "expand", "seeds": [0]})["nodes"] == [0, 1, 2, 3, 4]
    stats = dispatch(engine, {"op": "stats"})["stats"]
    assert stats["node_count"] == len(mixed_graph.nodes)
    hits = dispatch(engine, {"op": "coarse", "query": [1.0] * 16, "k": 3})["hits"]
    assert len(hits) == 3
    tail = dispatch(engine, {"op": "tail", "hits": hits})["nodes"]
    assert len(tail) == 1


def test_errors_are_structured(engine):
    bad = json.loads(handle_line(engine, '{"op": "coarse", "query": [1, 2], "req": "x"}'))
    assert bad["error"]["code"] == "dim_mismatch" and bad["req"] == "x"
    assert json.loads(handle_line(engine, "{oops"))["error"]["code"] == "parse"
    assert json.loads(handle_line(engine, '{"op": "nope"}'))["error"]["code"] == "bad_request"
    assert json.loads(handle_line(engine, '{"op": "expand", "seeds": [999]}'))["error"]["code"] == "unknown_node"


def test_parse_error_keeps_connection_open(server):
    with Client(server.address) as c:
        assert c.request("not json")["error"]["code"] == "parse"
        assert c.request({"op": "stats", "req": 1})["req"] == 1


def test_concurrent_clients_match_sequential(server, engine, mixed_graph):
    reqs = _requests(mixed_graph, 200)
    expected = [json.loads(handle_line(engine, json.dumps(r))) for r in reqs]
    results = [None] * len(reqs)

    def worker(w):
        with Client(server.address) as c:
            for i in range(w, len(reqs), 8):
                results[i] = c.request(reqs[i])

    threads = [threading.Thread(target=worker, args=(w,)) for w in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == expected


def test_bind_failure(engine):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        s.listen()
        with pytest.raises(BindError):
            QueryServer(engine, s.getsockname())


def test_stdio(engine):
    out = io.StringIO()
    serve_stdio(engine, io.StringIO('{"op": "stats", "req": 7}\n\n{"op": "expand", "seeds": [5]}\n'), out)
    lines = [json.loads(x) for x in out.getvalue().splitlines()]
    assert lines[0]["req"] == 7 and lines[1] == {"nodes": [5]}
