"""Newline-delimited JSON query service over a read-only engine.

Requests are single JSON objects per line::

    {"op": "coarse", "query": [...], "k": 3}
    {"op": "fine", "obs": [...], "nodes": [...], "quota": [2, 1]}
    {"op": "fine", "obs": [...], "seeds": [...]}          # expand first
    {"op": "expand", "seeds": [...], "max_depth": null}
    {"op": "tail", "hits": [{"id": 4, "score": 0.9, "kind": "Event-0"}]}
    {"op": "stats"}

Every request gets exactly one response line. An optional ``"req"`` field is
echoed back unchanged.
"""

from __future__ import annotations

import json
import socket
import socketserver
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import IO, Any

from .config import EngineConfig, split_addr
from .core import EventGraph, EventKind, FeatureStore
from .errors import BindError, EKGError, InvalidConfig
from .graph_store import compute_stats, load_graph, load_text_features
from .retrieval import (
    ScoredHit,
    SubGraph,
    VectorIndex,
    coarse_retrieve,
    expand_causal,
    fine_retrieve,
    index_for_graph,
    select_tail,
)

MAX_LINE = 64 * 1024 * 1024


class BadRequest(EKGError):
    code = "bad_request"
    exit_code = 1


@dataclass
class Engine:
    """Immutable bundle of a graph and its two indexes."""

    graph: EventGraph
    text_index: VectorIndex
    visual_index: VectorIndex
    config: EngineConfig

    @classmethod
    def from_graph(cls, g: EventGraph, config: EngineConfig, text: FeatureStore | None = None) -> "Engine":
        visual = index_for_graph(g)
        text_index = visual if text is None else index_for_graph(g, text)
        return cls(g, text_index, visual, config)

    @classmethod
    def load(cls, config: EngineConfig) -> "Engine":
        if not config.graph_dir:
            raise InvalidConfig("no graph directory configured (--graph or graph_dir)")
        g = load_graph(config.graph_dir)
        text = None
        if config.text_features:
            text = FeatureStore.load(config.text_features)
        else:
            text = load_text_features(config.graph_dir)
        if config.visual_features:
            g = EventGraph(g.nodes, g.edges, FeatureStore.load(config.visual_features))
        return cls.from_graph(g, config, text)


def _field(req: dict, name: str, default: Any = ...):
    if name in req:
        return req[name]
    if default is ...:
        raise BadRequest(f"missing field {name!r}")
    return default


def _int_list(value, name: str) -> list[int]:
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise BadRequest(f"{name!r} must be a list of integers")
    return value


def _vector(value, name: str) -> list[float]:
    if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                              for v in value):
        raise BadRequest(f"{name!r} must be an array of numbers")
    return value


def _opt_int(value, name: str) -> int | None:
    if value is None:
        return None
    if not isinstance(value, int) or isinstance(value, bool):
        raise BadRequest(f"{name!r} must be an integer")
    return value


def _hits(value) -> list[ScoredHit]:
    if not isinstance(value, list):
        raise BadRequest("'hits' must be a list")
    out = []
    for h in value:
        try:
            out.append(ScoredHit(int(h["id"]), float(h["score"]), EventKind.parse(h["kind"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise BadRequest(f"bad hit {h!r}: {exc}") from None
    return out


def dispatch(engine: Engine, req: dict) -> dict:
    op = req.get("op")
    cfg = engine.config
    if op == "coarse":
        k = _opt_int(_field(req, "k", cfg.k), "k")
        hits = coarse_retrieve(engine.text_index, _vector(_field(req, "query"), "query"), k)
        return {"hits": [h.to_json() for h in hits]}
    if op == "fine":
        max_depth = _opt_int(_field(req, "max_depth", cfg.max_depth), "max_depth")
        if "nodes" in req:
            sub = SubGraph(tuple(sorted(set(_int_list(req["nodes"], "nodes")))), (), engine.graph)
            engine.visual_index.positions(sub.node_ids)
        else:
            sub = expand_causal(engine.graph, _int_list(_field(req, "seeds"), "seeds"), max_depth)
        quota = _field(req, "quota", list(cfg.quota))
        if not (isinstance(quota, list) and len(quota) == 2):
            raise BadRequest("'quota' must be [max_events, max_scenes]")
        hits = fine_retrieve(engine.visual_index, sub, _vector(_field(req, "obs"), "obs"),
                             (_opt_int(quota[0], "quota"), _opt_int(quota[1], "quota")))
        return {"hits": [h.to_json() for h in hits]}
    if op == "expand":
        max_depth = _opt_int(_field(req, "max_depth", cfg.max_depth), "max_depth")
        sub = expand_causal(engine.graph, _int_list(_field(req, "seeds"), "seeds"), max_depth)
        return {"nodes": list(sub.node_ids)}
    if op == "tail":
        max_depth = _opt_int(_field(req, "max_depth", cfg.max_depth), "max_depth")
        return {"nodes": [select_tail(engine.graph, _hits(_field(req, "hits")), max_depth)]}
    if op == "stats":
        return {"stats": compute_stats(engine.graph).to_json()}
    raise BadRequest(f"unknown op {op!r}")


def error_response(code: str, message: str) -> dict:
    return {"error": {"code": code, "message": message}}


def handle_line(engine: Engine, line: str | bytes) -> str:
    """One request line in, one response line out (without the newline)."""
    try:
        req = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        return json.dumps(error_response("parse", str(exc)), separators=(",", ":"))
    if not isinstance(req, dict):
        return json.dumps(error_response("parse", "request must be a JSON object"), separators=(",", ":"))
    try:
        resp = dispatch(engine, req)
    except EKGError as exc:
        resp = error_response(exc.code, str(exc))
    except (TypeError, ValueError, OverflowError) as exc:
        resp = error_response(BadRequest.code, str(exc))
    if "req" in req:
        resp["req"] = req["req"]
    return json.dumps(resp, separators=(",", ":"))


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        engine = self.server.engine
        while True:
            line = self.rfile.readline(MAX_LINE)
            if not line:
                return
            if not line.strip():
                continue
            self.wfile.write(handle_line(engine, line).encode("utf-8") + b"\n")
            self.wfile.flush()


class QueryServer(socketserver.TCPServer):
    """One acceptor thread; connections are served by a bounded pool.
    Requests on one connection are handled in order."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, engine: Engine, addr: tuple[str, int], workers: int = 8):
        self.engine = engine
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="ekg-conn")
        try:
            super().__init__(addr, _Handler)
        except OSError as exc:
            self._pool.shutdown(wait=False)
            raise BindError(f"cannot bind {addr[0]}:{addr[1]}: {exc}") from exc

    def process_request(self, request, client_address):
        self._pool.submit(self._serve_one, request, client_address)

    def _serve_one(self, request, client_address):
        try:
            self.finish_request(request, client_address)
        except Exception:
            self.handle_error(request, client_address)
        finally:
            self.shutdown_request(request)

    def server_close(self):
        super().server_close()
        self._pool.shutdown(wait=False)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"


def start_server(engine: Engine, addr: str | None = None, workers: int | None = None) -> QueryServer:
    """Bind and serve in a background thread; call ``shutdown()`` then
    ``server_close()`` to stop."""
    server = QueryServer(engine, split_addr(addr or engine.config.addr), workers or engine.config.workers)
    threading.Thread(target=server.serve_forever, name="ekg-acceptor", daemon=True).start()
    return server


def serve_stdio(engine: Engine, stdin: IO[str] | None = None, stdout: IO[str] | None = None) -> None:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    for line in stdin:
        if line.strip():
            stdout.write(handle_line(engine, line) + "\n")
            stdout.flush()


class Client:
    """Minimal blocking client, mostly for tests and scripting."""

    def __init__(self, addr: str, timeout: float = 30.0):
        host, port = split_addr(addr)
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._rfile = self._sock.makefile("rb")

    def request(self, req: dict | str) -> dict:
        line = req if isinstance(req, str) else json.dumps(req)
        self._sock.sendall(line.encode("utf-8") + b"\n")
        resp = self._rfile.readline()
        if not resp:
            raise ConnectionError("server closed the connection")
        return json.loads(resp)

    def close(self):
        self._rfile.close()
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

