"""Command-line entry point: ``ekg <subcommand> [flags]``.

Machine-readable results go to stdout as JSON lines, diagnostics to stderr.
Exit status is 0 on success, 2 for usage errors, 3 for unreadable
configuration, 4 when the service cannot bind, 5 for missing or unreadable
files, and the error class's own code for data errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import annotator, graph_store, harness, segmenter
from .config import EngineConfig, load_config
from .core import FeatureStore
from .errors import EKGError, UsageError

log = logging.getLogger("ekg")

IO_EXIT = 5


def _emit(obj, pretty: bool = False) -> None:
    if pretty:
        sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def _config(args) -> EngineConfig:
    overrides = {
        "graph_dir": getattr(args, "graph", None),
        "k": getattr(args, "k", None),
        "max_events": getattr(args, "events", None),
        "max_scenes": getattr(args, "scenes", None),
        "max_depth": getattr(args, "max_depth", None),
        "addr": getattr(args, "addr", None),
        "workers": getattr(args, "workers", None),
        "tau": getattr(args, "tau", None),
        "theta_indoor": getattr(args, "theta_indoor", None),
        "min_seg_len": getattr(args, "min_seg_len", None),
        "fps": getattr(args, "fps", None),
        "bench_reps": getattr(args, "reps", None),
    }
    return load_config(args.config, overrides=overrides)


def _read_lines(path: str | None) -> list[str] | None:
    if path is None:
        return None
    return [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]


def cmd_segment(args) -> int:
    cfg = _config(args)
    labels = _read_lines(args.labels) or ()
    indoor = tuple(_read_lines(args.indoor)) if args.indoor else None
    seg_cfg = segmenter.SegmenterConfig(
        label_names=tuple(labels), tau=cfg.tau, theta_indoor=cfg.theta_indoor, indoor_labels=indoor,
        min_seg_len=cfg.min_seg_len, fps=cfg.fps,
    )
    clips, labeling = segmenter.run_pipeline(args.sims, seg_cfg)
    names = labels or segmenter.read_label_names(segmenter.labels_sidecar(args.sims))
    video_id = args.video_id or Path(args.sims).stem
    records = [
        annotator.ClipRecord(video_id, i, c.start_frame, c.end_frame, names[c.src_label], names[c.dst_label],
                             c.duration_s, args.row_offset + i).to_json()
        for i, c in enumerate(clips)
    ]
    log.info("%d frames, %d kept, %d clips", labeling.frames, int(np.sum(labeling.kept)), len(clips))
    if args.out:
        annotator.write_jsonl(args.out, records)
    else:
        for r in records:
            _emit(r)
    return 0


def _make_client(args):
    if args.client == "mock":
        return annotator.MockAnnotationClient()
    if args.client == "http":
        if not args.url:
            raise UsageError("--client http needs --url")
        return annotator.HttpAnnotationClient(args.url)
    if not args.cmd:
        raise UsageError("--client stdio needs --cmd")
    return annotator.StdioAnnotationClient(args.cmd.split())


def cmd_annotate(args) -> int:
    clips = annotator.read_manifest(args.manifest)
    client = _make_client(args)
    requests = [
        annotator.AnnotationRequest(c.clip_id, frame_summary={"src_label": c.src_label, "dst_label": c.dst_label})
        for c in clips
    ]
    try:
        results = annotator.annotate_many(requests, client, max_in_flight=args.max_in_flight)
    finally:
        close = getattr(client, "close", None)
        if close is not None:
            close()
    rows = [a.to_json() for a in results]
    if args.out:
        annotator.write_jsonl(args.out, rows)
    else:
        for r in rows:
            _emit(r)
    return 0


def cmd_build(args) -> int:
    cfg = _config(args)
    if not cfg.graph_dir:
        raise UsageError("build needs --graph DIR for the output")
    clips = annotator.read_manifest(args.manifest)
    notes = annotator.read_annotations(args.annotations)
    features = FeatureStore.load(args.features)
    vocab = _read_lines(args.vocabulary)
    records = annotator.build_corpus(notes, clips, features, vocab)
    g = graph_store.build_graph(records, features)
    text = FeatureStore.load(args.text_features) if args.text_features else None
    graph_store.save_graph(g, cfg.graph_dir, text)
    _emit(graph_store.compute_stats(g).to_json())
    return 0


def cmd_stats(args) -> int:
    cfg = _config(args)
    if not cfg.graph_dir:
        raise UsageError("stats needs --graph DIR")
    stats = graph_store.compute_stats(graph_store.load_graph(cfg.graph_dir)).to_json()
    _emit(stats, args.json)
    if args.figures:
        from .plotting import duration_histogram
        log.info("wrote %s", duration_histogram(stats, Path(args.figures) / "durations.png"))
    return 0


def _parse_vector(text: str) -> list[float]:
    if text.startswith("@"):
        text = Path(text[1:]).read_text(encoding="utf-8")
    try:
        vec = json.loads(text)
    except json.JSONDecodeError:
        vec = [float(x) for x in text.split(",") if x.strip()]
    return vec


def _int_csv(text: str | None) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()] if text else []


def cmd_query(args) -> int:
    from .service import Engine, dispatch, serve_stdio

    cfg = _config(args)
    engine = Engine.load(cfg)
    if args.op is None:
        serve_stdio(engine)
        return 0
    req: dict = {"op": args.op}
    if args.op in ("coarse", "fine"):
        if args.vector is not None:
            vec = _parse_vector(args.vector)
        elif args.like is not None:
            idx = engine.text_index if args.op == "coarse" else engine.visual_index
            vec = idx.store.data[int(idx.positions([args.like])[0])].astype(float).tolist()
        else:
            raise UsageError(f"--op {args.op} needs --vector or --like")
        req["query" if args.op == "coarse" else "obs"] = vec
        req["k"] = cfg.k
    if args.op == "fine":
        req["quota"] = list(cfg.quota)
        if args.nodes:
            req["nodes"] = _int_csv(args.nodes)
        else:
            req["seeds"] = _int_csv(args.seeds)
    if args.op == "expand":
        req["seeds"] = _int_csv(args.seeds)
    if args.op in ("fine", "expand", "tail"):
        req["max_depth"] = cfg.max_depth
    if args.op == "tail":
        req["hits"] = json.loads(args.hits or "[]")
    resp = dispatch(engine, req)
    if args.json or "stats" in resp:
        _emit(resp, args.json)
    else:
        for item in resp.get("hits", resp.get("nodes", [])):
            _emit(item)
    return 0


def cmd_serve(args) -> int:
    from .config import split_addr
    from .service import Engine, QueryServer, serve_stdio

    cfg = _config(args)
    engine = Engine.load(cfg)
    if args.stdio:
        serve_stdio(engine)
        return 0
    server = QueryServer(engine, split_addr(cfg.addr), cfg.workers)
    print(f"listening on {server.address}", file=sys.stderr, flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_bench(args) -> int:
    from .bench import run_bench

    cfg = _config(args)
    report = run_bench(n=args.n, dim=args.dim, reps=cfg.bench_reps, k=cfg.k, quota=cfg.quota,
                       sub_size=args.sub_size, seed=args.seed)
    _emit(report, args.json)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if args.figures:
        from .plotting import latency_figure
        log.info("wrote %s", latency_figure(report, Path(args.figures) / "latency.png"))
    return 0


def cmd_sim(args) -> int:
    cfg = _config(args)
    sim_cfg = harness.SimConfig(
        seed=args.seed,
        episodes=args.episodes,
        n_train=args.n_train,
        walks_per_world=args.walks,
        k=args.k if args.k is not None else harness.SimConfig.k,
        quota=cfg.quota,
        lookahead=None if args.lookahead < 0 else args.lookahead,
    )
    report = harness.run_sim(sim_cfg)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    brief = {k: report[k] for k in ("config", "graph", "summary", "sr_margin")}
    _emit(brief, args.json)
    if args.figures:
        from .plotting import sim_figure
        log.info("wrote %s", sim_figure(report, Path(args.figures) / "sim.png"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML configuration file")
    common.add_argument("--json", action="store_true", help="pretty-print one JSON document")
    common.add_argument("-v", "--verbose", action="store_true")

    graph = argparse.ArgumentParser(add_help=False)
    graph.add_argument("--graph", metavar="DIR", help="graph store directory")

    retr = argparse.ArgumentParser(add_help=False)
    retr.add_argument("--k", type=int, help="coarse top-K")
    retr.add_argument("--events", type=int, help="fine quota: max event hits")
    retr.add_argument("--scenes", type=int, help="fine quota: max scene hits")

    p = argparse.ArgumentParser(prog="ekg", description="Event knowledge graph engine.")
    sub = p.add_subparsers(dest="command", required=True, metavar="<command>")

    s = sub.add_parser("segment", parents=[common], help="frame similarities -> clip manifest")
    s.add_argument("sims", help="EKGF matrix of frame-to-label similarities")
    s.add_argument("--labels", help="label names, one per line (default: SIMS.labels)")
    s.add_argument("--indoor", help="indoor label names, one per line (default: all)")
    s.add_argument("--video-id")
    s.add_argument("--row-offset", type=int, default=0, help="feature row of the first clip")
    s.add_argument("--tau", type=float)
    s.add_argument("--theta-indoor", type=float)
    s.add_argument("--min-seg-len", type=int)
    s.add_argument("--fps", type=float)
    s.add_argument("--out", help="write the manifest here instead of stdout")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("annotate", parents=[common], help="clip manifest -> annotations")
    s.add_argument("--manifest", required=True)
    s.add_argument("--client", choices=("mock", "http", "stdio"), default="mock")
    s.add_argument("--url", help="annotation endpoint for --client http")
    s.add_argument("--cmd", help="command line for --client stdio")
    s.add_argument("--max-in-flight", type=int, default=4)
    s.add_argument("--out")
    s.set_defaults(func=cmd_annotate)

    s = sub.add_parser("build", parents=[common, graph], help="annotations + features -> graph store")
    s.add_argument("--manifest", required=True)
    s.add_argument("--annotations", required=True)
    s.add_argument("--features", required=True, help="EKGF visual features, one row per clip")
    s.add_argument("--text-features", help="EKGF text embeddings, row-aligned with --features")
    s.add_argument("--vocabulary", help="room names, one per line")
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("stats", parents=[common, graph], help="graph statistics")
    s.add_argument("--figures", metavar="DIR", help="also render figures into DIR")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("query", parents=[common, graph, retr], help="one query, or a stdin request loop")
    s.add_argument("--op", choices=("coarse", "fine", "expand", "tail", "stats"))
    s.add_argument("--vector", help="JSON array, comma list, or @file.json")
    s.add_argument("--like", type=int, metavar="NODE", help="use this node's own feature as the query")
    s.add_argument("--seeds", help="comma-separated seed ids")
    s.add_argument("--nodes", help="comma-separated subgraph ids for --op fine")
    s.add_argument("--hits", help="JSON hit list for --op tail")
    s.add_argument("--max-depth", type=int)
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("serve", parents=[common, graph, retr], help="run the query service")
    s.add_argument("--addr", metavar="HOST:PORT")
    s.add_argument("--workers", type=int)
    s.add_argument("--stdio", action="store_true", help="serve stdin/stdout instead of TCP")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("bench", parents=[common, retr], help="retrieval latency benchmark")
    s.add_argument("--n", type=int, default=80_000, help="synthetic corpus size")
    s.add_argument("--dim", type=int, default=768)
    s.add_argument("--reps", type=int)
    s.add_argument("--sub-size", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="also write the report here")
    s.add_argument("--figures", metavar="DIR")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("sim", parents=[common, retr], help="navigation harness")
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--episodes", type=int, default=200)
    s.add_argument("--n-train", type=int, default=harness.SimConfig.n_train)
    s.add_argument("--walks", type=int, default=harness.SimConfig.walks_per_world)
    s.add_argument("--lookahead", type=int, default=1, help="tail look-ahead hops (-1: whole chain)")
    s.add_argument("--out", help="write sim-report.json here")
    s.add_argument("--figures", metavar="DIR")
    s.set_defaults(func=cmd_sim)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except EKGError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return IO_EXIT


if __name__ == "__main__":
    sys.exit(main())
