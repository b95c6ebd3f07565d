"""Wall-clock latency of coarse and fine retrieval on a synthetic corpus."""

from __future__ import annotations

import os
import platform
import time

import numpy as np

from .core import EventKind, FeatureStore
from .errors import InvalidConfig
from .retrieval import SubGraph, VectorIndex, coarse_retrieve, fine_retrieve

WARMUP = 5


def synthetic_index(n: int, dim: int, seed: int = 0, scene_fraction: float = 0.25) -> VectorIndex:
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((n, dim), dtype=np.float32)
    kinds = np.where(rng.random(n) < scene_fraction, EventKind.SCENE, EventKind.EVENT)
    return VectorIndex(FeatureStore(data), kinds=list(kinds))


def _percentiles(samples: list[float]) -> tuple[float, float]:
    ms = np.asarray(samples) * 1e3
    return float(np.percentile(ms, 50)), float(np.percentile(ms, 99))


def _timed(fn, args_list) -> list[float]:
    out = []
    for args in args_list:
        t0 = time.perf_counter()
        fn(*args)
        out.append(time.perf_counter() - t0)
    return out


def host_info() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "processor": platform.processor() or platform.machine(),
        "system": platform.system(),
        "cpu_count": os.cpu_count(),
    }


def run_bench(n: int = 80_000, dim: int = 768, reps: int = 200, k: int = 3,
              quota: tuple[int, int] = (2, 1), sub_size: int = 500, seed: int = 0,
              index: VectorIndex | None = None) -> dict:
    """Warm up, then time ``reps`` coarse queries over the whole index and
    ``reps`` per-step fine queries over one fixed subgraph of ``sub_size``
    nodes (as during an episode, where the subgraph is fixed after the
    coarse stage). The first fine query on a fresh subgraph is reported
    separately as ``fine_cold_ms``."""
    if n < 1:
        raise InvalidConfig("N must be >= 1")
    if reps < 10:
        raise InvalidConfig("repetitions must be >= 10")
    t0 = time.perf_counter()
    index = index or synthetic_index(n, dim, seed)
    build_s = time.perf_counter() - t0
    rng = np.random.default_rng(seed + 1)
    queries = rng.standard_normal((WARMUP + reps, dim))
    size = min(sub_size, n)
    sub = SubGraph(tuple(int(i) for i in np.sort(rng.choice(n, size, replace=False))), ())

    cold_sub = SubGraph(tuple(int(i) for i in np.sort(rng.choice(n, size, replace=False))), ())
    t0 = time.perf_counter()
    fine_retrieve(index, cold_sub, queries[0], quota)
    fine_cold = time.perf_counter() - t0

    for q in queries[:WARMUP]:
        coarse_retrieve(index, q, k)
        fine_retrieve(index, sub, q, quota)
    coarse = _timed(lambda q: coarse_retrieve(index, q, k), [(q,) for q in queries[WARMUP:]])
    fine = _timed(lambda q: fine_retrieve(index, sub, q, quota), [(q,) for q in queries[WARMUP:]])
    c50, c99 = _percentiles(coarse)
    f50, f99 = _percentiles(fine)
    return {
        "coarse_ms_p50": c50,
        "coarse_ms_p99": c99,
        "fine_ms_p50": f50,
        "fine_ms_p99": f99,
        "fine_cold_ms": fine_cold * 1e3,
        "N": n,
        "dim": dim,
        "k": k,
        "quota": list(quota),
        "subgraph_nodes": size,
        "reps": reps,
        "screened": bool(index.screen),
        "index_build_s": build_s,
        "host": host_info(),
    }
