"""Report figures. Everything renders off-screen to image files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams.update({
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
})


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def duration_histogram(stats: dict, path: str | Path) -> Path:
    """Bar chart of clip durations from ``GraphStats.to_json()``."""
    buckets = stats["duration_histogram"]
    fig, ax = plt.subplots()
    if buckets:
        xs, counts = zip(*buckets)
        ax.bar(xs, counts, width=0.9, align="edge", color="#4c72b0")
    ax.axvline(stats["mean_duration_s"], color="#c44e52", ls="--", lw=1,
               label=f"mean {stats['mean_duration_s']:.2f} s")
    ax.set_xlabel("clip duration (s, 1 s buckets)")
    ax.set_ylabel("nodes")
    ax.set_title(f"{stats['node_count']} nodes, {stats['chain_count']} chains")
    ax.legend(frameon=False)
    return _save(fig, path)


def latency_figure(report: dict, path: str | Path, coarse_budget_ms: float = 20.0,
                   fine_budget_ms: float = 1.0) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(6.0, 3.0))
    for ax, stage, budget in ((axes[0], "coarse", coarse_budget_ms), (axes[1], "fine", fine_budget_ms)):
        vals = [report[f"{stage}_ms_p50"], report[f"{stage}_ms_p99"]]
        ax.bar(["p50", "p99"], vals, color=["#4c72b0", "#8172b2"])
        ax.axhline(budget, color="#c44e52", ls="--", lw=1, label=f"budget {budget:g} ms")
        ax.set_title(f"{stage} ({report['N']} x {report['dim']})")
        ax.set_ylabel("ms")
        ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def sim_figure(report: dict, path: str | Path) -> Path:
    """SR and SPL per policy from a ``run_sim`` report."""
    summary = report["summary"]
    names = list(summary)
    x = range(len(names))
    fig, ax = plt.subplots()
    w = 0.38
    ax.bar([i - w / 2 for i in x], [summary[n]["SR"] for n in names], w, label="SR", color="#4c72b0")
    ax.bar([i + w / 2 for i in x], [summary[n]["SPL"] for n in names], w, label="SPL", color="#55a868")
    ax.set_xticks(list(x))
    ax.set_xticklabels([n.replace("_", " ") for n in names], fontsize=8)
    ax.set_ylim(0, 100)
    ax.set_ylabel("%")
    ax.set_title(f"{summary[names[0]]['episodes']} unseen houses, seed {report['config']['seed']}")
    ax.legend(frameon=False)
    return _save(fig, path)
