"""Figures for scenario runs, written next to the TSV metrics."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .executor import HUB  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
})


def _event_label(rec) -> str:
    return f"{rec.index}:{rec.event}\n({','.join(map(str, rec.config))})"


def plot_cumulative(metrics, path) -> None:
    recs = metrics.records
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.step(range(len(recs)), [r.cumulative_bytes for r in recs], where="post", color="k")
    ax.set_xticks(range(len(recs)))
    ax.set_xticklabels([_event_label(r) for r in recs], fontsize=7)
    ax.set_ylabel("cumulative bytes moved")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_event_traffic(rec, path) -> None:
    """Per-node ingress/egress bars for one reconfiguration."""
    r = rec.report
    nodes = sorted(set(r.ingress) | set(r.egress), key=lambda n: (n == HUB, str(n)))
    x = range(len(nodes))
    fig, ax = plt.subplots(figsize=(max(4, 0.35 * len(nodes) + 1.5), 3))
    ax.bar([i - 0.2 for i in x], [r.ingress.get(n, 0) for n in nodes], width=0.4, label="ingress", color="#4c72b0")
    ax.bar([i + 0.2 for i in x], [r.egress.get(n, 0) for n in nodes], width=0.4, label="egress", color="#dd8452")
    ax.set_xticks(list(x))
    ax.set_xticklabels([str(n) for n in nodes], rotation=90, fontsize=7)
    ax.set_ylabel("bytes")
    ax.set_title(f"event {rec.index} ({rec.event}, {r.mode})")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_figures(metrics, directory) -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    if metrics.records:
        p = directory / "cumulative_bytes.png"
        plot_cumulative(metrics, p)
        written.append(p)
    for rec in metrics.records:
        if rec.report is not None and (rec.report.ingress or rec.report.egress):
            p = directory / f"event{rec.index:03d}_{rec.event}_traffic.png"
            plot_event_traffic(rec, p)
            written.append(p)
    return written
