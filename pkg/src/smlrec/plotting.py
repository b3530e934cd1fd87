"""Figures written next to the tabular reports (headless, Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "font.size": 9,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def _by_method(rows, key):
    out: dict[str, list[tuple[int, float]]] = {}
    for r in rows:
        out.setdefault(str(r["method"]), []).append((int(r["period"]), float(r[key])))
    return {m: sorted(v) for m, v in out.items()}


def metric_by_period(rows, path, metric="recall@10"):
    """One line per method: ``metric`` at each evaluated period.

    ``rows`` are dicts with at least ``method``, ``period`` and ``metric``
    (for example the rows of ``report.tsv``).
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for method, pts in _by_method(rows, metric).items():
            x, y = zip(*pts)
            ax.plot(x, y, marker="o", ms=3, label=method)
        ax.set_xlabel("period")
        ax.set_ylabel(metric)
        ax.legend()
        return _save(fig, path)


def cost_by_period(rows, path):
    """Examples touched (left) and retraining wall time (right) per period."""
    with plt.rc_context({**STYLE, "figure.figsize": (9.0, 3.4)}):
        fig, (a, b) = plt.subplots(1, 2)
        for method, pts in _by_method(rows, "examples_touched").items():
            x, y = zip(*pts)
            a.plot(x, y, marker="o", ms=3, label=method)
        for method, pts in _by_method(rows, "wall_time").items():
            x, y = zip(*pts)
            b.plot(x, y, marker="o", ms=3, label=method)
        a.set_xlabel("period")
        a.set_ylabel("examples touched")
        b.set_xlabel("period")
        b.set_ylabel("seconds")
        b.set_yscale("log")
        a.legend()
        return _save(fig, path)


def filters(F1s: dict[str, np.ndarray], path):
    """Heatmaps of the first-layer filters; columns are (previous, new, product) inputs."""
    names = sorted(F1s)
    with plt.rc_context({**STYLE, "axes.grid": False, "figure.figsize": (3.0 * len(names) + 1, 3.6)}):
        fig, axes = plt.subplots(1, len(names), squeeze=False)
        lim = max(float(np.abs(F1s[n]).max()) for n in names) or 1.0
        for ax, n in zip(axes[0], names):
            im = ax.imshow(F1s[n], cmap="RdBu_r", vmin=-lim, vmax=lim, aspect="auto")
            ax.set_title(n)
            ax.set_xticks([0, 1, 2], ["prev", "new", "prod"])
            ax.set_ylabel("filter")
        fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        return path
