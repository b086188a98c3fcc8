"""Matplotlib figures for experiment reports (written to files, never shown)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# PNG metadata would otherwise embed the matplotlib version string
_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}

_RC = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.figsize": (6.4, 3.6),
}


def plot_fusion_accuracy(rows, path: str | Path, n: int | None = None) -> Path:
    """Fused accuracy of the selected top combinations, grouped by size k.

    ``rows`` are ``fusion.TopRow`` items; one marker per combination, one
    colour per k, in the order the rows are given.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        ks = sorted({r.k for r in rows})
        x = 1
        ticks, labels = [], []
        for k in ks:
            group = [r for r in rows if r.k == k]
            xs = list(range(x, x + len(group)))
            ax.plot(xs, [100 * r.accuracy for r in group], "o-", label=f"{k}/{n}" if n else f"k={k}")
            ticks.append((xs[0] + xs[-1]) / 2)
            labels.append(f"{k}/{n}" if n else f"k={k}")
            x += len(group) + 1
        ax.set_xticks(ticks, labels)
        ax.set_ylabel("fusion accuracy [%]")
        ax.set_xlabel("combination size")
        if rows:
            ax.legend(frameon=False, loc="lower right")
        fig.tight_layout()
        fig.savefig(path, **_SAVE_KW)
        plt.close(fig)
    return path


def plot_standalone_accuracy(ids: Sequence[str], accuracies: Sequence[float], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        pos = range(len(ids))
        ax.bar(pos, [100 * a for a in accuracies], color="0.5")
        ax.set_xticks(list(pos), list(ids), rotation=45, ha="right")
        ax.set_ylabel("standalone accuracy [%]")
        fig.tight_layout()
        fig.savefig(path, **_SAVE_KW)
        plt.close(fig)
    return path
