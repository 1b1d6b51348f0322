"""Risk-versus-budget figures."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_risk_per_budget(series: Mapping[str, Sequence[Tuple[float, float]]],
                         path: Union[str, Path], title: str = "Residual risk per budget") -> Path:
    """One step line per series of (budget, residual risk) points, saved as an image."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for label, points in series.items():
        xs = [b for b, _ in points]
        ys = [r for _, r in points]
        ax.step(xs, ys, where="post", marker="o", markersize=3, label=label)
    ax.set_xlabel("budget")
    ax.set_ylabel("residual risk")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    path = Path(path)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
