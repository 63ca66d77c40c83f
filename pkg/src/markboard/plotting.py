"""Figures for attack sweeps, written next to the CSV rows they plot."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_sweep(reports, path, xlabel: str, chance: float | None = None) -> Path:
    """Clean accuracy and bit accuracy against the swept parameter."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    xs = [next(iter(r.params.values())) for r in reports]
    fig, ax = plt.subplots(figsize=(5.0, 3.4), dpi=120)
    ax.plot(xs, [r.cdp_post for r in reports], marker="o", label="clean accuracy")
    ax.plot(xs, [r.bit_acc for r in reports], marker="s", label="bit accuracy")
    if chance is not None:
        ax.axhline(chance, color="grey", lw=0.8, ls=":", label="chance")
    ax.set_xlabel(xlabel)
    ax.set_ylim(-0.02, 1.05)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left", fontsize=8)
    kind = reports[0].kind if reports else "sweep"
    ax.set_title(f"{kind} sweep", fontsize=10)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
