"""Figure rendering for the report path. All figures go to files, never to a
display; the Agg backend is forced so headless runs behave."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def save_decay_plot(curves: dict[str, list[tuple[int, float]]], path, title=None) -> None:
    """Plot Dice-vs-distance curves, one line per run, and write a raster file."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for run_id in sorted(curves):
        points = sorted(curves[run_id])
        ax.plot(
            [d for d, _ in points],
            [v for _, v in points],
            marker="o",
            markersize=3,
            label=run_id,
        )
    ax.set_xlabel("distance from annotated slice")
    ax.set_ylabel("mean Dice")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True, alpha=0.3)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_loss_plot(epoch_losses: list[float], path, title=None) -> None:
    """Per-epoch mean training loss."""
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    ax.plot(range(len(epoch_losses)), epoch_losses, marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean reconstruction loss")
    ax.grid(True, alpha=0.3)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
