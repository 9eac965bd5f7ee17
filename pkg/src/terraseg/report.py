"""Loss and metric curve figures, written as PNGs beside the CSVs they plot."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import read_report_csv  # noqa: E402
from .training import read_loss_csv  # noqa: E402


def plot_loss(history, path, title: str = "loss") -> Path:
    """``history`` is a list of (epoch, train_loss, val_loss) or a loss CSV path."""
    if isinstance(history, (str, Path)):
        history = read_loss_csv(history)
    path = Path(path)
    epochs = [h[0] for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [h[1] for h in history], label="train")
    val = np.array([h[2] for h in history], dtype=float)
    if np.isfinite(val).any():
        ax.plot(epochs, val, label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("BCE")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_metrics(rows, path, title: str = "metrics") -> Path:
    """``rows`` maps (split, epoch) -> (MA, MDC, MIoU), or is a metrics CSV path."""
    if isinstance(rows, (str, Path)):
        rows = read_report_csv(rows)
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for split in sorted({k[0] for k in rows}):
        keys = sorted(k for k in rows if k[0] == split)
        epochs = [k[1] for k in keys]
        for j, name in enumerate(("MA", "MDC", "MIoU")):
            ax.plot(epochs, [rows[k][j] for k in keys], marker="o", label=f"{split} {name}")
    ax.set_xlabel("epoch")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(title)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def save_overlay(x_rgb: np.ndarray, mask: np.ndarray, path) -> Path:
    """Tint predicted foreground red over an (H, W, 3) image in [0, 1]."""
    img = np.clip(np.asarray(x_rgb, dtype=np.float64), 0, 1).copy()
    on = np.asarray(mask) > 0
    img[on] = 0.4 * img[on] + 0.6 * np.array([1.0, 0.0, 0.0])
    plt.imsave(Path(path), img)
    return Path(path)
