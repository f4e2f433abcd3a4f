"""Report figures rendered to PNG files with the Agg backend."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes stable across runs
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_loss_curves(logs: dict, path, title: str = "Training curves") -> Path:
    """Train and validation loss per epoch; ``logs`` maps a label to a TrainLog."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, (label, log) in enumerate(sorted(logs.items())):
        epochs = [r.epoch for r in log.records]
        color = f"C{i % 10}"
        ax.plot(epochs, log.train_losses, color=color, label=f"{label} train")
        ax.plot(epochs, log.val_losses, color=color, linestyle="--", label=f"{label} val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE (standardised target)")
    ax.set_title(title)
    if logs:
        ax.legend(fontsize=7)
    return _save(fig, path)


def plot_nse_by_igbp(reports: list, path, title: str = "NSE per IGBP class") -> Path:
    """Per-seed NSE spread per IGBP class, one box group per report."""
    labels = sorted({r.igbp for rep in reports for r in rep.rows})
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(labels) * max(1, len(reports))), 4))
    width = 0.8 / max(1, len(reports))
    for j, rep in enumerate(reports):
        data = [[r.nse for r in rep.rows if r.igbp == lab] or [np.nan] for lab in labels]
        pos = np.arange(len(labels)) + (j - (len(reports) - 1) / 2) * width
        box = ax.boxplot(data, positions=pos, widths=width * 0.9, patch_artist=True)
        for patch in box["boxes"]:
            patch.set_facecolor(f"C{j % 10}")
        ax.plot([], [], color=f"C{j % 10}", linewidth=6, label=rep.model)
    ax.set_xticks(np.arange(len(labels)))
    ax.set_xticklabels(labels)
    ax.axhline(0.0, color="grey", linewidth=0.8)
    ax.set_ylabel("NSE")
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_ablation(table: dict, path, title: str = "Ablation: mean NSE") -> Path:
    """Grouped bars; ``table`` maps variant name to {igbp: mean NSE}."""
    variants = list(table)
    labels = sorted({lab for v in table.values() for lab in v})
    fig, ax = plt.subplots(figsize=(max(5, 1.0 * len(labels) * max(1, len(variants)) / 2 + 2), 4))
    width = 0.8 / max(1, len(variants))
    for j, name in enumerate(variants):
        vals = [table[name].get(lab, np.nan) for lab in labels]
        ax.bar(np.arange(len(labels)) + (j - (len(variants) - 1) / 2) * width, vals, width, label=name)
    ax.set_xticks(np.arange(len(labels)))
    ax.set_xticklabels(labels)
    ax.axhline(0.0, color="grey", linewidth=0.8)
    ax.set_ylabel("mean NSE")
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_predictions(pred, obs, path, title: str = "Predicted vs observed") -> Path:
    pred, obs = np.asarray(pred), np.asarray(obs)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(obs, pred, s=2, alpha=0.3)
    lo, hi = float(min(obs.min(), pred.min())), float(max(obs.max(), pred.max()))
    ax.plot([lo, hi], [lo, hi], color="black", linewidth=0.8)
    ax.set_xlabel("observed")
    ax.set_ylabel("predicted")
    ax.set_title(title)
    return _save(fig, path)
