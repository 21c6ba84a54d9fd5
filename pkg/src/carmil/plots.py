"""Figure rendering for CLI reports.

Every figure lands next to the delimited output it visualizes; the CSVs
stay the data of record. Rendering is headless (Agg) and byte-stable:
fixed dpi and fixed PNG metadata, so reruns overwrite with identical
files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE = {"dpi": 120, "metadata": {"Software": "carmil"}}


def _finish(fig, path: str | Path) -> None:
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def loss_curves(curves, path: str | Path) -> None:
    """Per-epoch survival / reconstruction / total loss lines."""
    epochs = [c.epoch for c in curves]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [c.loss_mil for c in curves], label="survival")
    if any(c.loss_car is not None for c in curves):
        ax.plot(epochs, [c.loss_car for c in curves], label="reconstruction")
    ax.plot(epochs, [c.loss_total for c in curves], label="total", linestyle="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    _finish(fig, path)


def heatmap_pair(coords, values_features, values_encoder, path: str | Path) -> None:
    """Side-by-side tile heatmaps on a shared [0, 1] color scale."""
    panels = [("features", values_features)]
    if values_encoder is not None:
        panels.append(("encoder", values_encoder))
    fig, axes = plt.subplots(1, len(panels), figsize=(4.5 * len(panels), 4), squeeze=False)
    for ax, (title, vals) in zip(axes[0], panels):
        sc = ax.scatter(coords[:, 0], coords[:, 1], c=vals, cmap="viridis", vmin=0.0, vmax=1.0,
                        marker="s", s=120)
        ax.set_title(title)
        ax.set_aspect("equal")
        fig.colorbar(sc, ax=ax, shrink=0.8)
    _finish(fig, path)


def fold_cindex(report, path: str | Path) -> None:
    folds = [f.fold for f in report.folds]
    scores = [f.cindex for f in report.folds]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(folds, scores, color="#4878d0")
    ax.axhline(report.cindex_mean, color="k", linestyle="--", label=f"mean {report.cindex_mean:.3f}")
    ax.axhline(0.5, color="gray", linewidth=0.8)
    ax.set_xlabel("outer fold")
    ax.set_ylabel("C-index")
    ax.set_ylim(0, 1)
    ax.legend()
    _finish(fig, path)


def deltacon_comparison(dx, dz, path: str | Path) -> None:
    """Per-slide feature-space vs embedding-space similarity scatter."""
    dx = np.asarray(dx, dtype=float)
    dz = np.asarray(dz, dtype=float)
    lo = min(dx.min(), dz.min())
    hi = max(dx.max(), dz.max())
    pad = 0.05 * (hi - lo + 1e-12)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(dx, dz, s=14, alpha=0.7)
    ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad], color="gray", linewidth=0.8)
    ax.set_xlabel("DeltaCon(spatial, features)")
    ax.set_ylabel("DeltaCon(spatial, embeddings)")
    _finish(fig, path)


def shuffle_deltas(rows, path: str | Path) -> None:
    deltas = [r["cindex_original"] - r["cindex_shuffled"] for r in rows]
    labels = [f"f{r['fold']}/s{r['seed']}" for r in rows]
    fig, ax = plt.subplots(figsize=(max(5, 0.5 * len(rows)), 3.5))
    ax.bar(range(len(deltas)), deltas, color="#d65f5f")
    ax.axhline(0.0, color="k", linewidth=0.8)
    ax.set_xticks(range(len(deltas)))
    ax.set_xticklabels(labels, rotation=60, fontsize=7)
    ax.set_ylabel("C-index drop under shuffle")
    _finish(fig, path)


def dataset_overview(slides, path: str | Path) -> None:
    """First slide's planted cluster plus the survival-time histogram."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    sample = slides[0]
    colors = np.where(sample.cluster_mask, "#d65f5f", "#4878d0")
    axes[0].scatter(sample.tiles.coords[:, 0], sample.tiles.coords[:, 1], c=colors, marker="s", s=120)
    axes[0].set_title(f"{sample.tiles.slide_id}: planted cluster")
    axes[0].set_aspect("equal")
    times = [s.label.time for s in slides]
    events = [s.label.event for s in slides]
    axes[1].hist([t for t, e in zip(times, events) if e], bins=20, alpha=0.7, label="event")
    axes[1].hist([t for t, e in zip(times, events) if not e], bins=20, alpha=0.7, label="censored")
    axes[1].set_xlabel("time")
    axes[1].legend()
    _finish(fig, path)
