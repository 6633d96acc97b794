"""Static mAP-vs-epoch curves (PNG + CSV)."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .trainer import EpochMetrics  # noqa: E402


def write_curves_csv(runs: Sequence[tuple[int, Sequence[EpochMetrics]]], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pl_update_frequency", "epoch", "pl_map", "val_map"])
        for freq, rows in runs:
            for m in rows:
                w.writerow([freq, m.epoch, repr(m.pl_map), "" if m.val_map != m.val_map else repr(m.val_map)])
    return path


def _curve(ax, rows, attr, title, initial=None):
    epochs = [m.epoch for m in rows]
    values = [100 * getattr(m, attr) for m in rows]
    if initial is not None:
        epochs, values = [0] + epochs, [100 * initial] + values
    ax.plot(epochs, values, marker="o", markersize=3)
    updates = [m.epoch for m in rows if m.pl_updated]
    for e in updates:
        ax.axvline(e, color="0.85", linewidth=0.8, zorder=0)
    ax.set_title(title)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mAP (%)")
    ax.grid(alpha=0.3)


def plot_run(rows: Sequence[EpochMetrics], freq: int, out_dir, initial_pl_map: float | None = None) -> list[Path]:
    """pl_map.png and val_map.png for one run."""
    out_dir = Path(out_dir)
    paths = []
    for attr, name, title in (("pl_map", "pl_map.png", f"pseudo-label mAP, update every {freq}"),
                              ("val_map", "val_map.png", f"val mAP, update every {freq}")):
        if attr == "val_map" and all(m.val_map != m.val_map for m in rows):
            continue
        fig, ax = plt.subplots(figsize=(5, 3.5))
        _curve(ax, rows, attr, title, initial_pl_map if attr == "pl_map" else None)
        fig.tight_layout()
        fig.savefig(out_dir / name, dpi=120)
        plt.close(fig)
        paths.append(out_dir / name)
    return paths


def plot_grid(runs: Sequence[tuple[int, Sequence[EpochMetrics], float | None]], path) -> Path:
    """One row per run (pseudo-label mAP | val mAP), like a 2 x N figure."""
    fig, axes = plt.subplots(len(runs), 2, figsize=(10, 3.5 * len(runs)), squeeze=False)
    for (freq, rows, initial), (ax_pl, ax_val) in zip(runs, axes):
        _curve(ax_pl, rows, "pl_map", f"pseudo-label mAP, update every {freq}", initial)
        _curve(ax_val, rows, "val_map", f"val mAP, update every {freq}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
