"""Matplotlib figures written next to the CSV and text outputs of the CLI.

Everything renders through the Agg backend and PNG metadata is stripped so
that repeated runs produce identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DPI = 120
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", dpi=DPI, metadata=_META)
    plt.close(fig)
    return path


def training_curve(log: Sequence[Mapping[str, float]], path) -> Path:
    """Loss terms and validation scores per epoch."""
    epochs = [r["epoch"] for r in log]
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(8, 3))
    ax_loss.plot(epochs, [r["loss_ce"] for r in log], marker="o", ms=3, label="cross-entropy")
    if any(r["loss_topo"] for r in log):
        ax_loss.plot(epochs, [r["loss_topo"] for r in log], marker="s", ms=3, label="persistence")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean batch loss")
    ax_loss.legend(frameon=False)
    ax_val.plot(epochs, [r["val_dice"] for r in log], marker="o", ms=3, color="C2", label="Dice")
    ax_val.set_xlabel("epoch")
    ax_val.set_ylabel("validation Dice")
    twin = ax_val.twinx()
    twin.plot(epochs, [r["val_betti0_err"] for r in log], marker="s", ms=3, color="C3", label="Betti-0 error")
    twin.set_ylabel("Betti-0 error")
    fig.tight_layout()
    return _save(fig, path)


def kernel_traces(image: np.ndarray, traces: Mapping[str, Sequence[tuple[float, float]]], path) -> Path:
    """Sampling positions of every DSConv layer drawn over the input image.

    Traces of deeper layers live on coarser grids; ``traces`` holds
    coordinates already mapped to input pixels.
    """
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.imshow(image, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
    for i, (name, pts) in enumerate(traces.items()):
        xy = np.asarray(pts, dtype=np.float64)
        ax.plot(xy[:, 0], xy[:, 1], "-o", ms=3, lw=1, color=f"C{i % 10}", label=name)
    ax.set_axis_off()
    if traces:
        ax.legend(fontsize=6, loc="upper right", frameon=True)
    fig.tight_layout()
    return _save(fig, path)


def persistence_diagrams(diagrams: Mapping[str, Sequence], path) -> Path:
    """Birth/death scatter per homology dimension for each named source."""
    fig, axes = plt.subplots(1, 2, figsize=(7, 3.5))
    markers = ["o", "x", "^", "s"]
    for dim, ax in enumerate(axes):
        lo, hi = 0.0, 1.0
        for i, (name, dgms) in enumerate(diagrams.items()):
            pts = dgms[dim].points
            if len(pts):
                ax.scatter(pts[:, 0], pts[:, 1], s=18, marker=markers[i % 4], label=name)
                lo, hi = min(lo, pts.min()), max(hi, pts.max())
        ax.plot([lo, hi], [lo, hi], color="0.6", lw=0.8)
        ax.set_xlabel("birth")
        ax.set_ylabel("death")
        ax.set_title(f"dimension {dim}")
        ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def metric_summary(report, path) -> Path:
    """Box plot of the per-image metrics in a ``MetricsReport``."""
    keys = ["dice", "cldice", "acc", "auc"]
    errs = ["betti0_err", "betti1_err", "hausdorff"]
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
    for ax, cols in ((a, keys), (b, errs)):
        data = [c[np.isfinite(c)] for c in (report.column(k) for k in cols)]
        ax.boxplot(data, showfliers=True)
        ax.set_xticks(range(1, len(cols) + 1), cols, fontsize=8)
    a.set_ylabel("score")
    b.set_ylabel("error")
    fig.tight_layout()
    return _save(fig, path)
