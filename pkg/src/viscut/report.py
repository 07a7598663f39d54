"""Figure rendering for evaluation curves and detection overlays.

Everything renders headless to files; SVG output is byte-deterministic
(fixed hash salt, no embedded date).
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "viscut"

import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import EvalCurve  # noqa: E402
from .imaging import RasterImage  # noqa: E402


def write_curve_csv(curve: EvalCurve, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "fppi", "recall"])
        for thr, (fppi, recall) in zip(curve.thresholds, curve.points):
            writer.writerow([f"{thr:.10g}", f"{fppi:.10g}", f"{recall:.10g}"])


def save_curve_figure(curve: EvalCurve, path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.4))
    if len(curve.points):
        ax.plot(curve.points[:, 0], curve.points[:, 1], "-", lw=1.6,
                color="#1f77b4")
    ax.set_xlim(0, 1.0)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("false positives per image")
    ax.set_ylabel("recall")
    ax.grid(alpha=0.3)
    ax.set_title(f"AUC = {curve.auc:.4f}")
    fig.tight_layout()
    fig.savefig(path, metadata=_metadata_for(path))
    plt.close(fig)


def _metadata_for(path) -> dict | None:
    suffix = Path(path).suffix.lower()
    if suffix == ".svg":
        return {"Date": None}
    return None


def save_overlay(image: RasterImage, boxes: list[tuple], mask: np.ndarray | None,
                 path) -> None:
    """Overlay of detection boxes (rect, score) and an optional mask tint."""
    fig, ax = plt.subplots(figsize=(image.width / 60, image.height / 60))
    data = image.data
    if data.shape[2] == 1:
        ax.imshow(data[:, :, 0], cmap="gray", vmin=0, vmax=1)
    else:
        ax.imshow(data)
    if mask is not None:
        tint = np.zeros((*mask.shape, 4))
        tint[mask] = (1.0, 0.15, 0.1, 0.45)
        ax.imshow(tint)
    for rect, score in boxes:
        x0, y0, x1, y1 = rect
        ax.add_patch(Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0, y1 - y0,
                               fill=False, edgecolor="#27e35e", lw=1.6))
        ax.text(x0, max(0.0, y0 - 2.0), f"{score:.2f}", color="#27e35e",
                fontsize=7)
    ax.set_axis_off()
    fig.tight_layout(pad=0)
    fig.savefig(path, metadata=_metadata_for(path))
    plt.close(fig)
