"""CSV and SVG exports of feature diagnostics.

Figures are written with a fixed SVG hash salt and no date stamp, so the same
diagnostics always produce byte-identical files.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SVG_META = {"Date": None, "Creator": None}
_PALETTE = ("#7f7f7f", "#d4b106", "#c0392b", "#2e5cb8", "#2e8b57", "#8e44ad", "#e67e22")


def _save(fig, path: Path) -> None:
    with matplotlib.rc_context({"svg.hashsalt": "lsrseg", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def _color(c: int) -> str:
    return _PALETTE[c % len(_PALETTE)]


def write_norms(diag, out: Path, class_names: Sequence[str]) -> None:
    stats = diag.norms
    with open(out / "norms.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "name", "mean_norm"])
        for c, v in sorted(stats.class_mean.items()):
            w.writerow([c, class_names[c], repr(v)])
        w.writerow(["median", "", repr(stats.median)])
        w.writerow(["p2.5", "", repr(stats.interval[0])])
        w.writerow(["p97.5", "", repr(stats.interval[1])])

    fig, ax = plt.subplots(figsize=(5, 3.2))
    classes = sorted(stats.class_mean)
    ax.bar(range(len(classes)), [stats.class_mean[c] for c in classes], color=[_color(c) for c in classes])
    ax.axhspan(*stats.interval, color="0.85", zorder=0, label="95% interval")
    ax.axhline(stats.median, color="k", lw=1, label="median")
    ax.set_xticks(range(len(classes)), [class_names[c] for c in classes])
    ax.set_ylabel("mean feature norm")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    _save(fig, out / "norms.svg")


def write_angles(diag, out: Path, class_names: Sequence[str]) -> None:
    names = [class_names[c] for c in diag.angle_classes]
    with open(out / "angles.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class"] + names)
        for name, row in zip(names, diag.angles):
            w.writerow([name] + [repr(float(v)) for v in row])
        w.writerow(["mean_off_diagonal", repr(diag.mean_angle)])

    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(diag.angles, vmin=0, vmax=90, cmap="viridis")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_yticks(range(len(names)), names)
    for i in range(len(names)):
        for j in range(len(names)):
            ax.text(j, i, f"{diag.angles[i, j]:.0f}", ha="center", va="center", fontsize=7,
                    color="w" if diag.angles[i, j] < 45 else "k")
    ax.set_title(f"prototype angles (mean {diag.mean_angle:.1f} deg)", fontsize=9)
    fig.colorbar(im, ax=ax, label="degrees")
    fig.tight_layout()
    _save(fig, out / "angles.svg")


def write_projection(diag, out: Path, class_names: Sequence[str]) -> None:
    coords = diag.projection.coords
    with open(out / "projection.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "norm", "pc1", "pc2"])
        for lab, n, (x, y) in zip(diag.sample_labels, diag.sample_norms, coords):
            w.writerow([int(lab), repr(float(n)), repr(float(x)), repr(float(y))])

    fig, ax = plt.subplots(figsize=(4.2, 4))
    for c in np.unique(diag.sample_labels):
        sel = diag.sample_labels == c
        ax.scatter(coords[sel, 0], coords[sel, 1], s=4, color=_color(int(c)), label=class_names[int(c)])
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend(fontsize=7, markerscale=3)
    fig.tight_layout()
    _save(fig, out / "projection.svg")


def write_diagnostics(diag, out: Path, class_names: Sequence[str]) -> list[Path]:
    """Write norms, angles and projection as CSV + SVG pairs; returns the files."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_norms(diag, out, class_names)
    write_angles(diag, out, class_names)
    write_projection(diag, out, class_names)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        w.writerow(["mean_norm", repr(diag.mean_norm)])
        w.writerow(["norm_median", repr(diag.norms.median)])
        w.writerow(["norm_interval_width", repr(diag.norms.width)])
        w.writerow(["mean_angle", repr(diag.mean_angle)])
        w.writerow(["resampled_classes", " ".join(str(c) for c in diag.resampled)])
        w.writerow(["rank_deficient_projection", str(diag.projection.rank_deficient)])
    return sorted(out.iterdir())
