"""Segmentation scores (IoU, mIoU, ASR/mASR) and feature-space diagnostics."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np

from .formats import VOID


class ConfusionMatrix:
    """Rows are ground truth, columns predictions.  Void ground truth is skipped."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        keep = gt != VOID
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        if g.size and (g.max() >= self.num_classes or p.max() >= self.num_classes):
            raise ValueError("class id out of range")
        n = self.num_classes
        self.counts += np.bincount(g * n + p, minlength=n * n).reshape(n, n)
        return self

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    return cm.accumulate(pred, gt)


@dataclass
class IoUResult:
    per_class: np.ndarray  # NaN where undefined
    defined: np.ndarray
    miou: float
    stddev: float


def iou_from_values(values: Sequence[float | None]) -> IoUResult:
    per = np.array([np.nan if v is None else float(v) for v in values])
    defined = ~np.isnan(per)
    if not defined.any():
        raise ValueError("no class has a defined IoU")
    vals = per[defined]
    return IoUResult(per, defined, float(vals.mean()), float(vals.std()))


def iou(cm: ConfusionMatrix) -> IoUResult:
    """Per-class IoU, their mean and population standard deviation.

    Classes absent from both prediction and ground truth are undefined and
    excluded from the aggregates.
    """
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - tp
    per = [tp[c] / union[c] if union[c] > 0 else None for c in range(cm.num_classes)]
    return iou_from_values(per)


@dataclass
class ASRReport:
    classes: list[int]
    iou_adapt: np.ndarray
    iou_sup: np.ndarray
    asr: np.ndarray  # NaN for excluded classes
    excluded: list[int] = field(default_factory=list)

    @property
    def masr(self) -> float:
        return float(np.nanmean(self.asr))

    @property
    def miou_adapt(self) -> float:
        return float(np.mean(self.iou_adapt))

    @property
    def miou_sup(self) -> float:
        return float(np.mean(self.iou_sup))

    @property
    def iou_stddev(self) -> float:
        return float(np.std(self.iou_adapt))


def masr(iou_adapt: Sequence[float], iou_sup: Sequence[float], classes: Sequence[int] | None = None) -> ASRReport:
    """Ratio of adapted to target-supervised IoU per class, and its mean.

    Classes whose supervised IoU is zero (or undefined) are excluded with a
    warning.
    """
    a = np.asarray(iou_adapt, dtype=np.float64)
    s = np.asarray(iou_sup, dtype=np.float64)
    if a.shape != s.shape:
        raise ValueError("IoU vectors differ in length")
    idx = list(range(a.size)) if classes is None else list(classes)
    asr = np.full(len(idx), np.nan)
    excluded = []
    for k, c in enumerate(idx):
        if not np.isfinite(s[c]) or s[c] <= 0 or not np.isfinite(a[c]):
            excluded.append(c)
            continue
        asr[k] = a[c] / s[c]
    if excluded:
        warnings.warn(f"classes {excluded} excluded from mASR (no supervised IoU)", RuntimeWarning)
    if np.isnan(asr).all():
        raise ValueError("no class left to compute mASR")
    return ASRReport(idx, a[idx], s[idx], asr, excluded)


# ---------------------------------------------------------------------------
# bundled results table


@dataclass
class ResultsTable:
    class_names: list[str]
    subset_marked: list[bool]  # classes dropped in the 13-class variant
    rows: dict[tuple[str, str], dict]

    def row(self, setup: str, method: str) -> dict:
        try:
            return self.rows[(setup, method)]
        except KeyError:
            raise KeyError(f"no row for setup={setup!r} method={method!r}") from None

    def per_class(self, setup: str, method: str) -> list[float | None]:
        return self.row(setup, method)["iou"]

    def classes_available(self, setup: str, method: str) -> list[int]:
        return [i for i, v in enumerate(self.per_class(setup, method)) if v is not None]

    def thirteen_class_subset(self, setup: str, method: str) -> list[int]:
        return [i for i in self.classes_available(setup, method) if not self.subset_marked[i]]


def _num(cell: str) -> float | None:
    cell = cell.strip()
    return None if cell in ("", "-") else float(cell)


def load_table1(path=None) -> ResultsTable:
    """Parse the bundled comparison table (values in percent)."""
    if path is None:
        text = resources.files("lsrseg").joinpath("tables/table1.csv").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    reader = csv.reader(line for line in text.splitlines() if line and not line.startswith("#"))
    header = next(reader)
    class_cols = header[2:-4]
    names = [c.rstrip("*") for c in class_cols]
    marked = [c.endswith("*") for c in class_cols]
    rows = {}
    for rec in reader:
        setup, method = rec[0], rec[1]
        vals = [_num(v) for v in rec[2:]]
        rows[(setup, method)] = {
            "iou": vals[: len(names)],
            "miou": vals[len(names)],
            "miou13": vals[len(names) + 1],
            "masr": vals[len(names) + 2],
            "masr13": vals[len(names) + 3],
        }
    return ResultsTable(names, marked, rows)


# ---------------------------------------------------------------------------
# feature diagnostics


def prototype_angles(prototypes: np.ndarray, mask: Sequence[bool] | None = None) -> tuple[np.ndarray, float, list[int]]:
    """Pairwise angles in degrees between prototype directions.

    Returns the angle matrix over the kept classes, the mean off-diagonal
    angle, and the kept class ids.  Zero-norm prototypes are dropped.
    """
    protos = np.asarray(prototypes, dtype=np.float64)
    ids = [i for i in range(len(protos)) if mask is None or mask[i]]
    kept = []
    for i in ids:
        if np.linalg.norm(protos[i]) == 0:
            warnings.warn(f"prototype {i} has zero norm; skipped", RuntimeWarning)
        else:
            kept.append(i)
    if len(kept) < 2:
        raise ValueError("need at least two non-zero prototypes")
    u = protos[kept] / np.linalg.norm(protos[kept], axis=1, keepdims=True)
    angles = np.degrees(np.arccos(np.clip(u @ u.T, -1.0, 1.0)))
    np.fill_diagonal(angles, 0.0)
    m = len(kept)
    return angles, float(angles.sum() / (m * (m - 1))), kept


@dataclass
class NormStats:
    class_mean: dict[int, float]
    median: float
    interval: tuple[float, float]

    @property
    def width(self) -> float:
        return self.interval[1] - self.interval[0]


def norm_stats(features: np.ndarray, labels: np.ndarray) -> NormStats:
    """Per-class mean feature norm and the global median / 2.5-97.5 percentile band."""
    feats = np.asarray(features, dtype=np.float64)
    labs = np.asarray(labels)
    norms = np.linalg.norm(feats, axis=-1)
    class_mean = {int(c): float(norms[labs == c].mean()) for c in np.unique(labs) if c != VOID}
    lo, med, hi = np.percentile(norms, [2.5, 50.0, 97.5])
    return NormStats(class_mean, float(med), (float(lo), float(hi)))


@dataclass
class Projection:
    coords: np.ndarray
    explained_variance: np.ndarray
    rank_deficient: bool


def pca_project(features: np.ndarray) -> Projection:
    """Project onto the two leading principal components of the centred sample.

    Each component's sign is fixed so that its largest-magnitude loading is
    positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError("need at least three feature vectors")
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2].copy()
    for k in range(comps.shape[0]):
        if comps[k, np.argmax(np.abs(comps[k]))] < 0:
            comps[k] = -comps[k]
    var = s ** 2 / (x.shape[0] - 1)
    tol = s[0] * max(x.shape) * np.finfo(float).eps if s.size else 0.0
    deficient = int(np.count_nonzero(s > tol)) < 2
    coords = xc @ comps.T
    if coords.shape[1] < 2:
        coords = np.hstack([coords, np.zeros((coords.shape[0], 2 - coords.shape[1]))])
    if deficient:
        coords[:, 1] = 0.0
    return Projection(coords, var[:2], deficient)
