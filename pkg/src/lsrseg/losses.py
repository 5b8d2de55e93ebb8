"""Training objectives: cross-entropy, feature clustering, prototype
perpendicularity, norm alignment, max-square entropy and their weighted sum."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .formats import VOID
from .prototypes import BatchClassFeatures, PrototypeBank


@dataclass(frozen=True)
class LossWeights:
    clustering: float = 0.1
    perpendicularity: float = 0.1
    norm: float = 0.025
    entropy: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")


@dataclass
class NormTracker:
    """Running source mean feature norm from the previous step."""

    mean_norm: float = 0.0
    delta: float = 0.002
    valid: bool = False

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be non-negative")

    @property
    def reference(self) -> float:
        return self.mean_norm + self.delta


@dataclass
class LossReport:
    ce: float = 0.0
    clustering_s: float = 0.0
    clustering_t: float = 0.0
    perp: float = 0.0
    norm_s: float = 0.0
    norm_t: float = 0.0
    em: float = 0.0
    total: float = 0.0

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _zero() -> Tensor:
    return Tensor(0.0)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over non-void pixels."""
    lab = np.asarray(labels).reshape(-1)
    if logits.shape[:-1] != tuple(np.shape(labels)) and int(np.prod(logits.shape[:-1])) != lab.size:
        raise ValueError(f"logits {logits.shape} do not match labels {np.shape(labels)}")
    valid = np.flatnonzero(lab != VOID)
    if valid.size == 0:
        raise ValueError("every pixel is void; cross-entropy undefined")
    rows = ad.reshape(logits, (-1, logits.shape[-1]))
    if valid.size != lab.size:
        rows = ad.index_select(rows, valid)
    nll = ad.pick(ad.log_softmax(rows), lab[valid].astype(np.intp))
    return ad.scale(ad.mean(nll), -1.0)


def clustering_loss(bcf: BatchClassFeatures, bank: PrototypeBank) -> tuple[Tensor, bool]:
    """Mean squared distance of features to their class prototype, averaged over classes.

    Prototypes are constants.  Returns ``(loss, skipped)``; ``skipped`` is
    true when no class has both features and an initialized prototype.
    """
    terms = []
    for c in bcf.present_classes():
        if not bank.initialized[c]:
            continue
        diff = ad.sub(bcf.class_features(c), Tensor(bank.prototypes[c]))
        terms.append(ad.mean(ad.dot(diff, diff)))
    if not terms:
        return _zero(), True
    return ad.scale(ad.add_all(terms), 1.0 / len(terms)), False


def perpendicularity_loss(centroids: dict[int, Tensor]) -> tuple[Tensor, bool]:
    """Mean pairwise cosine similarity between per-batch class centroids."""
    kept = []
    for c in sorted(centroids):
        if not np.any(centroids[c].data):
            warnings.warn(f"class {c} centroid has zero norm; left out of perpendicularity", RuntimeWarning)
            continue
        kept.append(ad.normalize(centroids[c]))
    m = len(kept)
    if m < 2:
        return _zero(), True
    pairs = [ad.dot(kept[i], kept[j]) for i in range(m) for j in range(i + 1, m)]
    # ordered-pair sum is twice the unordered one
    return ad.scale(ad.add_all(pairs), 2.0 / (m * (m - 1))), False


def _all_norms(bcf: BatchClassFeatures) -> Tensor:
    if bcf.size == 0:
        raise ValueError("empty feature set")
    return ad.l2norm(bcf.rows)


def norm_loss_source(bcf: BatchClassFeatures, tracker: NormTracker) -> Tensor:
    """Mean |(f_bar + delta) - ||f||| over every source vector, void included."""
    if not tracker.valid:
        raise ValueError("norm tracker has no reference yet")
    gap = ad.sub(_all_norms(bcf), Tensor(tracker.reference))
    return ad.mean(ad.absolute(gap))


def norm_loss_target(bcf: BatchClassFeatures, tracker: NormTracker) -> Tensor:
    """Mean max(0, (f_bar + delta) - ||f||) over every target vector."""
    if not tracker.valid:
        raise ValueError("norm tracker has no reference yet")
    shortfall = ad.scale(ad.sub(_all_norms(bcf), Tensor(tracker.reference)), -1.0)
    return ad.mean(ad.hinge(shortfall))


def update_mean_norm(bcf: BatchClassFeatures, tracker: NormTracker) -> NormTracker:
    if bcf.size == 0:
        return tracker
    tracker.mean_norm = float(np.mean(np.sqrt(np.sum(bcf.rows.data ** 2, axis=-1))))
    tracker.valid = True
    return tracker


def max_square_entropy(probs: Tensor) -> Tensor:
    """-(1 / 2P) * sum over pixels and classes of p^2."""
    return ad.scale(ad.mean(ad.dot(probs, probs)), -0.5)


_WEIGHTED = {
    "clustering_s": "clustering",
    "clustering_t": "clustering",
    "perp": "perpendicularity",
    "norm_s": "norm",
    "norm_t": "norm",
    "em": "entropy",
}


def weighted_total(parts: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """Differentiable weighted sum; parts with zero weight are left out of the graph."""
    terms = [parts["ce"]]
    for name, wname in _WEIGHTED.items():
        w = getattr(weights, wname)
        if name in parts and w != 0.0:
            terms.append(ad.scale(parts[name], w))
    return ad.add_all(terms)


def total_loss(parts: dict[str, Tensor | float], weights: LossWeights) -> LossReport:
    """Scalar report of every term and their weighted sum.  Missing parts count as 0."""
    vals = {k: float(v.data) if isinstance(v, Tensor) else float(v) for k, v in parts.items()}
    report = LossReport(**{k: vals.get(k, 0.0) for k in LossReport.columns() if k != "total"})
    report.total = (
        report.ce
        + weights.clustering * (report.clustering_s + report.clustering_t)
        + weights.perpendicularity * report.perp
        + weights.norm * (report.norm_s + report.norm_t)
        + weights.entropy * report.em
    )
    return report
