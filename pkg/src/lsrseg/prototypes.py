"""Class-wise feature sets, per-batch centroids and EMA class prototypes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .formats import VOID


@dataclass
class BatchClassFeatures:
    """Feature vectors of one domain, flattened to rows, with their labels.

    ``rows`` keeps the autodiff link to the encoder output so that any loss
    built from these sets differentiates back into the network.
    """

    rows: Tensor
    labels: np.ndarray
    domain: str = "source"
    num_classes: int = 5
    _index: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def indices(self, c: int) -> np.ndarray:
        if c not in self._index:
            self._index[c] = np.flatnonzero(self.labels == c)
        return self._index[c]

    def void_indices(self) -> np.ndarray:
        return self.indices(VOID)

    def count(self, c: int) -> int:
        return int(self.indices(c).size)

    def present_classes(self) -> list[int]:
        return [c for c in range(self.num_classes) if self.count(c) > 0]

    def class_features(self, c: int) -> Tensor:
        return ad.index_select(self.rows, self.indices(c))

    def class_vectors(self, c: int) -> np.ndarray:
        return self.rows.data[self.indices(c)]

    @property
    def size(self) -> int:
        return int(self.labels.size)


def gather_class_features(features: Tensor, labels: np.ndarray, domain: str = "source",
                          num_classes: int = 5) -> BatchClassFeatures:
    """Partition (N, H', W', K) features by their (N, H', W') labels."""
    lab = np.asarray(labels)
    if lab.ndim == 2:
        lab = lab[None]
    if features.ndim != 4 or features.shape[:3] != lab.shape:
        raise ValueError(f"features {features.shape} do not match labels {lab.shape}")
    bad = (lab != VOID) & (lab >= num_classes)
    if bad.any():
        raise ValueError(f"labels outside [0, {num_classes}) and not VOID")
    rows = ad.reshape(features, (-1, features.shape[-1]))
    return BatchClassFeatures(rows, lab.reshape(-1).astype(np.int64), domain, num_classes)


def batch_centroids(bcf: BatchClassFeatures) -> dict[int, Tensor]:
    """Mean feature vector of every class present in the batch (differentiable)."""
    return {c: ad.mean(bcf.class_features(c), axis=0) for c in bcf.present_classes()}


@dataclass
class PrototypeBank:
    num_classes: int = 5
    channels: int = 32
    eta: float = 0.8
    zero_init: bool = False
    prototypes: np.ndarray = None
    initialized: np.ndarray = None
    mean_norm: float = 0.0
    mean_norm_valid: bool = False

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.prototypes is None:
            self.prototypes = np.zeros((self.num_classes, self.channels))
        if self.initialized is None:
            self.initialized = np.zeros(self.num_classes, dtype=bool)

    def copy(self) -> PrototypeBank:
        return PrototypeBank(self.num_classes, self.channels, self.eta, self.zero_init,
                             self.prototypes.copy(), self.initialized.copy(),
                             self.mean_norm, self.mean_norm_valid)

    def to_json(self) -> dict:
        return {
            "eta": self.eta,
            "zero_init": self.zero_init,
            "initialized": [bool(b) for b in self.initialized],
            "mean_norm": self.mean_norm,
            "mean_norm_valid": self.mean_norm_valid,
        }

    @classmethod
    def from_json(cls, meta: dict, prototypes: np.ndarray) -> PrototypeBank:
        return cls(prototypes.shape[0], prototypes.shape[1], meta["eta"], meta.get("zero_init", False),
                   np.array(prototypes, dtype=np.float64), np.array(meta["initialized"], dtype=bool),
                   meta.get("mean_norm", 0.0), meta.get("mean_norm_valid", False))


def ema_update(bank: PrototypeBank, centroids: dict[int, Tensor | np.ndarray]) -> PrototypeBank:
    """Exponential smoothing of the prototypes of classes present in ``centroids``.

    Absent classes keep their previous estimate untouched.  Unless
    ``bank.zero_init`` is set, a class seen for the first time takes its
    centroid directly instead of being blended with the zero vector.
    """
    for c, p in centroids.items():
        vec = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
        if not bank.initialized[c] and not bank.zero_init:
            bank.prototypes[c] = vec
        else:
            bank.prototypes[c] = bank.eta * bank.prototypes[c] + (1.0 - bank.eta) * vec
        bank.initialized[c] = True
    return bank
