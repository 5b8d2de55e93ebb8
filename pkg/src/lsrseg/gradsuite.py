"""Finite-difference checks for every primitive, every loss and the network."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_difference_check
from .losses import (
    NormTracker,
    clustering_loss,
    cross_entropy,
    max_square_entropy,
    norm_loss_source,
    norm_loss_target,
    perpendicularity_loss,
)
from .prototypes import BatchClassFeatures, PrototypeBank
from .segnet import SegNet

EPSILON = 1e-5
TOLERANCE = 1e-5


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.05) -> np.ndarray:
    x = rng.normal(size=shape)
    return np.sign(x) * (np.abs(x) + margin)


def _separated(rng: np.random.Generator, shape) -> np.ndarray:
    """Rows whose entries are distinct by a clear margin (no argmax ties)."""
    base = rng.permutation(shape[-1]) * 0.3
    return base + rng.uniform(0, 0.1, size=shape)


def _case(rng: np.random.Generator, name: str) -> tuple[Callable[..., Tensor], list[Tensor]]:
    T = Tensor
    if name == "conv2d":
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        return (lambda x, k: _weighted(ad.conv2d(x, k, stride, pad)),
                [T(rng.normal(size=(1, 4, 4, 2))), T(rng.normal(size=(3, 3, 2, 3)))])
    if name == "relu":
        return lambda x: _weighted(ad.relu(x)), [T(_away_from_zero(rng, (3, 4)))]
    if name == "hinge":
        return lambda x: _weighted(ad.hinge(x)), [T(_away_from_zero(rng, (3, 4)))]
    if name == "abs":
        return lambda x: _weighted(ad.absolute(x)), [T(_away_from_zero(rng, (3, 4)))]
    if name == "add":
        return lambda a, b: _weighted(ad.add(a, b)), [T(rng.normal(size=(2, 3, 4))), T(rng.normal(size=(4,)))]
    if name == "sub":
        return lambda a, b: _weighted(ad.sub(a, b)), [T(rng.normal(size=(2, 3, 4))), T(rng.normal(size=(3, 4)))]
    if name == "scale":
        c = float(rng.normal())
        return lambda x: _weighted(ad.scale(x, c)), [T(rng.normal(size=(5,)))]
    if name == "sum":
        return lambda x: _weighted(ad.tsum(x, axis=1)), [T(rng.normal(size=(3, 4, 2)))]
    if name == "mean":
        return lambda x: _weighted(ad.mean(x, axis=(0, 2))), [T(rng.normal(size=(3, 4, 2)))]
    if name == "l2norm":
        return lambda x: _weighted(ad.l2norm(x)), [T(rng.normal(size=(4, 5)))]
    if name == "normalize":
        return lambda x: _weighted(ad.normalize(x)), [T(rng.normal(size=(4, 5)))]
    if name == "dot":
        return lambda a, b: _weighted(ad.dot(a, b)), [T(rng.normal(size=(4, 5))), T(rng.normal(size=(4, 5)))]
    if name == "softmax":
        return lambda x: _weighted(ad.softmax(x)), [T(rng.normal(size=(2, 3, 5)))]
    if name == "log_softmax":
        return lambda x: _weighted(ad.log_softmax(x)), [T(rng.normal(size=(2, 3, 5)))]
    if name == "cmax":
        return lambda x: _weighted(ad.channel_max(x)), [T(_separated(rng, (2, 3, 5)))]
    if name == "avgpool":
        return lambda x: _weighted(ad.avgpool(x, 2)), [T(rng.normal(size=(1, 4, 4, 2)))]
    if name == "upsample":
        return lambda x: _weighted(ad.upsample(x, 2)), [T(rng.normal(size=(1, 2, 3, 2)))]
    if name == "reshape":
        return lambda x: _weighted(ad.reshape(x, (6, 2))), [T(rng.normal(size=(3, 4)))]
    if name == "index_select":
        idx = rng.integers(0, 4, size=6)
        return lambda x: _weighted(ad.index_select(x, idx)), [T(rng.normal(size=(4, 3)))]
    if name == "pick":
        idx = rng.integers(0, 5, size=(2, 3))
        return lambda x: _weighted(ad.pick(x, idx)), [T(rng.normal(size=(2, 3, 5)))]
    raise KeyError(name)


def _weighted(out: Tensor) -> Tensor:
    """Contract an output with fixed random weights so every output coordinate matters."""
    w = np.random.default_rng(out.data.size).normal(size=out.shape)
    if out.ndim == 0:
        return ad.scale(out, float(w))
    flat = ad.reshape(out, (1, -1))
    return ad.tsum(ad.dot(flat, Tensor(w.reshape(1, -1))))


PRIMITIVES = (
    "conv2d", "relu", "hinge", "abs", "add", "sub", "scale", "sum", "mean", "l2norm", "normalize",
    "dot", "softmax", "log_softmax", "cmax", "avgpool", "upsample", "reshape", "index_select", "pick",
)


def _loss_case(rng: np.random.Generator, name: str) -> tuple[Callable[..., Tensor], list[Tensor]]:
    if name == "cross_entropy":
        labels = rng.integers(0, 4, size=(1, 3, 3))
        labels[0, 0, 0] = 255
        return lambda z: cross_entropy(z, labels), [Tensor(rng.normal(size=(1, 3, 3, 4)))]
    if name == "clustering":
        k = 4
        bank = PrototypeBank(3, k, prototypes=np.abs(rng.normal(size=(3, k))), initialized=np.ones(3, bool))
        labels = np.array([0, 0, 1, 2, 2, 255, 1, 0])
        return (lambda f: clustering_loss(BatchClassFeatures(f, labels, "source", 3), bank)[0],
                [Tensor(np.abs(rng.normal(size=(8, k))))])
    if name == "perpendicularity":
        return (lambda a, b, c: perpendicularity_loss({0: a, 1: b, 2: c})[0],
                [Tensor(np.abs(rng.normal(size=5)) + 0.01) for _ in range(3)])
    if name == "norm_source":
        feats = np.abs(rng.normal(size=(10, 4)))
        norms = np.linalg.norm(feats, axis=1)
        ref = float(np.median(norms)) + 0.01
        tracker = NormTracker(ref - 0.002, 0.002, True)
        # keep every norm clear of the kink at the reference
        feats *= np.where(np.abs(norms - ref) < 0.05, (ref + 0.1) / norms, 1.0)[:, None]
        labels = np.zeros(10, dtype=int)
        return lambda f: norm_loss_source(BatchClassFeatures(f, labels), tracker), [Tensor(feats)]
    if name == "norm_target":
        feats = np.abs(rng.normal(size=(10, 4)))
        norms = np.linalg.norm(feats, axis=1)
        ref = float(np.median(norms)) + 0.01
        tracker = NormTracker(ref - 0.002, 0.002, True)
        feats *= np.where(np.abs(norms - ref) < 0.05, (ref + 0.1) / norms, 1.0)[:, None]
        labels = np.full(10, 255)
        return lambda f: norm_loss_target(BatchClassFeatures(f, labels, "target"), tracker), [Tensor(feats)]
    if name == "max_square":
        return lambda z: max_square_entropy(ad.softmax(z)), [Tensor(rng.normal(size=(1, 2, 3, 5)))]
    raise KeyError(name)


LOSSES = ("cross_entropy", "clustering", "perpendicularity", "norm_source", "norm_target", "max_square")


def _net_case(rng: np.random.Generator, name: str):
    net = SegNet(num_classes=3, channels=4, seed=int(rng.integers(1 << 30)))
    image = rng.uniform(size=(1, 8, 8, 3))
    if name == "features_first_kernel":
        def fn(k):
            net.params["enc1.weight"] = k
            return ad.mean(net.features(image))
        return fn, [Tensor(net.params["enc1.weight"].data.copy())]
    if name == "logits_decoder":
        feats = Tensor(np.abs(rng.normal(size=(1, 1, 1, 4))))

        def fn(f, w):
            net.params["dec.weight"] = w
            return _weighted(net.logits(f))
        return fn, [feats, Tensor(net.params["dec.weight"].data.copy())]
    raise KeyError(name)


NETWORK = ("features_first_kernel", "logits_decoder")


def run_suite(seeds: int = 100, epsilon: float = EPSILON) -> dict[str, float]:
    """Worst relative error per check over ``seeds`` random instances."""
    results: dict[str, float] = {}
    groups = [("op", PRIMITIVES, _case), ("loss", LOSSES, _loss_case), ("net", NETWORK, _net_case)]
    for prefix, names, make in groups:
        for name in names:
            worst = 0.0
            for seed in range(seeds):
                rng = np.random.default_rng([seed, len(name)])
                fn, params = make(rng, name)
                worst = max(worst, finite_difference_check(fn, params, epsilon))
            results[f"{prefix}:{name}"] = worst
    return results
