"""Source pretraining, latent-space-regularized adaptation, target oracle
training, evaluation and feature diagnostics."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import ComputeGraph, Tensor, backpropagate
from .labelmap import DownsampleConfig, histogram_downsample, pseudo_labels
from .losses import (
    LossReport,
    LossWeights,
    NormTracker,
    clustering_loss,
    cross_entropy,
    max_square_entropy,
    norm_loss_source,
    norm_loss_target,
    perpendicularity_loss,
    total_loss,
    update_mean_norm,
    weighted_total,
)
from .metrics import ConfusionMatrix, IoUResult, iou, norm_stats, pca_project, prototype_angles
from .prototypes import PrototypeBank, batch_centroids, ema_update, gather_class_features
from .segnet import REDUCTION, OptimizerState, SegNet, load_checkpoint, predict_from_logits, save_checkpoint, sgd_step
from .synthdata import CLASS_NAMES, SplitData, augment, load_split, random_crop

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "lr"] + LossReport.columns()


@dataclass
class RunConfig:
    dataset: str = "data"
    seed: int = 0
    steps: int = 2000
    max_steps: int = 0  # 0: same as steps
    pretrain_steps: int = 2000
    batch_size: int = 8
    crop: int = 48
    base_lr: float = 0.02
    adapt_lr: float = 0.004
    momentum: float = 0.9
    weight_decay: float = 5e-4
    power: float = 0.9
    lambda_c: float = 0.002
    lambda_p: float = 0.02
    lambda_n: float = 0.01
    lambda_em: float = 0.1
    eta: float = 0.8
    delta_f: float = 0.002
    t_h: float = 0.5
    t_p: float = 0.5
    zero_init_prototypes: bool = False
    eval_interval: int = 200
    patience: int = 5
    num_classes: int = 5
    channels: int = 32
    augment: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.steps < 0 or self.pretrain_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.max_steps and self.max_steps < self.steps:
            raise ValueError("max_steps must cover steps")
        DownsampleConfig(REDUCTION, self.t_h, self.t_p)
        LossWeights(self.lambda_c, self.lambda_p, self.lambda_n, self.lambda_em)
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.delta_f < 0:
            raise ValueError("delta_f must be non-negative")
        if self.crop % REDUCTION:
            raise ValueError(f"crop must be a multiple of {REDUCTION}")
        if self.eval_interval < 1 or self.patience < 1:
            raise ValueError("eval_interval and patience must be positive")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_c, self.lambda_p, self.lambda_n, self.lambda_em)

    @property
    def downsample(self) -> DownsampleConfig:
        return DownsampleConfig(REDUCTION, self.t_h, self.t_p)

    def with_overrides(self, **overrides: Any) -> RunConfig:
        return replace(self, **overrides)

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> RunConfig:
        data = json.loads(Path(path).read_text())
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# shared pieces


def _fmt(x: float) -> str:
    return repr(float(x))


class TrainingLog:
    def __init__(self):
        self.buf = io.StringIO()
        self.writer = csv.writer(self.buf, lineterminator="\n")
        self.writer.writerow(LOG_COLUMNS)

    def append(self, step: int, lr: float, report: LossReport) -> None:
        self.writer.writerow([step, _fmt(lr)] + [_fmt(v) for v in report.as_dict().values()])

    def text(self) -> str:
        return self.buf.getvalue()


def _snapshot(net: SegNet, bank: PrototypeBank) -> tuple[dict[str, np.ndarray], PrototypeBank]:
    return net.state_dict(), bank.copy()


def _write_run(out: Path, net: SegNet, bank: PrototypeBank, cfg: RunConfig, kind: str, step: int,
               rng: np.random.Generator, history: list[dict], tlog: TrainingLog) -> Path:
    save_checkpoint(out, net, extra={
        "kind": kind,
        "step": step,
        "rng_state": rng.bit_generator.state,
        "bank": bank.to_json(),
        "config": asdict(cfg),
        "history": history,
    }, tensors={"prototypes": bank.prototypes})
    (out / "train_log.csv").write_text(tlog.text())
    return out


def load_run(path: str | os.PathLike) -> tuple[SegNet, PrototypeBank, dict]:
    net, manifest, tensors = load_checkpoint(path)
    if "prototypes" in tensors and "bank" in manifest:
        bank = PrototypeBank.from_json(manifest["bank"], tensors["prototypes"])
    else:
        bank = PrototypeBank(net.num_classes, net.channels)
    return net, bank, manifest


def forward_in_chunks(net: SegNet, images: np.ndarray, chunk: int = 25):
    for start in range(0, len(images), chunk):
        feats, logits = net(images[start:start + chunk])
        yield start, feats.data, logits.data


def evaluate_net(net: SegNet, data: SplitData, order: np.ndarray | None = None) -> IoUResult:
    if data.labels is None:
        raise ValueError(f"split {data.manifest.split!r} is unlabeled")
    idx = np.arange(len(data)) if order is None else np.asarray(order)
    cm = ConfusionMatrix(net.num_classes)
    for start, _, logits in forward_in_chunks(net, data.images[idx]):
        pred, _ = predict_from_logits(logits)
        cm = cm.merge(ConfusionMatrix(net.num_classes).accumulate(pred, data.labels[idx][start:start + len(pred)]))
    return iou(cm)


def evaluate(checkpoint: str | os.PathLike, dataset: str | os.PathLike, split: str) -> IoUResult:
    net, _, _ = load_run(checkpoint)
    return evaluate_net(net, load_split(dataset, split, require_labels=True))


def _source_batch(data: SplitData, cfg: RunConfig, rng: np.random.Generator, size: int, crop: int | None):
    idx = rng.integers(0, len(data), size=size)
    images, labels = [], []
    for i in idx:
        img, lab = data.images[i], (data.labels[i] if data.labels is not None else None)
        if crop is not None and crop < img.shape[0]:
            img, lab = random_crop(img, lab, crop, rng)
        if cfg.augment:
            dummy = lab if lab is not None else np.zeros(img.shape[:2], dtype=np.uint8)
            img, aug_lab = augment(img, dummy, rng)
            lab = aug_lab if lab is not None else None
        images.append(img)
        labels.append(lab)
    return np.stack(images), (None if labels[0] is None else np.stack(labels))


def _update_bank_stats(feats: Tensor, labels: np.ndarray, bank: PrototypeBank, cfg: RunConfig) -> None:
    """Track prototypes from ground-truth source features without adding a loss."""
    flab = histogram_downsample(labels, cfg.downsample, cfg.num_classes)
    bcf = gather_class_features(Tensor(feats.data), flab, "source", cfg.num_classes)
    ema_update(bank, {c: bcf.class_vectors(c).mean(axis=0) for c in bcf.present_classes()})
    norms = np.linalg.norm(bcf.rows.data, axis=-1)
    bank.mean_norm, bank.mean_norm_valid = float(norms.mean()), True


# ---------------------------------------------------------------------------
# supervised training (source pretraining and target oracle)


def train_supervised(cfg: RunConfig, out: str | os.PathLike, train_split: str, val_split: str,
                     kind: str) -> Path:
    out = Path(out)
    train = load_split(cfg.dataset, train_split, require_labels=True)
    val = load_split(cfg.dataset, val_split, require_labels=True)
    rng = np.random.default_rng([cfg.seed, 1])
    net = SegNet(cfg.num_classes, cfg.channels, seed=cfg.seed)
    bank = PrototypeBank(cfg.num_classes, cfg.channels, cfg.eta, cfg.zero_init_prototypes)
    opt = OptimizerState(cfg.base_lr, cfg.momentum, cfg.weight_decay, cfg.power, 0, max(cfg.pretrain_steps, 1))
    tlog = TrainingLog()
    history: list[dict] = []
    best = (-1.0, _snapshot(net, bank), 0)
    for step in range(cfg.pretrain_steps):
        images, labels = _source_batch(train, cfg, rng, cfg.batch_size, cfg.crop)
        feats, logits = net(images)
        ce = cross_entropy(logits, labels)
        backpropagate(ComputeGraph.trace(ce))
        lr = sgd_step(net.params, opt)
        _update_bank_stats(feats, labels, bank, cfg)
        tlog.append(step, lr, total_loss({"ce": ce}, cfg.weights))
        if (step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.pretrain_steps:
            score = evaluate_net(net, val).miou
            history.append({"step": step + 1, "miou": score})
            log.info("%s step %d: %s mIoU %.4f", kind, step + 1, val_split, score)
            if score > best[0]:
                best = (score, _snapshot(net, bank), step + 1)
    state, best_bank = best[1]
    net.load_state_dict(state)
    return _write_run(out, net, best_bank, cfg, kind, best[2], rng, history, tlog)


def pretrain_source(cfg: RunConfig, out: str | os.PathLike) -> Path:
    return train_supervised(cfg, out, "source-train", "source-val", "source-only")


def train_target_supervised(cfg: RunConfig, out: str | os.PathLike) -> Path:
    """Oracle run: same recipe on the labeled target-val split."""
    return train_supervised(cfg, out, "target-val", "target-val", "target-oracle")


# ---------------------------------------------------------------------------
# adaptation


@dataclass
class AdaptState:
    net: SegNet
    bank: PrototypeBank
    tracker: NormTracker
    opt: OptimizerState
    cfg: RunConfig


def adapt_losses(state: AdaptState, src_images: np.ndarray, src_labels: np.ndarray,
                 tgt_images: np.ndarray) -> tuple[dict[str, Tensor], dict[str, Any]]:
    """Forward both domains and build every loss term for one step.

    Mutates the prototype bank (EMA update from the source centroids).
    """
    cfg, net = state.cfg, state.net
    ds = cfg.downsample
    feats_s, logits_s = net(src_images)
    feats_t, logits_t = net(tgt_images)

    parts: dict[str, Tensor] = {"ce": cross_entropy(logits_s, src_labels)}
    info: dict[str, Any] = {}

    lab_s = histogram_downsample(src_labels, ds, cfg.num_classes)
    pred_t, peak_t = predict_from_logits(logits_t.data)
    lab_t = pseudo_labels(pred_t, peak_t, ds, cfg.num_classes)
    bcf_s = gather_class_features(feats_s, lab_s, "source", cfg.num_classes)
    bcf_t = gather_class_features(feats_t, lab_t, "target", cfg.num_classes)

    centroids = batch_centroids(bcf_s)
    parts["perp"], info["perp_skipped"] = perpendicularity_loss(centroids)
    ema_update(state.bank, centroids)
    parts["clustering_s"], _ = clustering_loss(bcf_s, state.bank)
    parts["clustering_t"], _ = clustering_loss(bcf_t, state.bank)
    if state.tracker.valid:
        parts["norm_s"] = norm_loss_source(bcf_s, state.tracker)
        parts["norm_t"] = norm_loss_target(bcf_t, state.tracker)
    parts["em"] = max_square_entropy(ad.softmax(logits_t))
    info["bcf_s"] = bcf_s
    info["pseudo_labeled"] = int(np.count_nonzero(lab_t != 255))
    return parts, info


def adapt_step(state: AdaptState, src_images, src_labels, tgt_images) -> tuple[float, LossReport]:
    parts, info = adapt_losses(state, src_images, src_labels, tgt_images)
    total = weighted_total(parts, state.cfg.weights)
    for p in state.net.parameters():
        p.grad = None
    backpropagate(ComputeGraph.trace(total))
    lr = sgd_step(state.net.params, state.opt)
    update_mean_norm(info["bcf_s"], state.tracker)
    state.bank.mean_norm, state.bank.mean_norm_valid = state.tracker.mean_norm, True
    return lr, total_loss(parts, state.cfg.weights)


def adapt(cfg: RunConfig, source_checkpoint: str | os.PathLike, out: str | os.PathLike) -> Path:
    out = Path(out)
    net, bank, manifest = load_run(source_checkpoint)
    if net.num_classes != cfg.num_classes or net.channels != cfg.channels:
        raise ValueError("checkpoint architecture does not match the configuration")
    bank.eta = cfg.eta
    bank.zero_init = cfg.zero_init_prototypes
    src = load_split(cfg.dataset, "source-train", require_labels=True)
    tgt = load_split(cfg.dataset, "target-train")
    val = load_split(cfg.dataset, "target-val", require_labels=True)
    rng = np.random.default_rng([cfg.seed, 2])
    max_steps = cfg.max_steps or max(cfg.steps, 1)
    opt = OptimizerState(cfg.adapt_lr, cfg.momentum, cfg.weight_decay, cfg.power, 0, max_steps)
    state = AdaptState(net, bank, NormTracker(delta=cfg.delta_f), opt, cfg)
    tlog = TrainingLog()
    history: list[dict] = []
    best_score = evaluate_net(net, val).miou
    history.append({"step": 0, "miou": best_score})
    best = (_snapshot(net, bank), 0)
    stale = 0
    for step in range(cfg.steps):
        xs, ys = _source_batch(src, cfg, rng, 1, None)
        xt, _ = _source_batch(tgt, cfg, rng, 1, None)
        lr, report = adapt_step(state, xs, ys, xt)
        tlog.append(step, lr, report)
        if (step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.steps:
            score = evaluate_net(net, val).miou
            history.append({"step": step + 1, "miou": score})
            log.info("adapt step %d: target-val mIoU %.4f", step + 1, score)
            if score > best_score:
                best_score, best, stale = score, (_snapshot(net, bank), step + 1), 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("early stop at step %d", step + 1)
                    break
    (params, best_bank), best_step = best
    net.load_state_dict(params)
    return _write_run(out, net, best_bank, cfg, "adapted", best_step, rng, history, tlog)


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class FeatureDiagnostics:
    norms: Any
    angles: np.ndarray
    mean_angle: float
    angle_classes: list[int]
    projection: Any
    sample_labels: np.ndarray
    sample_norms: np.ndarray
    resampled: list[int]
    mean_norm: float


def split_features(net: SegNet, data: SplitData, cfg: DownsampleConfig = DownsampleConfig()):
    """All feature vectors of a split with their feature-level labels (void where unknown)."""
    feats = []
    for _, f, _ in forward_in_chunks(net, data.images):
        feats.append(f)
    feats = np.concatenate(feats)
    if data.labels is not None:
        labels = histogram_downsample(data.labels, cfg, net.num_classes)
    else:
        labels = np.full(feats.shape[:3], 255, dtype=np.uint8)
    return feats.reshape(-1, feats.shape[-1]), labels.reshape(-1)


def mean_feature_norm(net: SegNet, data: SplitData) -> float:
    feats, _ = split_features(net, data)
    return float(np.linalg.norm(feats, axis=-1).mean())


def balanced_sample(labels: np.ndarray, per_class: int, num_classes: int, rng: np.random.Generator):
    chosen, resampled = [], []
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        replace_ = idx.size < per_class
        if replace_:
            resampled.append(c)
        chosen.append(rng.choice(idx, size=per_class, replace=replace_))
    return np.concatenate(chosen), resampled


def diagnose_net(net: SegNet, bank: PrototypeBank, data: SplitData, per_class: int = 350,
                 seed: int = 0) -> FeatureDiagnostics:
    feats, labels = split_features(net, data)
    rng = np.random.default_rng(seed)
    idx, resampled = balanced_sample(labels, per_class, net.num_classes, rng)
    sample, sample_labels = feats[idx], labels[idx]
    stats = norm_stats(sample, sample_labels)
    angles, mean_angle, kept = prototype_angles(bank.prototypes, bank.initialized)
    norms = np.linalg.norm(sample, axis=-1)
    unit = sample / np.where(norms > 0, norms, 1.0)[:, None]
    return FeatureDiagnostics(stats, angles, mean_angle, kept, pca_project(unit), sample_labels, norms,
                              resampled, float(np.linalg.norm(feats, axis=-1).mean()))


def diagnose(checkpoint: str | os.PathLike, dataset: str | os.PathLike, split: str, out: str | os.PathLike,
             per_class: int = 350, seed: int = 0) -> FeatureDiagnostics:
    from .plotting import write_diagnostics

    net, bank, _ = load_run(checkpoint)
    diag = diagnose_net(net, bank, load_split(dataset, split, require_labels=True), per_class, seed)
    write_diagnostics(diag, Path(out), CLASS_NAMES[: net.num_classes])
    return diag
