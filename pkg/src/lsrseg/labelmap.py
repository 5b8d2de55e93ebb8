"""Label decimation to feature resolution and pseudo-label confidence masking."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .formats import VOID


@dataclass(frozen=True)
class DownsampleConfig:
    window: int = 8
    t_h: float = 0.5
    t_p: float = 0.5

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0.0 < self.t_h <= 1.0:
            raise ValueError("t_h must lie in (0, 1]")
        if not 0.0 <= self.t_p <= 1.0:
            raise ValueError("t_p must lie in [0, 1]")


def _windows(arr: np.ndarray, window: int) -> np.ndarray:
    """(..., H, W) -> (..., H', W', window*window)."""
    *lead, h, w = arr.shape
    if h % window or w % window:
        raise ValueError(f"map of size {h}x{w} is not divisible by window {window}")
    blocks = arr.reshape(*lead, h // window, window, w // window, window)
    blocks = np.moveaxis(blocks, -3, -2)
    return blocks.reshape(*lead, h // window, w // window, window * window)


def histogram_downsample(labels: np.ndarray, cfg: DownsampleConfig = DownsampleConfig(),
                         num_classes: int | None = None) -> np.ndarray:
    """Assign each window its dominant label, or VOID when no label dominates.

    A window takes its most frequent non-void label only when every other
    label occurs fewer than ``t_h`` times as often.  Works on a single map or a
    batch of maps (leading axes are kept).
    """
    lab = np.asarray(labels)
    if lab.ndim < 2:
        raise ValueError("labels must be at least 2-D")
    win = _windows(lab, cfg.window)
    valid = win != VOID
    top_id = int(win[valid].max()) if valid.any() else -1
    if num_classes is None:
        num_classes = max(top_id + 1, 1)
    elif top_id >= num_classes:
        raise ValueError(f"label {top_id} outside [0, {num_classes})")
    counts = np.zeros(win.shape[:-1] + (num_classes,), dtype=np.int64)
    for c in range(num_classes):
        counts[..., c] = np.count_nonzero(win == c, axis=-1)
    top = counts.argmax(axis=-1)
    if num_classes > 1:
        ordered = np.sort(counts, axis=-1)
        m, s = ordered[..., -1], ordered[..., -2]
    else:
        m, s = counts[..., 0], np.zeros_like(counts[..., 0])
    keep = (m > 0) & (s < cfg.t_h * m)
    return np.where(keep, top, VOID).astype(np.uint8)


def nearest_downsample(labels: np.ndarray, window: int = 8) -> np.ndarray:
    """Plain decimation: the top-left pixel of each window."""
    lab = np.asarray(labels)
    if lab.shape[-1] % window or lab.shape[-2] % window:
        raise ValueError("map not divisible by window")
    return lab[..., ::window, ::window].copy()


def window_confidence(peak_probs: np.ndarray, cfg: DownsampleConfig = DownsampleConfig()) -> np.ndarray:
    """Average-pool the peak-probability map over each window.

    Window sums are correctly rounded (``math.fsum``), so the result does not
    depend on summation order and a constant map pools to exactly itself.
    """
    win = _windows(np.asarray(peak_probs, dtype=np.float64), cfg.window)
    sums = np.array([math.fsum(w) for w in win.reshape(-1, win.shape[-1])]).reshape(win.shape[:-1])
    return sums / win.shape[-1]


def mask_pseudolabels(pl: np.ndarray, conf: np.ndarray, cfg: DownsampleConfig = DownsampleConfig()) -> np.ndarray:
    if np.shape(pl) != np.shape(conf):
        raise ValueError(f"pseudo-label shape {np.shape(pl)} != confidence shape {np.shape(conf)}")
    return np.where(np.asarray(conf) > cfg.t_p, pl, VOID).astype(np.uint8)


def pseudo_labels(label_map: np.ndarray, peak_probs: np.ndarray, cfg: DownsampleConfig = DownsampleConfig(),
                  num_classes: int | None = None) -> np.ndarray:
    """Full target pipeline: decimate predicted labels, then drop low-confidence windows."""
    pl = histogram_downsample(label_map, cfg, num_classes)
    return mask_pseudolabels(pl, window_confidence(peak_probs, cfg), cfg)
