"""Toy encoder-decoder segmentation network and its SGD optimizer."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .formats import read_tensor, write_tensor

REDUCTION = 8
ENCODER_WIDTHS = (16, 32)


class SegNet:
    """Three stride-2 conv+relu stages, then a 1x1 conv classifier and x8 upsample.

    ``features`` is the encoder E, ``logits`` the decoder D.
    """

    def __init__(self, num_classes: int = 5, channels: int = 32, seed: int = 0):
        self.num_classes = num_classes
        self.channels = channels
        rng = np.random.default_rng(seed)
        widths = (3,) + ENCODER_WIDTHS + (channels,)
        self.params: dict[str, Tensor] = {}
        for i in range(3):
            cin, cout = widths[i], widths[i + 1]
            std = np.sqrt(2.0 / (9 * cin))
            self.params[f"enc{i + 1}.weight"] = Tensor(rng.normal(0.0, std, (3, 3, cin, cout)), requires_grad=True)
            self.params[f"enc{i + 1}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
        std = np.sqrt(2.0 / channels)
        self.params["dec.weight"] = Tensor(rng.normal(0.0, std, (1, 1, channels, num_classes)), requires_grad=True)
        self.params["dec.bias"] = Tensor(np.zeros(num_classes), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def features(self, images: np.ndarray | Tensor) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(_batched(images))
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ValueError(f"expected (N,H,W,3) images, got {x.shape}")
        if x.shape[1] % REDUCTION or x.shape[2] % REDUCTION:
            raise ValueError(f"image size {x.shape[1:3]} not divisible by {REDUCTION}")
        p = self.params
        for i in (1, 2, 3):
            x = ad.relu(ad.add(ad.conv2d(x, p[f"enc{i}.weight"], stride=2, padding=1), p[f"enc{i}.bias"]))
        return x

    def logits(self, features: Tensor) -> Tensor:
        if features.ndim != 4 or features.shape[-1] != self.channels:
            raise ValueError(f"expected (N,H',W',{self.channels}) features, got {features.shape}")
        p = self.params
        scores = ad.add(ad.conv2d(features, p["dec.weight"]), p["dec.bias"])
        return ad.upsample(scores, REDUCTION)

    def __call__(self, images) -> tuple[Tensor, Tensor]:
        feats = self.features(images)
        return feats, self.logits(feats)

    def predict(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Label map and peak-probability map for each image."""
        _, logits = self(images)
        return predict_from_logits(logits.data)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            if k not in state:
                raise KeyError(f"missing parameter {k}")
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != v.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {v.shape}")
            v.data = arr.copy()


def _batched(images: np.ndarray) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    return arr[None] if arr.ndim == 3 else arr


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def predict_from_logits(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    probs = softmax_np(logits)
    # argmax returns the first maximum, so ties go to the lowest class id
    return probs.argmax(axis=-1).astype(np.uint8), probs.max(axis=-1)


@dataclass
class OptimizerState:
    base_lr: float = 2.5e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    power: float = 0.9
    step: int = 0
    max_steps: int = 250_000
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def lr(self, step: int | None = None) -> float:
        s = self.step if step is None else step
        return self.base_lr * (1.0 - s / self.max_steps) ** self.power


def sgd_step(params: dict[str, Tensor], state: OptimizerState, grads: dict[str, np.ndarray] | None = None) -> float:
    """One momentum-SGD update with polynomial LR decay.  Returns the LR used.

    Gradients default to each parameter's ``.grad``.
    """
    if state.step >= state.max_steps:
        raise RuntimeError(f"optimizer step {state.step} reached max_steps {state.max_steps}")
    lr = state.lr()
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        v = state.buffers.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + g + state.weight_decay * p.data
        state.buffers[name] = v
        p.data = p.data - lr * v
    state.step += 1
    return lr


def save_checkpoint(path: str | os.PathLike, net: SegNet, extra: dict[str, Any] | None = None,
                    tensors: dict[str, np.ndarray] | None = None) -> Path:
    """Directory of LSRT files plus ``manifest.json``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    layers = {}
    for name, arr in net.state_dict().items():
        write_tensor(root / f"{name}.lsrt", arr)
        layers[name] = list(arr.shape)
    extra_files = {}
    for name, arr in (tensors or {}).items():
        write_tensor(root / f"{name}.lsrt", arr)
        extra_files[name] = list(arr.shape)
    manifest = {
        "num_classes": net.num_classes,
        "channels": net.channels,
        "layers": layers,
        "tensors": extra_files,
        **(extra or {}),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_checkpoint(path: str | os.PathLike) -> tuple[SegNet, dict[str, Any], dict[str, np.ndarray]]:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    net = SegNet(manifest["num_classes"], manifest["channels"])
    state = {}
    for name, shape in manifest["layers"].items():
        arr = read_tensor(root / f"{name}.lsrt")
        if list(arr.shape) != shape:
            raise ValueError(f"{name}: file shape {arr.shape} disagrees with manifest {shape}")
        state[name] = arr
    net.load_state_dict(state)
    tensors = {name: read_tensor(root / f"{name}.lsrt") for name in manifest.get("tensors", {})}
    return net, manifest, tensors
