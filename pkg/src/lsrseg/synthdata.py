"""Synthetic two-domain "shapes world" segmentation data.

Source and target scenes are drawn from the same geometry distribution and
differ only through their :class:`DomainPalette`.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .formats import read_labels, read_tensor, write_labels, write_tensor

CLASS_NAMES = ("background", "stripe", "disk", "box", "cross")
SPLITS = ("source-train", "source-val", "target-train", "target-val", "target-test")
DEFAULT_SIZES = {"source-train": 400, "source-val": 50, "target-train": 400, "target-val": 50, "target-test": 100}
_SPLIT_DOMAIN = {s: s.split("-")[0] for s in SPLITS}
_SPLIT_LABELED = {s: s != "target-train" for s in SPLITS}


@dataclass(frozen=True)
class SceneSpec:
    size: int = 64
    class_names: tuple[str, ...] = CLASS_NAMES
    shape_count: tuple[int, int] = (2, 4)
    # census bands [lo, hi] of per-class pixel frequency over a dataset
    frequency_bands: tuple[tuple[float, float], ...] = (
        (0.65, 0.85), (0.02, 0.07), (0.03, 0.12), (0.03, 0.11), (0.03, 0.12),
    )

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True)
class DomainPalette:
    colors: tuple[tuple[float, float, float], ...]
    brightness: float = 0.0
    noise: float = 0.05
    hue_rotation: float = 0.0  # degrees about the grey axis
    contrast: float = 1.0  # 1 keeps colors, 0 collapses them onto their mean grey

    def __post_init__(self):
        if any(not 0.0 <= v <= 1.0 for rgb in self.colors for v in rgb):
            raise ValueError("palette colors must lie in [0, 1]")


SOURCE_PALETTE = DomainPalette(
    colors=((0.45, 0.50, 0.45), (0.90, 0.85, 0.25), (0.85, 0.25, 0.20), (0.20, 0.30, 0.85), (0.25, 0.80, 0.35)),
    brightness=0.0, noise=0.04, hue_rotation=0.0,
)
TARGET_PALETTE = DomainPalette(
    colors=SOURCE_PALETTE.colors,
    brightness=-0.05, noise=0.10, hue_rotation=10.0, contrast=0.75,
)


def _hue_matrix(degrees: float) -> np.ndarray:
    """Rotation of RGB vectors about the (1,1,1) axis."""
    t = np.deg2rad(degrees)
    axis = np.ones(3) / np.sqrt(3.0)
    cross = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.cos(t) * np.eye(3) + np.sin(t) * cross + (1 - np.cos(t)) * np.outer(axis, axis)


def _paint_geometry(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.size
    labels = np.zeros((n, n), dtype=np.uint8)
    yy, xx = np.mgrid[0:n, 0:n]
    count = rng.integers(spec.shape_count[0], spec.shape_count[1] + 1)
    if spec.num_classes == 1:
        return labels
    for _ in range(count):
        cls = int(rng.integers(1, spec.num_classes))
        cy, cx = rng.uniform(0, n, size=2)
        if cls == 1:  # thin stripe
            angle = rng.uniform(0, np.pi)
            half_len = rng.uniform(16, 32)
            width = rng.uniform(2.5, 4.0)
            dy, dx = yy - cy, xx - cx
            along = dx * np.cos(angle) + dy * np.sin(angle)
            across = -dx * np.sin(angle) + dy * np.cos(angle)
            mask = (np.abs(along) <= half_len) & (np.abs(across) <= width)
        elif cls == 2:  # disk
            r = rng.uniform(9, 16)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        elif cls == 3:  # box
            hh, hw = rng.uniform(7, 14, size=2)
            mask = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
        else:  # cross
            arm = rng.uniform(12, 20)
            thick = rng.uniform(3.5, 5.5)
            dy, dx = np.abs(yy - cy), np.abs(xx - cx)
            mask = ((dy <= thick) & (dx <= arm)) | ((dx <= thick) & (dy <= arm))
        labels[mask] = cls
    return labels


def render(labels: np.ndarray, palette: DomainPalette, rng: np.random.Generator) -> np.ndarray:
    colors = np.asarray(palette.colors)
    grey = colors.mean()
    colors = grey + palette.contrast * (colors - grey)
    image = colors[labels] + palette.brightness
    image = image + rng.normal(0.0, palette.noise, size=image.shape)
    if palette.hue_rotation:
        image = image @ _hue_matrix(palette.hue_rotation).T
    return np.clip(image, 0.0, 1.0).astype(np.float32).astype(np.float64)


def generate_sample(spec: SceneSpec, palette: DomainPalette, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One (H, W, 3) image in [0, 1] and its dense (H, W) label map.

    Images are rounded to float32 so that what is written to disk and what is
    generated in memory are identical.
    """
    labels = _paint_geometry(spec, rng)
    return render(labels, palette, rng), labels


def sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLITS.index(split), index])


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    jitter: tuple[float, float, float] = (0.0, 0.0, 0.0)
    blur_sigma: float | None = None


WHITE_POINT = 75.0 / 255.0
JITTER = 25.0 / 255.0


def draw_augment_params(rng: np.random.Generator) -> AugmentParams:
    flip = bool(rng.random() < 0.5)
    offset = tuple(rng.uniform(-WHITE_POINT, WHITE_POINT, 3))
    jitter = tuple(rng.uniform(-JITTER, JITTER, 3))
    blur = float(rng.uniform(0.1, 1.0)) if rng.random() < 0.5 else None
    return AugmentParams(flip, offset, jitter, blur)


def apply_augment(image: np.ndarray, labels: np.ndarray, params: AugmentParams) -> tuple[np.ndarray, np.ndarray]:
    img = np.asarray(image, dtype=np.float64)
    lab = np.asarray(labels)
    if params.flip:
        img = img[:, ::-1]
        lab = lab[:, ::-1]
    img = img + np.asarray(params.offset) + np.asarray(params.jitter)
    if params.blur_sigma is not None:
        img = gaussian_filter(img, sigma=(params.blur_sigma, params.blur_sigma, 0.0), mode="nearest")
    return np.clip(img, 0.0, 1.0), np.ascontiguousarray(lab)


def augment(image: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    return apply_augment(image, labels, draw_augment_params(rng))


def random_crop(image: np.ndarray, labels: np.ndarray | None, size: int, rng: np.random.Generator):
    h, w = image.shape[:2]
    if size > h or size > w:
        raise ValueError(f"crop {size} larger than image {h}x{w}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    crop = image[y:y + size, x:x + size]
    return crop, (None if labels is None else labels[y:y + size, x:x + size])


# ---------------------------------------------------------------------------
# dataset on disk


@dataclass
class DatasetManifest:
    split: str
    count: int
    domain: str
    seed: int
    files: list[dict] = field(default_factory=list)

    @property
    def labeled(self) -> bool:
        return all(f.get("label") for f in self.files) and bool(self.files)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | os.PathLike) -> DatasetManifest:
        return cls(**json.loads(Path(path).read_text()))


def build_splits(root: str | os.PathLike, spec: SceneSpec = SceneSpec(),
                 palettes: dict[str, DomainPalette] | None = None, seed: int = 0,
                 sizes: dict[str, int] | None = None) -> dict[str, DatasetManifest]:
    """Write every split to ``root/<split>/{images,labels}`` plus a manifest each."""
    palettes = palettes or {"source": SOURCE_PALETTE, "target": TARGET_PALETTE}
    sizes = {**DEFAULT_SIZES, **(sizes or {})}
    root = Path(root)
    manifests = {}
    for split in SPLITS:
        domain = _SPLIT_DOMAIN[split]
        base = root / split
        (base / "images").mkdir(parents=True, exist_ok=True)
        if _SPLIT_LABELED[split]:
            (base / "labels").mkdir(parents=True, exist_ok=True)
        manifest = DatasetManifest(split, sizes[split], domain, seed)
        for i in range(sizes[split]):
            image, labels = generate_sample(spec, palettes[domain], sample_rng(seed, split, i))
            entry = {"image": f"images/{i:05d}.lsrt"}
            write_tensor(base / entry["image"], image.astype(np.float32))
            if _SPLIT_LABELED[split]:
                entry["label"] = f"labels/{i:05d}.lsrl"
                write_labels(base / entry["label"], labels)
            manifest.files.append(entry)
        (base / "manifest.json").write_text(manifest.to_json())
        manifests[split] = manifest
    return manifests


@dataclass
class SplitData:
    manifest: DatasetManifest
    images: np.ndarray
    labels: np.ndarray | None

    def __len__(self) -> int:
        return len(self.images)


def load_split(root: str | os.PathLike, split: str, require_labels: bool = False) -> SplitData:
    base = Path(root) / split
    path = base / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"split {split!r} not found under {root}")
    manifest = DatasetManifest.load(path)
    images = np.stack([read_tensor(base / f["image"]).astype(np.float64) for f in manifest.files])
    labels = None
    if manifest.labeled:
        labels = np.stack([read_labels(base / f["label"]) for f in manifest.files])
    elif require_labels:
        raise ValueError(f"split {split!r} has no labels")
    return SplitData(manifest, images, labels)
