import json

import numpy as np
import pytest

from lsrseg.formats import VOID
from lsrseg.synthdata import (
    CLASS_NAMES,
    DEFAULT_SIZES,
    SOURCE_PALETTE,
    TARGET_PALETTE,
    AugmentParams,
    DomainPalette,
    SceneSpec,
    apply_augment,
    augment,
    build_splits,
    draw_augment_params,
    generate_sample,
    load_split,
    random_crop,
    sample_rng,
)


def test_generation_is_deterministic():
    a = generate_sample(SceneSpec(), SOURCE_PALETTE, sample_rng(3, "source-train", 7))
    b = generate_sample(SceneSpec(), SOURCE_PALETTE, sample_rng(3, "source-train", 7))
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_image_range_and_dense_labels():
    img, lab = generate_sample(SceneSpec(), TARGET_PALETTE, sample_rng(0, "target-val", 0))
    assert img.shape == (64, 64, 3) and lab.shape == (64, 64)
    assert img.min() >= 0.0 and img.max() <= 1.0
    assert (lab != VOID).all() and lab.max() < 5


def test_background_only_spec():
    spec = SceneSpec(class_names=("background",))
    _, lab = generate_sample(spec, SOURCE_PALETTE, np.random.default_rng(0))
    assert (lab == 0).all()


def test_class_frequency_census():
    spec = SceneSpec()
    counts = np.zeros(spec.num_classes)
    for i in range(100):
        _, lab = generate_sample(spec, SOURCE_PALETTE, sample_rng(0, "source-train", i))
        counts += np.bincount(lab.ravel(), minlength=spec.num_classes)
    freq = counts / counts.sum()
    for c, (lo, hi) in enumerate(spec.frequency_bands):
        assert lo <= freq[c] <= hi, (CLASS_NAMES[c], freq[c])


def test_domains_share_geometry():
    # same rng stream -> same label map, different pixels
    s_img, s_lab = generate_sample(SceneSpec(), SOURCE_PALETTE, np.random.default_rng(5))
    t_img, t_lab = generate_sample(SceneSpec(), TARGET_PALETTE, np.random.default_rng(5))
    np.testing.assert_array_equal(s_lab, t_lab)
    assert not np.array_equal(s_img, t_img)


def test_palette_validation():
    with pytest.raises(ValueError):
        DomainPalette(colors=((1.2, 0.0, 0.0),))


def test_identity_augmentation():
    rng = np.random.default_rng(0)
    img, lab = rng.random((8, 8, 3)), rng.integers(0, 5, (8, 8))
    out, out_lab = apply_augment(img, lab, AugmentParams())
    np.testing.assert_array_equal(out, img)
    np.testing.assert_array_equal(out_lab, lab)


def test_flip_moves_image_and_labels_together():
    rng = np.random.default_rng(1)
    img, lab = rng.random((8, 8, 3)), rng.integers(0, 5, (8, 8))
    out, out_lab = apply_augment(img, lab, AugmentParams(flip=True))
    np.testing.assert_array_equal(out, img[:, ::-1])
    np.testing.assert_array_equal(out_lab, lab[:, ::-1])


def test_extreme_offsets_are_clamped():
    img = np.random.default_rng(2).random((8, 8, 3))
    for sign in (-1, 1):
        bound = sign * 75 / 255
        jit = sign * 25 / 255
        out, _ = apply_augment(img, np.zeros((8, 8)), AugmentParams(offset=(bound,) * 3, jitter=(jit,) * 3,
                                                                   blur_sigma=1.0))
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_augment_parameter_ranges():
    rng = np.random.default_rng(3)
    draws = [draw_augment_params(rng) for _ in range(2000)]
    assert 0.4 < np.mean([d.flip for d in draws]) < 0.6
    assert 0.4 < np.mean([d.blur_sigma is not None for d in draws]) < 0.6
    offsets = np.array([d.offset for d in draws])
    assert np.abs(offsets).max() <= 75 / 255 and np.abs(offsets).max() > 0.9 * 75 / 255
    jit = np.array([d.jitter for d in draws])
    assert np.abs(jit).max() <= 25 / 255
    sigmas = [d.blur_sigma for d in draws if d.blur_sigma is not None]
    assert min(sigmas) >= 0.1 and max(sigmas) <= 1.0
    img, lab = augment(np.full((8, 8, 3), 0.5), np.zeros((8, 8), np.uint8), rng)
    assert img.shape == (8, 8, 3) and lab.shape == (8, 8)


def test_random_crop():
    rng = np.random.default_rng(4)
    img, lab = rng.random((16, 16, 3)), np.arange(256).reshape(16, 16)
    crop, crop_lab = random_crop(img, lab, 8, rng)
    assert crop.shape == (8, 8, 3)
    y, x = divmod(int(crop_lab[0, 0]), 16)
    np.testing.assert_array_equal(crop, img[y:y + 8, x:x + 8])
    with pytest.raises(ValueError):
        random_crop(img, lab, 32, rng)


def test_build_splits(tmp_path):
    sizes = {"source-train": 3, "source-val": 2, "target-train": 2, "target-val": 2, "target-test": 1}
    manifests = build_splits(tmp_path / "a", seed=4, sizes=sizes)
    assert {k: m.count for k, m in manifests.items()} == sizes
    assert all("label" not in f for f in manifests["target-train"].files)
    assert manifests["target-val"].labeled
    tt = load_split(tmp_path / "a", "target-train")
    assert tt.labels is None and len(tt) == 2
    with pytest.raises(ValueError):
        load_split(tmp_path / "a", "target-train", require_labels=True)
    with pytest.raises(FileNotFoundError):
        load_split(tmp_path / "missing", "source-val")
    build_splits(tmp_path / "b", seed=4, sizes=sizes)
    for split in sizes:
        for sub in ("images", "labels"):
            da, db = tmp_path / "a" / split / sub, tmp_path / "b" / split / sub
            if da.exists():
                for f in da.iterdir():
                    assert f.read_bytes() == (db / f.name).read_bytes()
        ma = json.loads((tmp_path / "a" / split / "manifest.json").read_text())
        mb = json.loads((tmp_path / "b" / split / "manifest.json").read_text())
        assert ma == mb


def test_split_samples_are_distinct(tiny_dataset):
    a = load_split(tiny_dataset, "source-train").images
    b = load_split(tiny_dataset, "source-val").images
    assert not any(np.array_equal(x, y) for x in a for y in b)


def test_default_sizes():
    assert DEFAULT_SIZES == {"source-train": 400, "source-val": 50, "target-train": 400,
                             "target-val": 50, "target-test": 100}


def test_disk_images_match_generator(tiny_dataset):
    val = load_split(tiny_dataset, "target-val")
    img, lab = generate_sample(SceneSpec(), TARGET_PALETTE, sample_rng(11, "target-val", 3))
    assert val.images[3].tobytes() == img.tobytes()
    np.testing.assert_array_equal(val.labels[3], lab)
