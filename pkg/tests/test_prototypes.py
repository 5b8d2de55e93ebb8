import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsrseg.autodiff import Tensor
from lsrseg.formats import VOID
from lsrseg.prototypes import PrototypeBank, batch_centroids, ema_update, gather_class_features


def _features(rng, n=2, h=3, w=4, k=6):
    return Tensor(np.abs(rng.normal(size=(n, h, w, k))))


def test_uniform_and_void_maps():
    rng = np.random.default_rng(0)
    f = _features(rng)
    bcf = gather_class_features(f, np.full((2, 3, 4), 2))
    assert bcf.present_classes() == [2] and bcf.count(2) == 24
    bcf = gather_class_features(f, np.full((2, 3, 4), VOID))
    assert bcf.present_classes() == [] and bcf.void_indices().size == 24


def test_partition_matches_per_cell_oracle():
    rng = np.random.default_rng(1)
    f = _features(rng)
    labels = rng.choice([0, 1, 2, 3, 4, VOID], size=(2, 3, 4))
    bcf = gather_class_features(f, labels)
    expected = {c: [] for c in [0, 1, 2, 3, 4, VOID]}
    for n in range(2):
        for i in range(3):
            for j in range(4):
                expected[int(labels[n, i, j])].append(f.data[n, i, j])
    total = 0
    for c, vecs in expected.items():
        got = bcf.class_vectors(c) if c != VOID else bcf.rows.data[bcf.void_indices()]
        np.testing.assert_array_equal(got, np.array(vecs).reshape(-1, 6))
        total += len(vecs)
    assert total == bcf.size == 24


def test_gather_errors():
    f = Tensor(np.zeros((1, 2, 2, 3)))
    with pytest.raises(ValueError):
        gather_class_features(f, np.zeros((1, 2, 3)))
    with pytest.raises(ValueError):
        gather_class_features(f, np.full((1, 2, 2), 7))


def test_centroid_examples():
    f = Tensor(np.array([[[[1.0, 0.0], [0.0, 1.0]]]]))
    bcf = gather_class_features(f, np.array([[[1, 1]]]))
    assert batch_centroids(bcf)[1].data.tolist() == [0.5, 0.5]
    bcf = gather_class_features(f, np.array([[[1, 0]]]))
    cents = batch_centroids(bcf)
    assert cents[1].data.tolist() == [1.0, 0.0] and cents[0].data.tolist() == [0.0, 1.0]
    assert 2 not in cents


def test_centroids_match_summation_oracle():
    rng = np.random.default_rng(2)
    f = _features(rng, n=3, h=4, w=4)
    labels = rng.choice([0, 1, 2, VOID], size=(3, 4, 4))
    cents = batch_centroids(gather_class_features(f, labels))
    for c, p in cents.items():
        rows = f.data[labels == c]
        acc = np.zeros(6)
        for r in rows:
            acc += r
        np.testing.assert_allclose(p.data, acc / len(rows), rtol=0, atol=1e-12)


def test_absent_class_bitwise_unchanged():
    rng = np.random.default_rng(3)
    bank = PrototypeBank(3, 4)
    ema_update(bank, {0: rng.random(4), 1: rng.random(4), 2: rng.random(4)})
    before = bank.prototypes[2].tobytes()
    for _ in range(5):
        ema_update(bank, {0: rng.random(4), 1: rng.random(4)})
    assert bank.prototypes[2].tobytes() == before


def test_contraction_under_constant_stream():
    rng = np.random.default_rng(4)
    bank = PrototypeBank(1, 8, eta=0.8)
    ema_update(bank, {0: rng.random(8)})
    v = rng.random(8)
    prev = np.linalg.norm(bank.prototypes[0] - v)
    for _ in range(30):
        ema_update(bank, {0: v})
        cur = np.linalg.norm(bank.prototypes[0] - v)
        assert abs(cur - 0.8 * prev) <= 1e-12
        prev = cur


def test_first_update_bootstrap_and_zero_init():
    v = np.array([1.0, 2.0])
    bank = ema_update(PrototypeBank(1, 2), {0: v})
    np.testing.assert_array_equal(bank.prototypes[0], v)
    assert bank.initialized[0]
    literal = ema_update(PrototypeBank(1, 2, zero_init=True), {0: v})
    np.testing.assert_allclose(literal.prototypes[0], 0.2 * v)


def test_eta_zero_means_no_memory():
    bank = PrototypeBank(1, 2, eta=0.0)
    ema_update(bank, {0: np.array([5.0, 5.0])})
    ema_update(bank, {0: np.array([1.0, 3.0])})
    assert bank.prototypes[0].tolist() == [1.0, 3.0]


def test_eta_validation_and_json_roundtrip():
    with pytest.raises(ValueError):
        PrototypeBank(eta=1.5)
    bank = ema_update(PrototypeBank(2, 3), {1: np.ones(3)})
    bank.mean_norm, bank.mean_norm_valid = 1.25, True
    back = PrototypeBank.from_json(bank.to_json(), bank.prototypes)
    assert back.initialized.tolist() == [False, True]
    assert back.mean_norm == 1.25 and back.mean_norm_valid
    np.testing.assert_array_equal(back.prototypes, bank.prototypes)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_prototypes_stay_in_the_box(seed, eta):
    rng = np.random.default_rng(seed)
    bank = PrototypeBank(2, 3, eta=eta)
    for _ in range(10):
        present = {c: rng.uniform(0.5, 2.0, 3) for c in range(2) if rng.random() < 0.7}
        ema_update(bank, present)
    seen = bank.prototypes[bank.initialized]
    assert (seen >= 0.5 - 1e-12).all() and (seen <= 2.0 + 1e-12).all()
