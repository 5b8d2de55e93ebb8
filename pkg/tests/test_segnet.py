import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsrseg import autodiff as ad
from lsrseg.autodiff import Tensor, finite_difference_check
from lsrseg.formats import FormatError
from lsrseg.segnet import (
    OptimizerState,
    SegNet,
    load_checkpoint,
    predict_from_logits,
    save_checkpoint,
    sgd_step,
)


def test_feature_shape_and_zero_image():
    net = SegNet(seed=0)
    feats = net.features(np.zeros((64, 64, 3)))
    assert feats.shape == (1, 8, 8, 32)
    assert (feats.data == 0).all()


def test_logits_shape_and_constancy():
    net = SegNet(seed=1)
    const = Tensor(np.full((1, 8, 8, 32), 0.3))
    logits = net.logits(const).data
    assert logits.shape == (1, 64, 64, 5)
    assert np.ptp(logits.reshape(-1, 5), axis=0).max() == 0.0


def test_shape_errors():
    net = SegNet()
    with pytest.raises(ValueError):
        net.features(np.zeros((60, 64, 3)))
    with pytest.raises(ValueError):
        net.logits(Tensor(np.zeros((1, 8, 8, 16))))


def test_encoder_gradient():
    net = SegNet(num_classes=3, channels=8, seed=2)
    image = np.random.default_rng(2).uniform(size=(1, 16, 16, 3))

    def fn(k):
        net.params["enc1.weight"] = k
        return ad.mean(net.features(image))

    k = Tensor(net.params["enc1.weight"].data.copy())
    assert finite_difference_check(fn, [k], 1e-5) < 1e-5


def test_decoder_gradient():
    net = SegNet(num_classes=3, channels=4, seed=3)
    feats = Tensor(np.random.default_rng(3).uniform(size=(1, 2, 2, 4)))

    def fn(w, b):
        net.params["dec.weight"], net.params["dec.bias"] = w, b
        return ad.mean(ad.log_softmax(net.logits(feats)))

    params = [Tensor(net.params["dec.weight"].data.copy()), Tensor(net.params["dec.bias"].data + 0.1)]
    assert finite_difference_check(fn, params, 1e-5) < 1e-5


def test_predict_saturated_and_tied():
    logits = np.zeros((1, 4, 4, 5))
    logits[..., 2] = 10.0
    labels, peak = predict_from_logits(logits)
    assert (labels == 2).all() and (peak > 0.99).all()
    tied = np.full((1, 2, 2, 2), -np.inf)
    tied[..., :] = 0.0
    labels, peak = predict_from_logits(tied)
    assert (labels == 0).all() and (peak == 0.5).all()


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_net_predictions_in_range(seed):
    rng = np.random.default_rng(seed)
    net = SegNet(seed=seed)
    labels, peak = net.predict(rng.uniform(size=(16, 16, 3)))
    assert labels.min() >= 0 and labels.max() < 5
    assert (peak > 0).all() and (peak <= 1).all()
    assert net.features(rng.uniform(size=(16, 16, 3))).data.min() >= 0


def test_lr_schedule():
    state = OptimizerState(base_lr=2.5e-4, max_steps=1000)
    assert state.lr(0) == 2.5e-4
    assert state.lr(500) == pytest.approx(1.3397e-4, abs=1e-8)
    lrs = [state.lr(s) for s in range(1000)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_sgd_fixed_point_and_exhaustion():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    state = OptimizerState(base_lr=0.1, weight_decay=0.0, max_steps=1)
    sgd_step(p, state, {"w": np.zeros(2)})
    assert p["w"].data.tolist() == [1.0, -2.0]
    with pytest.raises(RuntimeError):
        sgd_step(p, state, {"w": np.zeros(2)})


def test_sgd_momentum_update_rule():
    p = {"w": Tensor(np.array([2.0]))}
    state = OptimizerState(base_lr=0.1, momentum=0.5, weight_decay=0.1, power=1.0, max_steps=10)
    sgd_step(p, state, {"w": np.array([1.0])})
    # v = 1 + 0.1*2 = 1.2; w = 2 - 0.1*1.2
    assert p["w"].data[0] == pytest.approx(1.88, abs=1e-15)
    sgd_step(p, state, {"w": np.array([1.0])})
    v = 0.5 * 1.2 + 1.0 + 0.1 * 1.88
    assert p["w"].data[0] == pytest.approx(1.88 - 0.1 * 0.9 * v, abs=1e-15)


def test_sgd_descends_quadratic():
    w = Tensor(np.array([3.0]), requires_grad=True)
    loss = lambda: float(w.data[0] ** 2)  # noqa: E731
    before = loss()
    sgd_step({"w": w}, OptimizerState(base_lr=0.1, weight_decay=0.0, max_steps=10), {"w": 2 * w.data})
    assert loss() < before


def test_checkpoint_roundtrip(tmp_path):
    net = SegNet(seed=9)
    save_checkpoint(tmp_path / "ck", net, {"step": 3}, {"extra": np.eye(2)})
    loaded, manifest, tensors = load_checkpoint(tmp_path / "ck")
    assert manifest["step"] == 3
    for k, v in net.state_dict().items():
        assert loaded.state_dict()[k].tobytes() == v.tobytes()
    np.testing.assert_array_equal(tensors["extra"], np.eye(2))


def test_corrupt_checkpoint(tmp_path):
    save_checkpoint(tmp_path / "ck", SegNet())
    path = tmp_path / "ck" / "dec.bias.lsrt"
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(FormatError) as info:
        load_checkpoint(tmp_path / "ck")
    assert info.value.code == "bad_magic"
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")


def test_init_is_seeded():
    a, b, c = SegNet(seed=4), SegNet(seed=4), SegNet(seed=5)
    assert a.state_dict()["enc1.weight"].tobytes() == b.state_dict()["enc1.weight"].tobytes()
    assert a.state_dict()["enc1.weight"].tobytes() != c.state_dict()["enc1.weight"].tobytes()
    assert (a.state_dict()["enc2.bias"] == 0).all()
