import math

import numpy as np
import pytest

from amlab.data import LabeledDataset, synth_blobs
from amlab.losses import ClassifierHead, LossConfig, Variant
from amlab.trainer import (
    CheckpointError,
    DivergenceError,
    Mlp,
    MlpConfig,
    TrainConfig,
    embed,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    sgd_step,
    train,
)


def separable(seed=0):
    rng = np.random.default_rng(seed)
    x = np.vstack([rng.normal([2, 2], 0.3, (40, 2)), rng.normal([-2, -2], 0.3, (40, 2))])
    return LabeledDataset(x, np.repeat([0, 1], 40), 2)


def test_embed_zero_network():
    net = Mlp([np.zeros((4, 3)), np.zeros((2, 4))], [np.zeros(4), np.zeros(2)])
    np.testing.assert_array_equal(embed(net, np.ones((5, 3))), np.zeros((5, 2)))


def test_embed_hand_example():
    w0 = np.array([[1.0, -1.0], [2.0, 0.5]])
    b0 = np.array([0.0, -1.0])
    w1 = np.array([[1.0, 1.0], [0.0, -2.0]])
    b1 = np.array([0.5, 0.0])
    net = Mlp([w0, w1], [b0, b1])
    # x = (1, 2): hidden pre = (-1, 2), relu -> (0, 2); out = (2.5, -4)
    np.testing.assert_array_equal(embed(net, [[1.0, 2.0]]), [[2.5, -4.0]])


def test_embed_deterministic_and_width_check():
    net = Mlp.he_normal(MlpConfig((3, 5, 2)), __import__("amlab").numeric.Rng(1))
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert embed(net, x).tobytes() == embed(net, x).tobytes()
    with pytest.raises(ValueError):
        embed(net, np.ones((2, 4)))


def test_mlp_backward_matches_finite_differences(rng):
    from amlab.numeric import Rng

    net = Mlp.he_normal(MlpConfig((3, 4, 2)), Rng(3))
    x = rng.normal(size=(5, 3))
    up = rng.normal(size=(5, 2))
    out, acts = net.forward(x)
    gw, gb = net.backward(acts, up)
    h = 1e-6
    for layer in range(2):
        for idx in np.ndindex(net.weights[layer].shape):
            orig = net.weights[layer][idx]
            net.weights[layer][idx] = orig + h
            hi = (embed(net, x) * up).sum()
            net.weights[layer][idx] = orig - h
            lo = (embed(net, x) * up).sum()
            net.weights[layer][idx] = orig
            assert gw[layer][idx] == pytest.approx((hi - lo) / (2 * h), abs=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        MlpConfig((3, 2))
    with pytest.raises(ValueError):
        MlpConfig((3, 4, 1))
    with pytest.raises(ValueError):
        TrainConfig(lr_decay_iters=(5, 5), total_iters=10)
    with pytest.raises(ValueError):
        TrainConfig(lr_decay_iters=(10,), total_iters=10)


def test_lr_schedule_example():
    opt = TrainConfig(lr_base=0.1, lr_decay_iters=(16, 24, 28), total_iters=30)
    assert lr_at(opt, 25) == pytest.approx(0.001, rel=1e-12)
    assert lr_at(opt, 0) == 0.1
    assert lr_at(opt, 16) == pytest.approx(0.01)
    assert lr_at(opt, 29) == pytest.approx(1e-4)


def test_sgd_vanilla_and_fixed_point():
    opt = TrainConfig(momentum=0.0, weight_decay=0.0)
    p, v = sgd_step({"a": np.array([1.0, 2.0])}, {"a": np.array([0.5, -1.0])}, {}, opt, 0.1, set())
    np.testing.assert_allclose(p["a"], [0.95, 2.1])
    p, v = sgd_step({"a": np.array([1.0])}, {"a": np.array([0.0])}, {}, TrainConfig(weight_decay=0.0), 0.1, {"a"})
    assert p["a"].tolist() == [1.0]


def test_sgd_two_momentum_steps():
    opt = TrainConfig(momentum=0.9, weight_decay=0.01)
    p = {"w": np.array([1.0]), "b": np.array([1.0])}
    g = {"w": np.array([0.5]), "b": np.array([0.5])}
    v = {}
    p, v = sgd_step(p, g, v, opt, 0.1, {"w"})
    p, v = sgd_step(p, g, v, opt, 0.1, {"w"})
    # w: v1 = -0.1*(0.5+0.01) = -0.051, w1 = 0.949
    #    v2 = 0.9*v1 - 0.1*(0.5+0.00949) = -0.096849, w2 = 0.852151
    assert p["w"][0] == pytest.approx(0.852151, abs=1e-12)
    # b: no decay, v1 = -0.05, b1 = 0.95, v2 = -0.095, b2 = 0.855
    assert p["b"][0] == pytest.approx(0.855, abs=1e-12)


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_step({"a": np.zeros(2)}, {"a": np.zeros(3)}, {}, TrainConfig(), 0.1, set())


SMOKE = TrainConfig(lr_base=0.05, total_iters=200, batch_size=16, seed=4)


@pytest.mark.parametrize(
    "cfg",
    [LossConfig(Variant.SOFTMAX), LossConfig(Variant.AM_SOFTMAX, s=10, m_add=0.2)],
    ids=["softmax", "am_softmax"],
)
def test_separable_smoke(cfg):
    hist = train(separable(), MlpConfig((2, 16, 2)), cfg, SMOKE)
    assert hist.epoch_accuracy[-1] == 1.0
    assert np.mean(hist.losses[-5:]) < 0.01
    assert len(hist.losses) == len(hist.lrs) == len(hist.lambdas) == 200
    assert len(hist.epoch_accuracy) == math.ceil(200 / 5)


def test_training_deterministic():
    ds = synth_blobs(3, 5, 20, 0.3, 0)
    cfg = LossConfig(Variant.A_SOFTMAX)
    opt = TrainConfig(total_iters=30, batch_size=16, seed=2)
    a = train(ds, MlpConfig((5, 8, 3)), cfg, opt)
    b = train(ds, MlpConfig((5, 8, 3)), cfg, opt)
    assert a.losses == b.losses and a.epoch_accuracy == b.epoch_accuracy
    assert a.head.weights.tobytes() == b.head.weights.tobytes()
    assert a.lambdas[0] == 1000.0 and a.lambdas[-1] < a.lambdas[0]


def test_head_rows_stay_unit(monkeypatch):
    import amlab.trainer as tr

    seen = []
    orig = tr.ClassifierHead.renormalize

    def spy(self):
        orig(self)
        seen.append(np.abs(np.linalg.norm(self.weights, axis=1) - 1).max())

    monkeypatch.setattr(tr.ClassifierHead, "renormalize", spy)
    train(synth_blobs(3, 4, 10, 0.3, 0), MlpConfig((4, 6, 3)), LossConfig(), TrainConfig(total_iters=25, batch_size=8))
    assert len(seen) == 26 and max(seen) < 1e-10


@pytest.mark.parametrize("c", [4, 10])
def test_initial_loss_near_ln_c(c):
    ds = synth_blobs(c, 8, 20, 0.3, 0)
    hist = train(ds, MlpConfig((8, 16, 3)), LossConfig(Variant.SOFTMAX), TrainConfig(total_iters=1, batch_size=len(ds)))
    assert abs(hist.losses[0] - math.log(c)) < 0.2 * math.log(c)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected():
    ds = separable()
    with pytest.raises(DivergenceError) as err:
        train(ds, MlpConfig((2, 8, 2)), LossConfig(Variant.SOFTMAX), TrainConfig(lr_base=1e200, momentum=0.0, total_iters=20))
    assert err.value.iteration < 20


def test_collapsed_features_reported_as_divergence(monkeypatch):
    import amlab.trainer as tr

    # every hidden unit is dead for positive inputs, so all features are zero
    dead = Mlp([-np.ones((4, 2)), np.ones((2, 4))], [-np.ones(4), np.zeros(2)])
    monkeypatch.setattr(tr.Mlp, "he_normal", classmethod(lambda cls, config, rng: dead))
    ds = LabeledDataset(np.abs(separable().inputs), separable().labels, 2)
    with pytest.raises(DivergenceError, match="collapsed"):
        train(ds, MlpConfig((2, 4, 2)), LossConfig(), TrainConfig(total_iters=2))


def test_train_input_checks():
    with pytest.raises(ValueError):
        train(separable(), MlpConfig((3, 8, 2)), LossConfig(), TrainConfig(total_iters=2))


def test_checkpoint_round_trip(tmp_path):
    hist = train(separable(), MlpConfig((2, 32, 3)), LossConfig(), TrainConfig(total_iters=3))
    path = tmp_path / "m.amlb"
    save_checkpoint(path, hist.net, hist.head)
    raw = path.read_bytes()
    assert raw[:4] == b"AMLB" and raw[4:8] == b"\x01\x00\x00\x00"
    net, head = load_checkpoint(path)
    x = separable().inputs
    assert embed(net, x).tobytes() == embed(hist.net, x).tobytes()
    assert head.weights.tobytes() == hist.head.weights.tobytes()


@pytest.mark.parametrize("mutate", ["magic", "version", "truncate", "missing"])
def test_checkpoint_corruption(tmp_path, mutate):
    net = Mlp([np.ones((2, 2)), np.ones((2, 2))], [np.zeros(2), np.zeros(2)])
    path = tmp_path / "m.amlb"
    save_checkpoint(path, net, ClassifierHead(np.eye(2)))
    raw = bytearray(path.read_bytes())
    if mutate == "magic":
        raw[:4] = b"XXXX"
    elif mutate == "version":
        raw[4] = 9
    elif mutate == "truncate":
        raw = raw[:-5]
    else:
        path2 = tmp_path / "n.amlb"
        save_checkpoint(path2, Mlp([np.ones((2, 2)), np.ones((2, 2))], [np.zeros(2), np.zeros(2)]), ClassifierHead(np.eye(2)))
        raw = bytearray(path2.read_bytes())
        cut = raw.index(b"head.weight") - 4
        raw = raw[:cut]
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.amlb")
