import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amlab.losses import (
    Batch,
    ClassifierHead,
    LossConfig,
    Variant,
    grad_check,
    loss_forward_backward,
    predict,
    reference_row_losses,
    row_losses,
)
from amlab.margin import LambdaSchedule

ALL_CONFIGS = {
    "softmax": LossConfig(Variant.SOFTMAX),
    "normface": LossConfig(Variant.NORMFACE, s=30.0),
    "a_softmax_m4_l5": LossConfig(Variant.A_SOFTMAX, m_mult=4, lambda_schedule=LambdaSchedule.constant(5.0)),
    "a_softmax_m2_l0": LossConfig(Variant.A_SOFTMAX, m_mult=2, lambda_schedule=LambdaSchedule.constant(0.0)),
    "a_softmax_annealed": LossConfig(Variant.A_SOFTMAX, m_mult=4),
    "am_softmax": LossConfig(Variant.AM_SOFTMAX, s=30.0, m_add=0.35),
    "am_softmax_no_fn": LossConfig(Variant.AM_SOFTMAX, m_add=0.35, feature_norm=False),
}


def unit(angle):
    return [math.cos(angle), math.sin(angle)]


def random_instance(rng, c=6, d=4, n=8, weight_norm=True):
    w = rng.normal(size=(c, d))
    if weight_norm:
        w /= np.linalg.norm(w, axis=1, keepdims=True)
    return Batch(rng.normal(size=(n, d)) * 2, rng.integers(0, c, n)), ClassifierHead(w)


@pytest.mark.parametrize("variant", [Variant.SOFTMAX, Variant.NORMFACE, Variant.AM_SOFTMAX])
def test_symmetric_two_class_loss_is_ln2(variant):
    cfg = LossConfig(variant, m_add=0.0) if variant is Variant.AM_SOFTMAX else LossConfig(variant)
    head = ClassifierHead([unit(0.3), unit(-0.3)])
    out = loss_forward_backward(Batch([[2.0, 0.0]], [0]), head, cfg)
    assert out.loss == pytest.approx(math.log(2), abs=1e-12)


@pytest.mark.parametrize("c", [3, 5, 10])
def test_equal_logits_give_ln_c(c):
    head = ClassifierHead(np.zeros((c, 3)))
    out = loss_forward_backward(Batch([[1.0, 2.0, 3.0]], [1]), head, LossConfig(Variant.SOFTMAX))
    assert out.loss == pytest.approx(math.log(c), abs=1e-12)


def test_am_softmax_scalar_example():
    head = ClassifierHead([unit(math.acos(0.85)), unit(math.acos(0.1))])
    out = loss_forward_backward(Batch([[5.0, 0.0]], [0]), head, LossConfig(Variant.AM_SOFTMAX, s=30, m_add=0.35))
    assert out.loss == pytest.approx(math.log1p(math.exp(3 - 15)), rel=1e-9)
    assert out.loss == pytest.approx(6.1442e-6, rel=1e-4)
    assert out.target_logits[0] == pytest.approx(30 * 0.5, rel=1e-12)


def test_am_with_zero_margin_is_normface(rng):
    for _ in range(20):
        batch, head = random_instance(rng)
        a = loss_forward_backward(batch, head, LossConfig(Variant.AM_SOFTMAX, s=30, m_add=0.0))
        b = loss_forward_backward(batch, head, LossConfig(Variant.NORMFACE, s=30))
        assert abs(a.loss - b.loss) <= 1e-12
        np.testing.assert_allclose(a.grad_features, b.grad_features, atol=1e-12, rtol=0)
        np.testing.assert_allclose(a.grad_weights, b.grad_weights, atol=1e-12, rtol=0)


def test_mean_reduction(rng):
    batch, head = random_instance(rng)
    cfg = ALL_CONFIGS["am_softmax"]
    rows = row_losses(batch, head, cfg)
    assert loss_forward_backward(batch, head, cfg).loss == pytest.approx(rows.mean(), rel=1e-14)


@pytest.mark.parametrize("name", sorted(ALL_CONFIGS))
def test_reference_matches_kernel(name, rng):
    cfg = ALL_CONFIGS[name]
    for it in (0, 50):
        batch, head = random_instance(rng)
        fast = row_losses(batch, head, cfg, it)
        slow = reference_row_losses(batch.features, head.weights, batch.labels, cfg, it).astype(float)
        np.testing.assert_allclose(fast, slow, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("name", sorted(ALL_CONFIGS))
@pytest.mark.parametrize("seed", range(4))
def test_gradients_match_finite_differences(name, seed):
    assert grad_check(ALL_CONFIGS[name], seed=seed, iteration=3) < 1e-4


def test_grad_check_negative_control():
    assert grad_check(ALL_CONFIGS["am_softmax"], seed=1, perturb=0.01) > 1e-3


@pytest.mark.parametrize("name", sorted(ALL_CONFIGS))
def test_probabilities_and_loss_identity(name, rng):
    batch, head = random_instance(rng)
    out = loss_forward_backward(batch, head, ALL_CONFIGS[name], 7)
    np.testing.assert_allclose(out.probabilities.sum(axis=1), 1.0, atol=1e-9)
    p_target = out.probabilities[np.arange(len(batch.labels)), batch.labels]
    assert out.loss == pytest.approx(-np.mean(np.log(p_target)), abs=1e-12)


def test_margin_monotone(rng):
    margins = [0.0, 0.1, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5]
    for _ in range(20):
        batch, head = random_instance(rng)
        losses = [loss_forward_backward(batch, head, LossConfig(Variant.AM_SOFTMAX, s=10, m_add=m)).loss for m in margins]
        assert all(b > a for a, b in zip(losses, losses[1:]))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_feature_rescaling_invariance(seed, c):
    rng = np.random.default_rng(seed)
    batch, head = random_instance(rng)
    scales = rng.uniform(0.1, 10, size=len(batch.labels)) * c
    cfg = ALL_CONFIGS["am_softmax"]
    a = loss_forward_backward(batch, head, cfg).loss
    b = loss_forward_backward(Batch(batch.features * scales[:, None], batch.labels), head, cfg).loss
    assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


@pytest.mark.parametrize("name", ["normface", "am_softmax", "a_softmax_m4_l5", "am_softmax_no_fn"])
def test_weight_row_rescaling_invariance(name, rng):
    cfg = ALL_CONFIGS[name]
    for _ in range(10):
        batch, head = random_instance(rng)
        scaled = ClassifierHead(head.weights * rng.uniform(0.1, 10, size=(head.class_count, 1)))
        a = loss_forward_backward(batch, head, cfg).loss
        b = loss_forward_backward(batch, scaled, cfg).loss
        assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


def test_larger_scale_sharpens_correct_batch():
    head = ClassifierHead([unit(0.0), unit(2.0), unit(4.0)])
    batch = Batch([unit(0.1), unit(2.05), unit(3.9)], [0, 1, 2])
    for m in (0.0, 0.2):
        losses = [loss_forward_backward(batch, head, LossConfig(Variant.AM_SOFTMAX, s=s, m_add=m)).loss for s in (5, 10, 20, 30, 64)]
        assert all(b < a for a, b in zip(losses, losses[1:]))


def test_loss_stable_at_large_scale():
    head = ClassifierHead([unit(0.0), unit(math.pi)])
    out = loss_forward_backward(Batch([unit(0.0)], [1]), head, LossConfig(Variant.NORMFACE, s=500))
    assert out.loss == pytest.approx(1000.0, rel=1e-12)
    assert np.all(np.isfinite(out.grad_weights))


def test_no_fn_variant_scales_with_norm():
    head = ClassifierHead([unit(0.0), unit(1.0)])
    cfg = LossConfig(Variant.AM_SOFTMAX, m_add=0.35, feature_norm=False)
    out = loss_forward_backward(Batch([[4.0, 0.0]], [0]), head, cfg)
    assert out.target_logits[0] == pytest.approx(4 * (1 - 0.35), rel=1e-12)


def test_predict_examples():
    head = ClassifierHead([unit(0.0), unit(1.0), unit(2.0)])
    assert predict([unit(1.0)], head).tolist() == [1]
    assert predict([unit(0.5)], head).tolist() == [0]
    f = np.array([unit(1.9), unit(0.2)])
    assert predict(f * 7.5, head).tolist() == predict(f, head).tolist() == [2, 0]


def test_predict_degenerate():
    with pytest.raises(ValueError):
        predict([[0.0, 0.0]], ClassifierHead([unit(0.0), unit(1.0)]))


def test_forward_errors():
    head = ClassifierHead([unit(0.0), unit(1.0)])
    cfg = LossConfig(Variant.NORMFACE)
    with pytest.raises(ValueError, match="out of range"):
        loss_forward_backward(Batch([[1.0, 0.0]], [2]), head, cfg)
    with pytest.raises(ValueError, match="non-finite"):
        Batch([[np.nan, 0.0]], [0])
    with pytest.raises(ValueError):
        loss_forward_backward(Batch([[0.0, 0.0]], [0]), head, cfg)
    with pytest.raises(ValueError):
        loss_forward_backward(Batch([[1.0, 0.0, 0.0]], [0]), head, cfg)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(variant="normface", m_add=0.2),
        dict(variant="softmax", weight_norm=True),
        dict(variant="a_softmax", feature_norm=True),
        dict(variant="am_softmax", weight_norm=False),
        dict(variant="am_softmax", s=0.0),
        dict(variant="am_softmax", m_add=1.5),
        dict(variant="a_softmax", m_mult=0),
        dict(variant="bogus"),
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        LossConfig(**kwargs)


def test_config_defaults():
    assert LossConfig().m_add == 0.35
    assert LossConfig(Variant.NORMFACE).m_add == 0.0
    assert LossConfig().with_margin(0.1).m_add == 0.1
