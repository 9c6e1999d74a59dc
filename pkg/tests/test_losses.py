import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from falconlab import autograd as ag
from falconlab.autograd import Tensor
from falconlab.errors import ConfigError, ContractError
from falconlab.losses import (
    LossWeights,
    adv_calibration_loss,
    binned_accuracy,
    cce_loss,
    entropy_loss,
    one_hot,
    total_loss,
)


def _probs(rng, b, c):
    return rng.dirichlet(np.ones(c), size=b)


def test_cce_examples():
    assert cce_loss(Tensor([[0.0, 1.0]]), [[0.0, 1.0]]).item() == 0.0
    assert cce_loss(Tensor(np.full((3, 10), 0.1)), one_hot([0, 4, 9], 10)).item() == pytest.approx(math.log(10), abs=1e-12)
    rng = np.random.default_rng(0)
    p, y = _probs(rng, 9, 4), rng.integers(0, 4, 9)
    assert cce_loss(Tensor(p), one_hot(y, 4)).item() == pytest.approx(oracles.cce(p.tolist(), y.tolist()), abs=1e-12)


def test_non_one_hot_labels_rejected():
    with pytest.raises(ContractError):
        cce_loss(Tensor([[0.5, 0.5]]), [[0.5, 0.5]])


def test_entropy_loss_examples():
    assert entropy_loss(Tensor(np.full((2, 10), 0.1)), one_hot([3, 7], 10)).item() == pytest.approx(0.9 * math.log(10), abs=1e-12)
    p = np.array([[1.0, 0.0, 0.0, 0.0]])
    assert entropy_loss(Tensor(p), one_hot([0], 4)).item() == pytest.approx(-(3 / 4) * math.log(1e-12), rel=1e-12)
    rng = np.random.default_rng(1)
    q, y = _probs(rng, 7, 5), rng.integers(0, 5, 7)
    assert entropy_loss(Tensor(q), one_hot(y, 5)).item() == pytest.approx(oracles.entropy_loss(q.tolist(), y.tolist()), abs=1e-12)


def test_adv_loss_examples():
    assert adv_calibration_loss(Tensor([[0.1, 0.9]]), [1]).item() == pytest.approx(0.1, abs=1e-9)
    # two samples sharing a bin, one right one wrong -> bin accuracy 0.5 = confidence 0.5
    loss = adv_calibration_loss(Tensor([[0.5, 0.5], [0.5, 0.5]]), [0, 1])
    assert loss.item() == pytest.approx(math.sqrt(1e-12))
    rng = np.random.default_rng(2)
    p, y = _probs(rng, 8, 3), rng.integers(0, 3, 8)
    assert adv_calibration_loss(Tensor(p), y, 10).item() == pytest.approx(oracles.adv_loss_two_pass(p.tolist(), y.tolist(), 10), abs=1e-12)
    with pytest.raises(ContractError):
        adv_calibration_loss(Tensor(np.zeros((0, 3))), [])


def test_adv_loss_gradient_only_through_confidence():
    p = Tensor([[0.2, 0.8], [0.7, 0.3]], requires_grad=True)
    ag.backward(adv_calibration_loss(p, [1, 1]))
    assert p.grad[0, 0] == 0.0 and p.grad[1, 1] == 0.0


def test_total_loss_examples():
    assert total_loss(Tensor(1.5), Tensor(9.0), Tensor(9.0), LossWeights(0, 0)).item() == 1.5
    assert total_loss(Tensor(1.0), Tensor(2.0), Tensor(3.0), LossWeights(1, 1)).item() == 6.0
    with pytest.raises(ConfigError):
        LossWeights(-1.0, 0.0)


def test_total_loss_gradient_is_weighted_sum():
    rng = np.random.default_rng(3)
    z0, y = rng.standard_normal((6, 4)), rng.integers(0, 4, 6)
    oh = one_hot(y, 4)
    w = LossWeights(lambda_adv=0.3, lambda_s=2.0)
    acc = binned_accuracy(ag.softmax(Tensor(z0), 1).data.max(1), ag.softmax(Tensor(z0), 1).data.argmax(1) == y, 10)

    def terms(z):
        p = ag.softmax(z, 1)
        return cce_loss(p, oh), adv_calibration_loss(p, y, 10, acc), entropy_loss(p, oh)

    def grad(fn):
        t = Tensor(z0.copy(), requires_grad=True)
        ag.backward(fn(t))
        return t.grad

    combined = grad(lambda t: total_loss(*terms(t), w))
    parts = grad(lambda t: terms(t)[0]) + 0.3 * grad(lambda t: terms(t)[1]) + 2.0 * grad(lambda t: terms(t)[2])
    np.testing.assert_allclose(combined, parts, atol=1e-12)
    numeric = oracles.central_difference(lambda z: total_loss(*terms(Tensor(z)), w).item(), z0)
    np.testing.assert_allclose(combined, numeric, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 0.9), st.integers(3, 12), st.integers(0, 1000))
def test_entropy_loss_minimised_by_uniform_wrong_mass(q, c, seed):
    rng = np.random.default_rng(seed)
    uniform = np.full(c, (1 - q) / (c - 1))
    uniform[0] = q
    other = rng.dirichlet(np.ones(c - 1)) * (1 - q)
    skew = np.concatenate([[q], other])
    oh = one_hot([0], c)
    assert entropy_loss(Tensor(uniform[None]), oh).item() <= entropy_loss(Tensor(skew[None]), oh).item() + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_entropy_loss_ignores_true_class_value(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(5), size=3)
    y = rng.integers(0, 5, 3)
    p2 = p.copy()
    p2[np.arange(3), y] = rng.random(3)
    assert entropy_loss(Tensor(p), one_hot(y, 5)).item() == entropy_loss(Tensor(p2), one_hot(y, 5)).item()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 20))
def test_adv_loss_permutation_invariant(seed, b):
    rng = np.random.default_rng(seed)
    p, y = rng.dirichlet(np.ones(4), size=b), rng.integers(0, 4, b)
    perm = rng.permutation(b)
    a = adv_calibration_loss(Tensor(p), y).item()
    assert a == pytest.approx(adv_calibration_loss(Tensor(p[perm]), y[perm]).item(), abs=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30), st.booleans())
def test_adv_loss_zero_iff_calibrated(seed, b, make_calibrated):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, b)
    if make_calibrated:
        p = one_hot(y, 3)  # confidence 1.0 and always right
    else:
        p = rng.dirichlet(np.ones(3), size=b)
    conf = p.max(1)
    gap = float(np.sum((binned_accuracy(conf, p.argmax(1) == y, 10) - conf) ** 2))
    loss = adv_calibration_loss(Tensor(p), y).item()
    assert loss == pytest.approx(math.sqrt(gap + 1e-12), rel=1e-12)
    assert (loss == math.sqrt(1e-12)) == (gap == 0.0)
    if make_calibrated:
        assert gap == 0.0
