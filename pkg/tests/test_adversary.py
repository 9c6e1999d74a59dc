import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from falconlab import autograd as ag
from falconlab.adversary import DEFAULT_EPSILONS, AdversarialConfig, fgsm_generate, input_gradient, sample_epsilon
from falconlab.errors import ConfigError
from falconlab.losses import cce_loss, one_hot
from falconlab.nn import Model, dense


def test_config_validation():
    assert AdversarialConfig().epsilon_set == DEFAULT_EPSILONS
    assert DEFAULT_EPSILONS == tuple(round(0.05 * i, 2) for i in range(10))
    for bad in [dict(epsilon_set=(0.2, 0.1)), dict(epsilon_set=()), dict(epsilon_set=(-0.1,)), dict(clip_min=1.0, clip_max=0.0)]:
        with pytest.raises(ConfigError):
            AdversarialConfig(**bad)


def test_sample_epsilon_singleton_and_determinism():
    rng = np.random.default_rng(0)
    assert {sample_epsilon(AdversarialConfig((0.1,)), rng) for _ in range(20)} == {0.1}
    ra, rb = np.random.default_rng(7), np.random.default_rng(7)
    assert [sample_epsilon(AdversarialConfig(), ra) for _ in range(50)] == [sample_epsilon(AdversarialConfig(), rb) for _ in range(50)]


def test_sample_epsilon_frequencies():
    rng = np.random.default_rng(1)
    cfg = AdversarialConfig()
    draws = [sample_epsilon(cfg, rng) for _ in range(100_000)]
    values, counts = np.unique(draws, return_counts=True)
    assert len(values) == 10
    assert np.all(np.abs(counts / 100_000 - 0.1) <= 0.01)


def test_epsilon_zero_is_identity():
    m = Model.from_preset("mlp-tiny", 3, (4,))
    x = np.random.default_rng(0).random((5, 4))
    assert fgsm_generate(m, x, [0, 1, 2, 0, 1], 0.0).tobytes() == x.tobytes()


def test_logistic_sign_case():
    m = Model([dense(2)], (1,), 2)
    m.set_flat(np.array([-1.0, 1.0, 0.0, 0.0]))  # logit gap grows with x for class 1
    # label 0: increasing x lowers p_0, so the CCE gradient is positive
    adv = fgsm_generate(m, np.array([[0.3], [0.95]]), [0, 0], 0.1)
    np.testing.assert_allclose(adv[:, 0], [0.4, 1.0])


def test_parameters_and_grads_untouched():
    m = Model.from_preset("mlp-tiny", 3, (4,), seed=2)
    before = m.get_flat().copy()
    sentinel = [np.full(p.shape, 7.0) for p in m.params]
    for p, s in zip(m.params, sentinel):
        p.grad = s
    m.train()
    fgsm_generate(m, np.random.default_rng(0).random((3, 4)), [0, 1, 2], 0.2)
    assert m.get_flat().tobytes() == before.tobytes()
    assert all(p.grad is s for p, s in zip(m.params, sentinel))
    assert m.training


def test_fgsm_is_pure():
    m = Model.from_preset("mlp-tiny", 3, (4,), seed=3)
    x = np.random.default_rng(1).random((6, 4))
    y = [0, 1, 2, 0, 1, 2]
    assert fgsm_generate(m, x, y, 0.15).tobytes() == fgsm_generate(m, x, y, 0.15).tobytes()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.5))
def test_linf_ball_and_clip_range(seed, eps):
    rng = np.random.default_rng(seed)
    m = Model.from_preset("mlp-tiny", 3, (5,), seed=seed)
    x = rng.random((4, 5))
    adv = fgsm_generate(m, x, rng.integers(0, 3, 4), eps)
    assert np.abs(adv - x).max() <= eps
    assert adv.min() >= 0.0 and adv.max() <= 1.0


def test_equality_when_no_clip_binds():
    m = Model.from_preset("mlp-tiny", 3, (5,), seed=4)
    x = np.random.default_rng(4).uniform(0.3, 0.7, (4, 5))
    y = [0, 1, 2, 1]
    g = input_gradient(m, x, y)
    adv = fgsm_generate(m, x, y, 0.2)
    nz = g != 0
    np.testing.assert_allclose(np.abs(adv - x)[nz], 0.2, atol=1e-15)


def test_linear_model_loss_does_not_decrease():
    m = Model([dense(3)], (4,), 3, seed=5)
    x = np.random.default_rng(5).uniform(0.3, 0.7, (8, 4))
    y = np.random.default_rng(6).integers(0, 3, 8)

    def loss(inp):
        return cce_loss(ag.softmax(m.forward(inp), 1), one_hot(y, 3)).item()

    m.eval()
    assert loss(fgsm_generate(m, x, y, 0.25)) >= loss(x)
