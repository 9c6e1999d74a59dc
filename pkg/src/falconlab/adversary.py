"""FGSM perturbations and the per-minibatch epsilon draw."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import ConfigError
from .losses import cce_loss, one_hot

DEFAULT_EPSILONS = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45)


@dataclass(frozen=True)
class AdversarialConfig:
    epsilon_set: tuple = field(default=DEFAULT_EPSILONS)
    clip_min: float = 0.0
    clip_max: float = 1.0

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilon_set)
        object.__setattr__(self, "epsilon_set", eps)
        if not eps:
            raise ConfigError("epsilon_set must not be empty")
        if any(e < 0 for e in eps):
            raise ConfigError(f"epsilons must be non-negative: {eps}")
        if list(eps) != sorted(eps):
            raise ConfigError(f"epsilon_set must be sorted ascending: {eps}")
        if not self.clip_min < self.clip_max:
            raise ConfigError(f"clip_min {self.clip_min} must be below clip_max {self.clip_max}")


def sample_epsilon(cfg: AdversarialConfig, rng: np.random.Generator) -> float:
    """Draw one perturbation level uniformly from ``cfg.epsilon_set``."""
    return cfg.epsilon_set[int(rng.integers(len(cfg.epsilon_set)))]


def input_gradient(model, inputs, labels) -> np.ndarray:
    """Gradient of the batch-mean cross entropy with respect to ``inputs``.

    Runs in eval mode (no dropout) and leaves the model's parameter gradients
    exactly as they were before the call.
    """
    saved = [p.grad for p in model.params]
    was_training = model.training
    model.training = False
    try:
        x = ag.Tensor(np.asarray(inputs), requires_grad=True)
        probs = ag.softmax(model.forward(x), axis=1)
        ag.backward(cce_loss(probs, one_hot(labels, model.num_classes)))
        grad = x.grad if x.grad is not None else np.zeros_like(x.data)
    finally:
        model.training = was_training
        for p, g in zip(model.params, saved):
            p.grad = g
    return grad


def fgsm_generate(model, inputs, labels, epsilon: float, cfg: AdversarialConfig | None = None) -> np.ndarray:
    """``clip(x + epsilon * sign(dCCE/dx), clip_min, clip_max)`` with ``sign(0) = 0``."""
    cfg = cfg or AdversarialConfig()
    x = np.asarray(inputs.data if isinstance(inputs, ag.Tensor) else inputs)
    if epsilon < 0:
        raise ConfigError(f"epsilon must be non-negative, got {epsilon}")
    if epsilon == 0:
        return x.copy()
    grad = input_gradient(model, x, labels)
    adv = np.clip(x + epsilon * np.sign(grad), cfg.clip_min, cfg.clip_max).astype(x.dtype, copy=False)
    # x + eps can round one ulp past the eps-ball; step such entries back toward x
    over = np.abs(adv - x) > epsilon
    while over.any():
        adv[over] = np.nextafter(adv[over], x[over])
        over = np.abs(adv - x) > epsilon
    return adv
