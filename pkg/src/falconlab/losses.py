"""Training losses: cross entropy, the wrong-class entropy term and the
binned adversarial calibration term, plus their weighted sum."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import config
from .autograd import Tensor
from .errors import ConfigError, ContractError, DimensionError
from .metrics import bin_indices


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 0.02
    lambda_s: float = 50.0

    def __post_init__(self):
        for name in ("lambda_adv", "lambda_s"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and non-negative, got {v}")


def _check_onehot(probs: Tensor, onehot) -> np.ndarray:
    y = np.asarray(onehot.data if isinstance(onehot, Tensor) else onehot, dtype=np.float64)
    if y.shape != probs.shape or y.ndim != 2:
        raise DimensionError(f"labels {y.shape} do not match probabilities {probs.shape}")
    if not (np.isin(y, (0.0, 1.0)).all() and (y.sum(axis=1) == 1).all()):
        raise ContractError("labels must be one-hot rows")
    return y.astype(probs.data.dtype)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cce_loss(probs: Tensor, onehot_labels) -> Tensor:
    """Batch mean of ``-log p_true`` with probabilities clamped at ``CLAMP_DELTA``."""
    probs = ag.as_tensor(probs)
    y = _check_onehot(probs, onehot_labels)
    per_sample = ag.sum(ag.mul(ag.log(probs), y), axis=1)
    return ag.mul(ag.mean(per_sample), -1.0)


def entropy_loss(probs: Tensor, onehot_labels) -> Tensor:
    """Cross entropy between a uniform distribution and the wrong-class scores.

    Per sample: ``sum_j -(1/C) * log(p_j * (1 - y_j) + y_j)``. The true class
    contributes ``log(1) = 0`` and receives no gradient. Averaged over the batch.
    """
    probs = ag.as_tensor(probs)
    y = _check_onehot(probs, onehot_labels)
    c = probs.shape[1]
    masked = ag.add(ag.mul(probs, 1.0 - y), y)
    per_sample = ag.sum(ag.log(masked), axis=1)
    return ag.mul(ag.mean(per_sample), -1.0 / c)


def binned_accuracy(confidences, correct, num_bins: int) -> np.ndarray:
    """Accuracy of each sample's own confidence bin (``acc(B_{m_i})``)."""
    bins = bin_indices(confidences, num_bins)
    counts = np.bincount(bins, minlength=num_bins + 1)
    hits = np.bincount(bins, weights=np.asarray(correct, dtype=np.float64), minlength=num_bins + 1)
    return hits[bins] / counts[bins]


def adv_calibration_loss(probs: Tensor, labels, num_bins: int = 10, bin_accuracy=None) -> Tensor:
    """``sqrt(sum_i (acc(B_{m_i}) - conf_i)^2 + delta)`` over the batch.

    ``conf_i`` is the max probability of sample ``i``; the binned accuracies are
    treated as constants so the gradient flows only through the confidences.
    Pass ``bin_accuracy`` to reuse accuracies computed elsewhere instead of
    binning ``probs``.
    """
    probs = ag.as_tensor(probs)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ContractError("adversarial calibration loss needs a non-empty (b, C) batch")
    if labels.size != probs.shape[0]:
        raise DimensionError(f"{labels.size} labels for {probs.shape[0]} predictions")
    if num_bins < 1:
        raise ContractError(f"num_bins must be >= 1, got {num_bins}")
    conf = ag.max_reduce(probs, axis=1)
    if bin_accuracy is None:
        correct = np.argmax(probs.data, axis=1) == labels
        bin_accuracy = binned_accuracy(conf.data, correct, num_bins)
    acc = np.asarray(bin_accuracy, dtype=probs.data.dtype).reshape(-1)
    if acc.size != labels.size:
        raise DimensionError(f"{acc.size} bin accuracies for {labels.size} samples")
    gap = ag.sub(acc, conf)
    return ag.sqrt(ag.add(ag.sum(ag.square(gap)), config.CLAMP_DELTA))


def total_loss(cce, l_adv, l_s, weights: LossWeights) -> Tensor:
    """``cce + lambda_adv * l_adv + lambda_s * l_s``."""
    out = ag.as_tensor(cce)
    if weights.lambda_adv:
        out = ag.add(out, ag.mul(l_adv, weights.lambda_adv))
    if weights.lambda_s:
        out = ag.add(out, ag.mul(l_s, weights.lambda_s))
    return out
