"""Calibration and uncertainty metrics.

Confidence bins follow the usual reliability-diagram convention: bin ``m``
(1-based) covers ``((m-1)/M, m/M]`` with the edges evaluated in floating point
as ``m / M``; a confidence of exactly 0 goes to bin 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import config
from .autograd import Tensor
from .errors import ContractError, DimensionError, FitError

LEVELS = tuple(range(0, 100, 10))


@dataclass(frozen=True, slots=True)
class PredictionRecord:
    probs: tuple
    predicted: int
    label: int
    perturbation: str = "none"
    level: int = 0

    @classmethod
    def from_probs(cls, probs, label, perturbation="none", level=0) -> "PredictionRecord":
        p = np.asarray(probs, dtype=np.float64)
        return cls(tuple(p.tolist()), int(np.argmax(p)), int(label), perturbation, int(level))

    def __post_init__(self):
        if abs(math.fsum(self.probs) - 1.0) > 1e-6:
            raise ContractError(f"probabilities sum to {math.fsum(self.probs)}, not 1")
        if self.level not in LEVELS:
            raise ContractError(f"level {self.level} is not on the 0..90 grid")

    @property
    def confidence(self) -> float:
        return max(self.probs)

    @property
    def correct(self) -> bool:
        return self.predicted == self.label


@dataclass(frozen=True)
class BinStatistics:
    index: int
    lower: float
    upper: float
    count: int
    avg_confidence: Optional[float]
    avg_accuracy: Optional[float]


@dataclass(frozen=True)
class TemperatureScaler:
    temperature: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.temperature) and self.temperature > 0):
            raise ContractError(f"temperature must be finite and positive, got {self.temperature}")


# ---------------------------------------------------------------------------
# array-level helpers


def bin_indices(confidences, num_bins: int) -> np.ndarray:
    """1-based bin index of each confidence."""
    if num_bins < 1:
        raise ContractError(f"need at least one bin, got {num_bins}")
    conf = np.asarray(confidences, dtype=np.float64)
    upper = np.arange(1, num_bins + 1) / num_bins
    idx = np.searchsorted(upper, conf, side="left") + 1
    return np.clip(idx, 1, num_bins)


def records_to_arrays(records: Sequence[PredictionRecord]):
    """Columnar view ``(probs, labels, predicted)`` of a record list."""
    if len(records) == 0:
        raise ContractError("empty record list")
    probs = np.array([r.probs for r in records], dtype=np.float64)
    labels = np.array([r.label for r in records], dtype=np.int64)
    predicted = np.array([r.predicted for r in records], dtype=np.int64)
    return probs, labels, predicted


def _bin_sums(conf, correct, num_bins):
    bins = bin_indices(conf, num_bins)
    counts = np.bincount(bins, minlength=num_bins + 1)[1:]
    conf_sum = np.bincount(bins, weights=conf, minlength=num_bins + 1)[1:]
    hit_sum = np.bincount(bins, weights=np.asarray(correct, dtype=np.float64), minlength=num_bins + 1)[1:]
    return counts, conf_sum, hit_sum


def bin_arrays(confidences, correct, num_bins: int) -> list[BinStatistics]:
    conf = np.asarray(confidences, dtype=np.float64)
    if conf.size == 0:
        raise ContractError("cannot bin an empty set of predictions")
    counts, conf_sum, hit_sum = _bin_sums(conf, correct, num_bins)
    out = []
    for m in range(num_bins):
        n = int(counts[m])
        out.append(
            BinStatistics(
                index=m + 1,
                lower=m / num_bins,
                upper=(m + 1) / num_bins,
                count=n,
                avg_confidence=float(conf_sum[m] / n) if n else None,
                avg_accuracy=float(hit_sum[m] / n) if n else None,
            )
        )
    return out


def ece_from_arrays(confidences, correct, num_bins: int = 10) -> float:
    conf = np.asarray(confidences, dtype=np.float64)
    if conf.size == 0:
        raise ContractError("ECE of an empty set of predictions")
    counts, conf_sum, hit_sum = _bin_sums(conf, correct, num_bins)
    full = counts > 0
    gaps = np.abs(hit_sum[full] / counts[full] - conf_sum[full] / counts[full])
    return float(np.sum(counts[full] / conf.size * gaps))


def entropies(probs) -> np.ndarray:
    """Row-wise predictive entropy in nats with ``0 * log 0 = 0``."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=-1)


def nll_from_arrays(probs, labels) -> float:
    p = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if p.shape[0] == 0:
        raise ContractError("NLL of an empty set of predictions")
    true_p = p[np.arange(p.shape[0]), labels]
    return float(np.mean(-np.log(np.maximum(true_p, config.CLAMP_DELTA))))


# ---------------------------------------------------------------------------
# record-level API


def _conf_correct(records):
    probs, labels, predicted = records_to_arrays(records)
    return probs.max(axis=1), predicted == labels


def bin_predictions(records: Sequence[PredictionRecord], num_bins: int = 10) -> list[BinStatistics]:
    conf, correct = _conf_correct(records)
    return bin_arrays(conf, correct, num_bins)


def ece(records: Sequence[PredictionRecord], num_bins: int = 10) -> float:
    """Expected calibration error over ``num_bins`` equal-width confidence bins."""
    conf, correct = _conf_correct(records)
    return ece_from_arrays(conf, correct, num_bins)


def micro_averaged_ece(records: Sequence[PredictionRecord], num_bins: int = 10) -> float:
    """ECE of all levels of one perturbation pooled into a single set."""
    tags = {r.perturbation for r in records}
    if len(tags) > 1:
        raise ContractError(f"micro-averaged ECE needs a single perturbation, got {sorted(tags)}")
    return ece(records, num_bins)


def predictive_entropy(probs) -> float:
    return float(entropies(np.asarray(probs, dtype=np.float64)[None, :])[0])


def nll(records: Sequence[PredictionRecord]) -> float:
    probs, labels, _ = records_to_arrays(records)
    return nll_from_arrays(probs, labels)


# ---------------------------------------------------------------------------
# temperature scaling


def _array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _scaled_nll(logits, labels, t):
    z = logits / t
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(z.shape[0]), labels]))


def fit_temperature(validation_logits, labels, bounds=(0.05, 20.0), iterations: int = 100) -> TemperatureScaler:
    """Fit ``T`` minimising validation NLL of ``softmax(logits / T)``.

    Golden-section search over ``log T`` inside ``bounds``. The scaled NLL is
    convex in ``1/T``, hence unimodal in ``log T``, so the search is exact up
    to the bracket width.
    """
    logits = _array(validation_logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise DimensionError(f"logits {logits.shape} do not match {labels.size} labels")
    n, c = logits.shape
    if n < c:
        raise ContractError(f"need at least as many validation samples ({n}) as classes ({c})")
    if not np.isfinite(logits).all():
        raise ContractError("validation logits must be finite")
    if np.unique(labels).size < 2:
        raise FitError("temperature fit needs labels from at least two classes")
    lo, hi = math.log(bounds[0]), math.log(bounds[1])
    ratio = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    x1 = b - ratio * (b - a)
    x2 = a + ratio * (b - a)
    f1 = _scaled_nll(logits, labels, math.exp(x1))
    f2 = _scaled_nll(logits, labels, math.exp(x2))
    for _ in range(iterations):
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - ratio * (b - a)
            f1 = _scaled_nll(logits, labels, math.exp(x1))
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + ratio * (b - a)
            f2 = _scaled_nll(logits, labels, math.exp(x2))
        if b - a < 1e-10:
            break
    return TemperatureScaler(math.exp((a + b) / 2.0))


def apply_temperature(scaler: TemperatureScaler, logits) -> np.ndarray:
    z = _array(logits) / scaler.temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def summarize(probs, labels, num_bins: int = 10) -> dict:
    """Accuracy, ECE, mean entropy, NLL and mean confidence of one prediction set."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    conf = probs.max(axis=1)
    correct = np.argmax(probs, axis=1) == labels
    return {
        "accuracy": float(correct.mean()),
        "ece": ece_from_arrays(conf, correct, num_bins),
        "entropy": float(entropies(probs).mean()),
        "nll": nll_from_arrays(probs, labels),
        "confidence": float(conf.mean()),
    }

