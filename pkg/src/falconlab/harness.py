"""Training loops, baselines and shift evaluation.

``train_falcon`` follows the per-minibatch recipe:

1. draw ``epsilon`` from the configured set,
2. build the FGSM copy of the minibatch with the current parameters,
3. one optimizer step on ``CCE + lambda_s * L_S`` over the clean minibatch,
4. predict the FGSM copy and bin its confidences,
5. one optimizer step on ``lambda_adv * L_adv`` over the FGSM copy.

The FGSM samples never enter the cross-entropy term.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import autograd as ag
from . import metrics
from .adversary import DEFAULT_EPSILONS, AdversarialConfig, fgsm_generate, sample_epsilon
from .data import Dataset, write_prediction_arrays
from .errors import ConfigError, ContractError, DivergenceError, FalconError
from .losses import LossWeights, adv_calibration_loss, cce_loss, entropy_loss, one_hot, total_loss
from .nn import Model, Optimizer
from .shift import LEVELS, PerturbationSpec, perturb_batch

MODES = ("falcon", "falcon-ls-only", "falcon-ladv-only", "l2-baseline")
LAMBDA_S_GRID = (0.5, 1.0, 5.0, 10.0, 15.0, 30.0, 50.0, 100.0)
LAMBDA_ADV_GRID = (0.25, 1e-1, 1e-2, 1e-3, 1e-4, 1e-6)
LEARNING_RATE_GRID = (1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3)
REPORT_SCHEMA_VERSION = 1


@dataclass
class TrainConfig:
    mode: str = "falcon"
    lambda_s: float = 50.0
    lambda_adv: float = 0.02
    epsilon_set: tuple = DEFAULT_EPSILONS
    num_bins: int = 10
    batch_size: int = 128
    epochs: int = 5
    max_steps: Optional[int] = None
    learning_rate: float = 5e-4
    dropout: float = 0.5
    l2: float = 0.0
    optimizer: str = "sgd-momentum"
    momentum: float = 0.9
    seed: int = 0
    patience: int = 5
    ls_scale: str = "batch-sum-cce"

    def __post_init__(self):
        self.epsilon_set = tuple(float(e) for e in self.epsilon_set)
        if self.mode not in MODES:
            raise ConfigError(f"unknown training mode {self.mode!r}; expected one of {MODES}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.num_bins < 1:
            raise ConfigError("num_bins must be at least 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.ls_scale not in LS_SCALES:
            raise ConfigError(f"ls_scale must be one of {sorted(LS_SCALES)}")
        LossWeights(self.lambda_adv, self.lambda_s)
        AdversarialConfig(self.epsilon_set)

    @property
    def weights(self) -> LossWeights:
        """Loss weights after the ablation mode has switched terms off."""
        ls = self.lambda_s if self.mode in ("falcon", "falcon-ls-only") else 0.0
        adv = self.lambda_adv if self.mode in ("falcon", "falcon-ladv-only") else 0.0
        return LossWeights(lambda_adv=adv, lambda_s=ls)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epsilon_set"] = list(self.epsilon_set)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


# How the entropy term is weighed against cross entropy inside one step:
# "batch-mean" averages both over the minibatch, "batch-sum-cce" sums the
# cross entropy over the minibatch while L_S stays a batch mean.
LS_SCALES = {"batch-mean", "batch-sum-cce"}


def make_optimizer(cfg: TrainConfig) -> Optimizer:
    return Optimizer(kind=cfg.optimizer, lr=cfg.learning_rate, l2=cfg.l2, momentum=cfg.momentum)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if idx.size >= 2:
            yield idx


def _finite(value: float, step: int, term: str) -> float:
    if not math.isfinite(value):
        raise DivergenceError(step, term, value)
    return value


def _step(opt, model, step: int) -> None:
    # the delta clamp in the losses can hide NaN probabilities, so check weights too
    opt.step(model)
    flat = model.get_flat()
    if not np.all(np.isfinite(flat)):
        raise DivergenceError(step, "parameters", float(flat[~np.isfinite(flat)][0]))


def _clean_step(model, opt, xb, yb, weights, cfg, step):
    """CCE (+ lambda_s * L_S) step on a clean minibatch; returns logged terms."""
    model.train()
    onehot = one_hot(yb, model.num_classes)
    probs = ag.softmax(model.forward(xb), axis=1)
    cce = cce_loss(probs, onehot)
    record = {"step": step, "phase": "clean", "cce": _finite(cce.item(), step, "cce")}
    loss = cce
    if weights.lambda_s:
        ls = entropy_loss(probs, onehot)
        record["l_s"] = _finite(ls.item(), step, "l_s")
        if cfg.ls_scale == "batch-sum-cce":
            loss = total_loss(ag.mul(cce, float(len(yb))), None, ls, LossWeights(0.0, weights.lambda_s))
            loss = ag.mul(loss, 1.0 / len(yb))
        else:
            loss = total_loss(cce, None, ls, LossWeights(0.0, weights.lambda_s))
    ag.backward(loss)
    _step(opt, model, step)
    return record


def _adv_step(model, opt, x_adv, yb, weights, cfg, step, epsilon):
    model.train()
    probs = ag.softmax(model.forward(x_adv), axis=1)
    l_adv = adv_calibration_loss(probs, yb, cfg.num_bins)
    record = {"step": step, "phase": "adv", "epsilon": epsilon, "l_adv": _finite(l_adv.item(), step, "l_adv")}
    ag.backward(ag.mul(l_adv, weights.lambda_adv))
    _step(opt, model, step)
    return record


def _accuracy(predictor, data: Dataset) -> float:
    return float(np.mean(np.argmax(predictor.predict_proba(data.inputs), axis=1) == data.labels))


class _EarlyStopper:
    def __init__(self, model, val_data, patience):
        self.model, self.val, self.patience = model, val_data, patience
        self.best, self.best_params, self.bad = -1.0, None, 0

    def should_stop(self, history) -> bool:
        if self.val is None:
            return False
        acc = _accuracy(self.model, self.val)
        history.epochs.append({"epoch": len(history.epochs), "val_accuracy": acc})
        if acc > self.best:
            self.best, self.best_params, self.bad = acc, self.model.get_flat(), 0
            return False
        self.bad += 1
        return self.bad >= self.patience

    def restore(self):
        if self.best_params is not None:
            self.model.set_flat(self.best_params)


@dataclass
class History:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    fgsm_calls: int = 0

    def rows(self) -> list[dict]:
        return self.steps


def train_falcon(
    model: Model,
    train_data: Dataset,
    cfg: TrainConfig,
    val_data: Optional[Dataset] = None,
    optimizer: Optional[Optimizer] = None,
    on_step: Optional[Callable[[int, Model], None]] = None,
) -> tuple[Model, History]:
    """Train ``model`` in place with the calibration-aware recipe; see module docs.

    ``on_step(step, model)`` runs after every global step.
    """
    if len(train_data) < 2:
        raise ContractError("training data needs at least two samples")
    weights = cfg.weights
    adv_cfg = AdversarialConfig(cfg.epsilon_set, *train_data.input_range)
    opt = optimizer or make_optimizer(cfg)
    shuffle_rng = np.random.default_rng([cfg.seed, 2])
    eps_rng = np.random.default_rng([cfg.seed, 3])
    history = History()
    stopper = _EarlyStopper(model, val_data, cfg.patience)
    step, done = 0, False
    for _epoch in range(cfg.epochs):
        for idx in _batches(len(train_data), cfg.batch_size, shuffle_rng):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
            xb, yb = train_data.inputs[idx], train_data.labels[idx]
            x_adv = None
            if weights.lambda_adv:
                eps = sample_epsilon(adv_cfg, eps_rng)
                x_adv = fgsm_generate(model, xb, yb, eps, adv_cfg)
                history.fgsm_calls += 1
            history.steps.append(_clean_step(model, opt, xb, yb, weights, cfg, step))
            if x_adv is not None:
                history.steps.append(_adv_step(model, opt, x_adv, yb, weights, cfg, step, eps))
            if on_step is not None:
                on_step(step, model)
            step += 1
        if done or stopper.should_stop(history):
            break
    stopper.restore()
    model.eval()
    return model, history


def train_baseline(
    model: Model,
    train_data: Dataset,
    cfg: TrainConfig,
    val_data: Optional[Dataset] = None,
    on_step: Optional[Callable[[int, Model], None]] = None,
):
    """Plain cross-entropy training with dropout and L2 decay."""
    opt = make_optimizer(cfg)
    shuffle_rng = np.random.default_rng([cfg.seed, 2])
    history = History()
    stopper = _EarlyStopper(model, val_data, cfg.patience)
    no_extra = LossWeights(0.0, 0.0)
    step, done = 0, False
    for _epoch in range(cfg.epochs):
        for idx in _batches(len(train_data), cfg.batch_size, shuffle_rng):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
            xb, yb = train_data.inputs[idx], train_data.labels[idx]
            history.steps.append(_clean_step(model, opt, xb, yb, no_extra, cfg, step))
            if on_step is not None:
                on_step(step, model)
            step += 1
        if done or stopper.should_stop(history):
            break
    stopper.restore()
    model.eval()
    return model, history


# ---------------------------------------------------------------------------
# predictors


class Ensemble:
    """Average of member softmax outputs."""

    def __init__(self, members: Sequence[Model]):
        if not members:
            raise ContractError("an ensemble needs at least one member")
        self.members = list(members)
        self.num_classes = members[0].num_classes

    def predict_proba(self, inputs, batch_size: int = 2048) -> np.ndarray:
        return np.mean([m.predict_proba(inputs, batch_size) for m in self.members], axis=0)


class TemperatureScaled:
    """A model whose logits are divided by a fitted temperature."""

    def __init__(self, model: Model, scaler: metrics.TemperatureScaler):
        self.model, self.scaler = model, scaler
        self.num_classes = model.num_classes

    @classmethod
    def fit(cls, model: Model, val_data: Dataset) -> "TemperatureScaled":
        return cls(model, metrics.fit_temperature(model.predict_logits(val_data.inputs), val_data.labels))

    def predict_proba(self, inputs, batch_size: int = 2048) -> np.ndarray:
        return metrics.apply_temperature(self.scaler, self.model.predict_logits(inputs, batch_size))


def _ensemble_step(model, opt, xb, yb, adv_eps, adv_cfg, step):
    x_adv = fgsm_generate(model, xb, yb, adv_eps, adv_cfg) if adv_eps > 0 else None
    model.train()
    onehot = one_hot(yb, model.num_classes)
    cce = cce_loss(ag.softmax(model.forward(xb), axis=1), onehot)
    record = {"step": step, "phase": "clean", "cce": _finite(cce.item(), step, "cce")}
    loss = cce
    if x_adv is not None:
        cce_adv = cce_loss(ag.softmax(model.forward(x_adv), axis=1), onehot)
        record["cce_adv"] = _finite(cce_adv.item(), step, "cce_adv")
        loss = ag.add(cce, cce_adv)
    ag.backward(loss)
    _step(opt, model, step)
    return record


def train_ensemble(
    k: int,
    train_data: Dataset,
    cfg: TrainConfig,
    adv_epsilon: float = 0.01,
    build_model: Optional[Callable[[int], Model]] = None,
    val_data: Optional[Dataset] = None,
) -> Ensemble:
    """``k`` independently seeded nets trained on CCE(MB) + CCE(FGSM(MB)).

    Member ``i`` uses seed ``cfg.seed + 1000 * i`` for initialisation,
    shuffling and dropout. With ``adv_epsilon = 0`` the adversarial term is
    dropped and each member is a plain baseline net.
    """
    if k < 1:
        raise ConfigError("ensemble size must be >= 1")
    if build_model is None:
        raise ConfigError("train_ensemble needs a build_model(seed) factory")
    members = []
    adv_cfg = AdversarialConfig((adv_epsilon,), *train_data.input_range)
    for i in range(k):
        member_cfg = replace(cfg, seed=cfg.seed + 1000 * i, mode="l2-baseline")
        model = build_model(member_cfg.seed)
        if adv_epsilon == 0:
            train_baseline(model, train_data, member_cfg, val_data)
        else:
            opt = make_optimizer(member_cfg)
            shuffle_rng = np.random.default_rng([member_cfg.seed, 2])
            stopper = _EarlyStopper(model, val_data, member_cfg.patience)
            history = History()
            step, done = 0, False
            for _epoch in range(member_cfg.epochs):
                for idx in _batches(len(train_data), member_cfg.batch_size, shuffle_rng):
                    if member_cfg.max_steps is not None and step >= member_cfg.max_steps:
                        done = True
                        break
                    xb, yb = train_data.inputs[idx], train_data.labels[idx]
                    history.steps.append(_ensemble_step(model, opt, xb, yb, adv_epsilon, adv_cfg, step))
                    step += 1
                if done or stopper.should_stop(history):
                    break
            stopper.restore()
            model.eval()
        members.append(model)
    return Ensemble(members)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class CalibrationReport:
    model: str
    num_bins: int
    test_accuracy: float
    in_domain_ece: float
    cells: list
    micro_ece: dict
    provenance: dict

    def cell(self, kind: str, level: int) -> dict:
        for c in self.cells:
            if c["perturbation"] == kind and c["level"] == level:
                return c
        raise KeyError((kind, level))

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "kind": "calibration-report",
            "model": self.model,
            "num_bins": self.num_bins,
            "test_accuracy": self.test_accuracy,
            "in_domain_ece": self.in_domain_ece,
            "micro_ece": self.micro_ece,
            "cells": self.cells,
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationReport":
        return cls(d["model"], d["num_bins"], d["test_accuracy"], d["in_domain_ece"], d["cells"], d["micro_ece"], d["provenance"])


def _bins_payload(conf, correct, num_bins):
    return [
        {"index": b.index, "count": b.count, "confidence": b.avg_confidence, "accuracy": b.avg_accuracy}
        for b in metrics.bin_arrays(conf, correct, num_bins)
    ]


def evaluate_under_shift(
    predictor,
    test_data: Dataset,
    kinds: Sequence[str],
    levels: Sequence[int] = LEVELS,
    num_bins: int = 10,
    seed: int = 0,
    ranges=None,
    log_path=None,
    name: str = "model",
    provenance: Optional[dict] = None,
    batch_size: int = 2048,
) -> CalibrationReport:
    """Predict every (kind, level) perturbation of the test set and score it.

    The predictor is only queried; model parameters are left untouched.
    """
    clean = predictor.predict_proba(test_data.inputs, batch_size)
    clean_conf = clean.max(axis=1)
    clean_correct = clean.argmax(axis=1) == test_data.labels
    cells, micro, log_parts = [], {}, []
    ids = np.arange(len(test_data))
    for kind in kinds:
        pooled_conf, pooled_correct = [], []
        for level in levels:
            try:
                spec = PerturbationSpec.make(kind, level, ranges)
                probs = predictor.predict_proba(perturb_batch(test_data.inputs, spec, seed), batch_size)
            except FalconError as exc:
                raise type(exc)(f"[{kind} @ {level}] {exc}") from exc
            conf = probs.max(axis=1)
            correct = probs.argmax(axis=1) == test_data.labels
            cell = {"perturbation": kind, "level": level, "n": int(len(conf))}
            cell.update(metrics.summarize(probs, test_data.labels, num_bins))
            cell["bins"] = _bins_payload(conf, correct, num_bins)
            cells.append(cell)
            pooled_conf.append(conf)
            pooled_correct.append(correct)
            if log_path is not None:
                log_parts.append((probs, kind, level))
        micro[kind] = metrics.ece_from_arrays(np.concatenate(pooled_conf), np.concatenate(pooled_correct), num_bins)
    if log_path is not None and log_parts:
        write_prediction_arrays(
            log_path,
            np.concatenate([p for p, _, _ in log_parts]),
            np.tile(test_data.labels, len(log_parts)),
            [k for _, k, _ in log_parts for _ in ids],
            [lv for _, _, lv in log_parts for _ in ids],
            np.tile(ids, len(log_parts)),
        )
    return CalibrationReport(
        model=name,
        num_bins=num_bins,
        test_accuracy=float(clean_correct.mean()),
        in_domain_ece=metrics.ece_from_arrays(clean_conf, clean_correct, num_bins),
        cells=cells,
        micro_ece=micro,
        provenance=dict(provenance or {}, seed=seed),
    )


def evaluate_dataset(predictor, data: Dataset, num_bins: int = 10) -> dict:
    """Accuracy, ECE, entropy, NLL and confidence of a predictor on one dataset."""
    return metrics.summarize(predictor.predict_proba(data.inputs), data.labels, num_bins)


def image_shift_evaluator(test_data: Dataset, kinds=("y-zoom",), levels=LEVELS, num_bins=10, seed=0, ranges=None):
    """Build an ``evaluator(predictor) -> (accuracy, mean micro-ECE)`` over image suites."""

    def evaluate(predictor):
        rep = evaluate_under_shift(predictor, test_data, kinds, levels, num_bins, seed, ranges)
        return rep.test_accuracy, float(np.mean(list(rep.micro_ece.values())))

    return evaluate


def synthetic_shift_evaluator(seed: int, n: int, distances: Sequence[float], num_bins: int = 10):
    """Evaluator for 2-D synthetic data: ECE pooled over test sets at several shifts.

    Accuracy is reported on the unshifted test set.
    """
    from .data import gen_synthetic_shift

    sets = [gen_synthetic_shift(seed, n, d)[1] for d in distances]
    clean = gen_synthetic_shift(seed, n, 0.0)[1]

    def evaluate(predictor):
        conf, correct = [], []
        for ds in sets:
            p = predictor.predict_proba(ds.inputs)
            conf.append(p.max(axis=1))
            correct.append(p.argmax(axis=1) == ds.labels)
        return _accuracy(predictor, clean), metrics.ece_from_arrays(np.concatenate(conf), np.concatenate(correct), num_bins)

    return evaluate


def run_sensitivity(
    base_cfg: TrainConfig,
    param: str,
    values: Sequence[float],
    train_data: Dataset,
    build_model: Callable[[int], Model],
    evaluator: Callable,
    val_data: Optional[Dataset] = None,
) -> list[dict]:
    """Retrain once per value of ``param`` (same seed) and evaluate each run."""
    if param not in ("lambda_s", "lambda_adv"):
        raise ConfigError(f"sensitivity sweeps support lambda_s or lambda_adv, not {param!r}")
    rows = []
    for value in values:
        cfg = replace(base_cfg, **{param: float(value)})
        model, _ = train_falcon(build_model(cfg.seed), train_data, cfg, val_data)
        acc, micro = evaluator(model)
        rows.append({"param": param, "value": float(value), "accuracy": acc, "micro_ece": micro})
    return rows


SYNTHETIC_KIND = "synthetic-shift"


def evaluate_synthetic_shift(
    predictor,
    seed: int,
    n: int,
    max_distance: float,
    levels: Sequence[int] = LEVELS,
    num_bins: int = 10,
    name: str = "model",
    provenance: Optional[dict] = None,
    log_path=None,
) -> CalibrationReport:
    """Report over synthetic test sets translated by ``level / 90 * max_distance``.

    Level 0 is the unshifted test set, so its cell matches the in-domain numbers.
    """
    from .data import gen_synthetic_shift

    cells, conf_all, correct_all, log_parts = [], [], [], []
    clean = None
    for level in levels:
        test = gen_synthetic_shift(seed, n, level / 90.0 * max_distance)[1]
        probs = predictor.predict_proba(test.inputs)
        conf = probs.max(axis=1)
        correct = probs.argmax(axis=1) == test.labels
        if level == 0:
            clean = (conf, correct)
        cell = {"perturbation": SYNTHETIC_KIND, "level": level, "n": int(len(conf))}
        cell.update(metrics.summarize(probs, test.labels, num_bins))
        cell["bins"] = _bins_payload(conf, correct, num_bins)
        cells.append(cell)
        conf_all.append(conf)
        correct_all.append(correct)
        log_parts.append((probs, test.labels, level))
    if log_path is not None:
        write_prediction_arrays(
            log_path,
            np.concatenate([p for p, _, _ in log_parts]),
            np.concatenate([y for _, y, _ in log_parts]),
            [SYNTHETIC_KIND] * sum(len(y) for _, y, _ in log_parts),
            [lv for _, y, lv in log_parts for _ in y],
            np.concatenate([np.arange(len(y)) for _, y, _ in log_parts]),
        )
    if clean is None:
        test = gen_synthetic_shift(seed, n, 0.0)[1]
        probs = predictor.predict_proba(test.inputs)
        clean = (probs.max(axis=1), probs.argmax(axis=1) == test.labels)
    return CalibrationReport(
        model=name,
        num_bins=num_bins,
        test_accuracy=float(clean[1].mean()),
        in_domain_ece=metrics.ece_from_arrays(clean[0], clean[1], num_bins),
        cells=cells,
        micro_ece={SYNTHETIC_KIND: metrics.ece_from_arrays(np.concatenate(conf_all), np.concatenate(correct_all), num_bins)},
        provenance=dict(provenance or {}, seed=seed),
    )
