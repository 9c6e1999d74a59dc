import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from falconlab import metrics
from falconlab.errors import ContractError, FitError
from falconlab.metrics import PredictionRecord


def _records(rng, n, c=3, tag="none", level=0):
    p = rng.dirichlet(np.ones(c) * 0.7, size=n)
    y = rng.integers(0, c, n)
    return [PredictionRecord.from_probs(pi, yi, tag, level) for pi, yi in zip(p, y)]


def _conf_correct(recs):
    return [r.confidence for r in recs], [r.correct for r in recs]


def test_record_validation():
    with pytest.raises(ContractError):
        PredictionRecord((0.5, 0.6), 1, 1)
    with pytest.raises(ContractError):
        PredictionRecord((0.5, 0.5), 0, 1, level=15)


def test_binning_boundaries():
    recs = [PredictionRecord((0.0, 1.0), 1, 1)] * 3
    stats = metrics.bin_predictions(recs, 10)
    assert stats[-1].count == 3 and sum(s.count for s in stats) == 3
    assert stats[0].avg_confidence is None
    assert metrics.bin_indices([0.0, 0.1, 0.1000001, 1.0], 10).tolist() == [1, 1, 2, 10]


def test_single_bin_accuracy_is_overall():
    recs = _records(np.random.default_rng(0), 40)
    (s,) = metrics.bin_predictions(recs, 1)
    assert s.count == 40 and s.avg_accuracy == pytest.approx(np.mean([r.correct for r in recs]))


def test_binning_matches_sort_and_count():
    recs = _records(np.random.default_rng(1), 50)
    conf, correct = _conf_correct(recs)
    ours = metrics.bin_predictions(recs, 10)
    theirs = oracles.sort_and_count_bins(conf, correct, 10)
    for s, (count, confs, hits) in zip(ours, theirs):
        assert s.count == count
        if count:
            assert s.avg_confidence == pytest.approx(sum(confs) / count, abs=1e-12)
            assert s.avg_accuracy == pytest.approx(sum(hits) / count, abs=1e-12)


def test_ece_examples():
    recs = [PredictionRecord((0.0, 1.0), 1, y) for y in (1, 1, 0, 0)]
    assert metrics.ece(recs, 10) == pytest.approx(0.5)
    recs = _records(np.random.default_rng(2), 200)
    assert metrics.ece(recs, 10) == pytest.approx(oracles.ece(*_conf_correct(recs), 10), abs=1e-12)
    with pytest.raises(ContractError):
        metrics.ece([], 10)


def test_micro_ece_examples():
    rng = np.random.default_rng(3)
    one = _records(rng, 30, tag="rotation", level=20)
    assert metrics.micro_averaged_ece(one, 10) == metrics.ece(one, 10)
    twice = one + [PredictionRecord(r.probs, r.predicted, r.label, "rotation", 30) for r in one]
    assert metrics.micro_averaged_ece(twice, 10) == pytest.approx(metrics.ece(one, 10), abs=1e-15)
    pooled = [r for lv in range(0, 100, 10) for r in _records(rng, 20, tag="rotation", level=lv)]
    assert metrics.micro_averaged_ece(pooled, 10) == pytest.approx(oracles.ece(*_conf_correct(pooled), 10), abs=1e-12)
    with pytest.raises(ContractError):
        metrics.micro_averaged_ece(one + _records(rng, 3, tag="shear"), 10)


def test_entropy_and_nll_examples():
    assert metrics.predictive_entropy([0, 1, 0]) == 0.0
    assert metrics.predictive_entropy(np.full(10, 0.1)) == pytest.approx(math.log(10), abs=1e-12)
    p = np.random.default_rng(4).dirichlet(np.ones(6))
    assert metrics.predictive_entropy(p) == pytest.approx(oracles.entropy(p.tolist()), abs=1e-12)
    assert metrics.nll([PredictionRecord((1.0, 0.0), 0, 0)]) == 0.0
    assert metrics.nll([PredictionRecord(tuple([0.1] * 10), 0, 3)]) == pytest.approx(math.log(10))
    recs = _records(np.random.default_rng(5), 25)
    expected = np.mean([-math.log(r.probs[r.label]) for r in recs])
    assert metrics.nll(recs) == pytest.approx(expected, abs=1e-12)


def _calibrated_logits(rng, n, c, scale=1.0):
    logits = rng.standard_normal((n, c)) * 2.0
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    labels = np.array([rng.choice(c, p=row) for row in p])
    return logits * scale, labels


def test_fit_temperature_recovers_scale():
    rng = np.random.default_rng(6)
    z, y = _calibrated_logits(rng, 4000, 5)
    assert metrics.fit_temperature(z, y).temperature == pytest.approx(1.0, abs=0.05)
    assert metrics.fit_temperature(z * 3, y).temperature == pytest.approx(3.0, abs=0.15)


def test_fit_temperature_errors():
    with pytest.raises(FitError):
        metrics.fit_temperature(np.random.default_rng(0).standard_normal((20, 3)), np.zeros(20, int))
    with pytest.raises(ContractError):
        metrics.fit_temperature(np.zeros((2, 3)), [0, 1])
    with pytest.raises(ContractError):
        metrics.fit_temperature(np.full((4, 2), np.inf), [0, 1, 0, 1])


def test_apply_temperature_examples():
    z = np.random.default_rng(7).uniform(-3, 3, (5, 4))
    plain = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    np.testing.assert_allclose(metrics.apply_temperature(metrics.TemperatureScaler(1.0), z), plain, atol=1e-15)
    np.testing.assert_allclose(
        metrics.apply_temperature(metrics.TemperatureScaler(2.0), [[2.0, 0.0]]),
        [[math.e / (math.e + 1), 1 / (math.e + 1)]],
        atol=1e-15,
    )
    assert metrics.apply_temperature(metrics.TemperatureScaler(1e3), z).max() <= 1 / 4 + 0.01
    with pytest.raises(ContractError):
        metrics.TemperatureScaler(0.0)


record_sets = st.integers(0, 2**32 - 1).flatmap(lambda s: st.tuples(st.just(s), st.integers(1, 60), st.integers(2, 6)))


@settings(max_examples=60, deadline=None)
@given(record_sets, st.sampled_from([1, 5, 10, 15]))
def test_ece_range_and_permutation_invariance(spec, m):
    seed, n, c = spec
    rng = np.random.default_rng(seed)
    recs = _records(rng, n, c)
    e = metrics.ece(recs, m)
    assert 0.0 <= e <= 1.0
    perm = [recs[i] for i in rng.permutation(n)]
    assert metrics.ece(perm, m) == pytest.approx(e, abs=1e-14)


@settings(max_examples=60, deadline=None)
@given(record_sets, st.integers(1, 5))
def test_micro_ece_of_copies_equals_ece(spec, k):
    seed, n, c = spec
    recs = _records(np.random.default_rng(seed), n, c, tag="shear")
    copies = [PredictionRecord(r.probs, r.predicted, r.label, "shear", 10 * j) for j in range(k) for r in recs]
    assert metrics.micro_averaged_ece(copies, 10) == pytest.approx(metrics.ece(recs, 10), abs=1e-14)


@settings(max_examples=60, deadline=None)
@given(record_sets)
def test_ece_fixed_point(spec):
    seed, n, _ = spec
    rng = np.random.default_rng(seed)
    conf = rng.uniform(0.5, 1.0, n)
    correct = rng.random(n) < 0.7
    counts, _, hits = metrics._bin_sums(conf, correct, 10)
    bins = metrics.bin_indices(conf, 10)
    acc = (hits / np.maximum(counts, 1))[bins - 1]
    # every confidence replaced by its bin's accuracy; accuracy 0 or 1 stays in a consistent bin
    assert metrics.ece_from_arrays(acc, correct, 1) == pytest.approx(abs(np.mean(correct) - np.mean(acc)), abs=1e-12)
    same_bin = metrics.bin_indices(acc, 10) == bins
    if same_bin.all():
        assert metrics.ece_from_arrays(acc, correct, 10) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000))
def test_entropy_bounded_by_log_c(c, seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(c))
    assert metrics.predictive_entropy(p) <= math.log(c) + 1e-12
    assert metrics.predictive_entropy(np.full(c, 1 / c)) == pytest.approx(math.log(c), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 20.0))
def test_temperature_preserves_argmax(seed, t):
    z = np.random.default_rng(seed).standard_normal((20, 5))
    p = metrics.apply_temperature(metrics.TemperatureScaler(t), z)
    np.testing.assert_array_equal(p.argmax(1), z.argmax(1))
