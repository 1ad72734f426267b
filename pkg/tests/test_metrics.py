import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from privsynth import metrics
from privsynth.data import LabeledDataset, load_embeddings
from privsynth.metrics import GaussianFit, MetricError, frechet_distance, sds


def _rand_fit(rng, d):
    A = rng.normal(size=(d, d))
    return GaussianFit(rng.normal(size=d), A @ A.T + 0.1 * np.eye(d))


def test_frechet_identities(rng):
    a = _rand_fit(rng, 4)
    assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-10)
    b = _rand_fit(rng, 4)
    assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), rel=1e-10)
    one = frechet_distance(GaussianFit([0.0], [[1.0]]), GaussianFit([1.0], [[1.0]]))
    assert one == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(1, 6))
def test_frechet_matches_scipy_sqrtm(seed, d):
    rng = np.random.default_rng(seed)
    a, b = _rand_fit(rng, d), _rand_fit(rng, d)
    covmean = scipy.linalg.sqrtm(a.cov @ b.cov).real
    want = np.sum((a.mean - b.mean) ** 2) + np.trace(a.cov + b.cov - 2 * covmean)
    assert frechet_distance(a, b) == pytest.approx(want, rel=1e-6, abs=1e-8)


def test_frechet_diagonal_closed_form():
    a = GaussianFit([0.0, 0.0], np.diag([4.0, 1.0]))
    b = GaussianFit([1.0, 2.0], np.diag([1.0, 9.0]))
    # sum (s_a - s_b)^2 over standard deviations plus squared mean gap
    assert frechet_distance(a, b) == pytest.approx(5 + (2 - 1) ** 2 + (1 - 3) ** 2)


def test_gaussian_fit_validation():
    with pytest.raises(MetricError):
        GaussianFit([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(MetricError):
        GaussianFit([0.0, 0.0], [[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(MetricError):
        metrics.fit_gaussian(np.zeros((1, 3)))
    with pytest.raises(MetricError):
        frechet_distance(GaussianFit([0.0], [[1.0]]), GaussianFit([0.0, 0.0], np.eye(2)))


def test_fit_gaussian_biased_covariance(rng):
    X = rng.normal(size=(50, 3))
    fit = metrics.fit_gaussian(X)
    np.testing.assert_allclose(fit.cov, np.cov(X.T, bias=True), atol=1e-12)


def test_sds_bounds_and_symmetry(rng):
    table = load_embeddings()
    names = list(table.vectors)
    for _ in range(20):
        s1 = list(rng.choice(names, size=3, replace=False))
        s2 = list(rng.choice(names, size=4, replace=False))
        w1, w2 = rng.random(3), rng.random(4)
        v = sds(w1, s1, w2, s2, table)
        assert -1 - 1e-12 <= v <= 1 + 1e-12
        assert v == pytest.approx(sds(w2, s2, w1, s1, table), abs=1e-14)
    assert sds([1.0], ["zebra"], [1.0], ["zebra"], table) == pytest.approx(1.0)
    assert sds([1.0], ["horse"], [1.0], ["zebra"], table) > sds([1.0], ["horse"], [1.0], ["ship"], table)


def test_sds_input_checks():
    table = load_embeddings()
    with pytest.raises(MetricError):
        sds([], [], [1.0], ["zebra"], table)
    with pytest.raises(MetricError):
        sds([-1.0], ["zebra"], [1.0], ["bee"], table)
    with pytest.raises(MetricError):
        sds([1.0, 2.0], ["zebra"], [1.0], ["bee"], table)


def test_semantic_frequencies():
    w, n = metrics.semantic_frequencies(np.array([0, 0, 2]), ["a", "b", "c"])
    np.testing.assert_allclose(w, [2 / 3, 1 / 3])
    assert n == ["a", "c"]


def test_classification_accuracy_separable(rng):
    def make(n):
        y = rng.integers(0, 2, n)
        X = rng.normal(size=(n, 2)) + 4.0 * y[:, None]
        return LabeledDataset(X, y, n_classes=2)

    train, test = make(200), make(100)
    assert metrics.classification_accuracy(train, test) > 0.95
    assert metrics.classification_accuracy(train, test, model="mlp", epochs=100) > 0.95
    with pytest.raises(MetricError):
        metrics.classification_accuracy(train, test, model="forest")
    with pytest.raises(MetricError):
        metrics.classification_accuracy(LabeledDataset(train.features), test)


def test_sds_exactly_symmetric_and_order_invariant(rng):
    table = load_embeddings()
    names = list(table.vectors)
    for _ in range(30):
        s1 = list(rng.choice(names, 4, replace=False))
        s2 = list(rng.choice(names, 5, replace=False))
        w1, w2 = rng.random(4), rng.random(5)
        v = sds(w1, s1, w2, s2, table)
        assert v == sds(w2, s2, w1, s1, table)
        p = rng.permutation(4)
        assert v == sds(w1[p], [s1[i] for i in p], w2, s2, table)
