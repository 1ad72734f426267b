import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from privsynth.dpcore import (
    ClipConfig,
    NoiseSource,
    SanitizeError,
    clip_rows,
    clip_vector,
    perturb_histogram,
    sanitize_batch,
)

finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(g=arrays(np.float64, st.integers(1, 20), elements=finite), c=st.floats(1e-3, 100.0))
def test_clip_never_exceeds_bound(g, c):
    cfg = ClipConfig(c)
    out = clip_vector(g, cfg)
    assert np.linalg.norm(out) <= c
    if np.linalg.norm(g) <= c:
        np.testing.assert_array_equal(out, g)
    else:
        # direction is kept
        cos = out @ g / (np.linalg.norm(out) * np.linalg.norm(g))
        assert cos == pytest.approx(1.0, abs=1e-12)


def test_clip_rows_matches_vector(rng):
    G = rng.normal(scale=3.0, size=(50, 7))
    cfg = ClipConfig(1.0)
    rows = clip_rows(G, cfg)
    for g, r in zip(G, rows):
        np.testing.assert_allclose(r, clip_vector(g, cfg), rtol=1e-15, atol=0)
    assert np.all(np.linalg.norm(rows, axis=1) <= 1.0)


def test_clip_rejects_nonfinite():
    with pytest.raises(SanitizeError):
        clip_vector(np.array([1.0, np.nan]), ClipConfig(1.0))
    with pytest.raises(SanitizeError):
        ClipConfig(0.0)


def test_sanitize_without_noise_is_clipped_mean(rng):
    G = rng.normal(scale=2.0, size=(32, 5))
    cfg = ClipConfig(0.5)
    out = sanitize_batch(G, cfg, 0.0, None)
    np.testing.assert_allclose(out, clip_rows(G, cfg).mean(axis=0), atol=1e-12)


def test_sanitize_noise_scale():
    cfg = ClipConfig(2.0)
    G = np.zeros((4, 20000))
    out = sanitize_batch(G, cfg, 3.0, NoiseSource(7), denominator=8.0)
    assert out.std() == pytest.approx(3.0 * 2.0 / 8.0, rel=0.03)


def test_sanitize_empty_batch():
    cfg = ClipConfig(1.0)
    with pytest.raises(SanitizeError):
        sanitize_batch(np.zeros((0, 3)), cfg, 1.0, NoiseSource(0))
    out = sanitize_batch([], cfg, 1.0, NoiseSource(0), denominator=4.0, dim=3)
    assert out.shape == (3,) and np.all(out != 0)


def test_sanitize_requires_noise_source():
    with pytest.raises(SanitizeError):
        sanitize_batch(np.ones((2, 2)), ClipConfig(1.0), 1.0, None)


def test_sensitivity_of_sum_is_clip_bound(rng):
    # adding one arbitrary example moves the clipped sum by at most C
    cfg = ClipConfig(1.5)
    G = rng.normal(scale=10, size=(10, 4))
    extra = rng.normal(scale=100, size=(1, 4))
    a = clip_rows(G, cfg).sum(axis=0)
    b = clip_rows(np.vstack([G, extra]), cfg).sum(axis=0)
    assert np.linalg.norm(a - b) <= 1.5


def test_noise_source_reproducible_and_independent():
    a = NoiseSource(3).normal(5)
    b = NoiseSource(3).normal(5)
    np.testing.assert_array_equal(a, b)
    c = NoiseSource(3).spawn(1).normal(5)
    d = NoiseSource(3).spawn(2).normal(5)
    assert not np.array_equal(a, c) and not np.array_equal(c, d)
    with pytest.raises(SanitizeError):
        NoiseSource(0, stream=-1)


def test_perturb_histogram():
    sd = np.array([5.0, 0.0, 3.0])
    np.testing.assert_array_equal(perturb_histogram(sd, 2, 0.0, None, allow_zero=True), sd)
    with pytest.raises(SanitizeError):
        perturb_histogram(sd, 2, 0.0, None)
    with pytest.raises(SanitizeError):
        perturb_histogram(np.array([-1.0]), 1, 1.0, NoiseSource(0))
    with pytest.raises(SanitizeError):
        perturb_histogram(sd, 0, 1.0, NoiseSource(0))
    big = np.zeros(40000)
    noisy = perturb_histogram(big, 4, 3.0, NoiseSource(1))
    assert noisy.std() == pytest.approx(np.sqrt(4) * 3.0, rel=0.03)


def test_clip_bound_holds_under_both_norm_evaluations():
    rng = np.random.default_rng(11)
    G = rng.standard_normal((5000, 32)) * 10.0 ** rng.uniform(-3, 4, size=(5000, 1))
    out = clip_rows(G, ClipConfig(1.0))
    assert np.all(np.linalg.norm(out, axis=1) <= 1.0)
    assert all(np.linalg.norm(r) <= 1.0 for r in out)
