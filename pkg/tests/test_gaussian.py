import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from htsr.errors import ContractViolation, NotPositiveDefiniteError, SingularPushforwardError
from htsr.gaussian import Gaussian, affine_pushforward, cholesky, condition, log_pdf, sample


def random_spd(rng, d, ridge=0.1):
    B = rng.normal(size=(d, d))
    return B @ B.T + ridge * np.eye(d)


# -- log_pdf ---------------------------------------------------------------

def test_log_pdf_standard_normal_at_mode():
    assert log_pdf(Gaussian([0.0], [[1.0]]), [0.0]) == pytest.approx(-0.918939, abs=1e-6)


def test_log_pdf_2d_identity():
    assert log_pdf(Gaussian([0, 0], np.eye(2)), [0, 0]) == pytest.approx(-1.837877, abs=1e-6)


def test_log_pdf_scalar_textbook_formula():
    # N(1, 4) at 3: -0.5 ln(2 pi 4) - 0.5 (3-1)^2/4
    expected = -0.5 * math.log(8 * math.pi) - 0.5
    assert expected == pytest.approx(-2.112086, abs=1e-6)
    assert log_pdf(Gaussian([1.0], [[4.0]]), [3.0]) == pytest.approx(expected, abs=1e-12)


def test_log_pdf_dimension_mismatch():
    with pytest.raises(ContractViolation):
        log_pdf(Gaussian([0, 0], np.eye(2)), [0, 0, 0])


def test_log_pdf_batch_matches_pointwise():
    rng = np.random.default_rng(0)
    g = Gaussian(rng.normal(size=3), random_spd(rng, 3))
    pts = rng.normal(size=(7, 3))
    batch = log_pdf(g, pts)
    assert batch.shape == (7,)
    np.testing.assert_allclose(batch, [log_pdf(g, p) for p in pts], rtol=0, atol=1e-12)


def test_log_pdf_agrees_with_scipy():
    from scipy.stats import multivariate_normal

    rng = np.random.default_rng(1)
    cov = random_spd(rng, 4)
    mu = rng.normal(size=4)
    x = rng.normal(size=4)
    assert log_pdf(Gaussian(mu, cov), x) == pytest.approx(multivariate_normal(mu, cov).logpdf(x), abs=1e-10)


def test_density_integrates_to_one_1d():
    g = Gaussian([0.3], [[2.0]])
    xs = np.linspace(0.3 - 8 * math.sqrt(2), 0.3 + 8 * math.sqrt(2), 4001)
    mass = np.trapezoid(np.exp(log_pdf(g, xs[:, None])), xs)
    assert mass == pytest.approx(1.0, abs=1e-4)


def test_density_integrates_to_one_2d():
    g = Gaussian([0, 1], [[1.0, 0.3], [0.3, 0.5]])
    a = np.linspace(-8, 8, 401)
    b = np.linspace(1 - 8 * math.sqrt(0.5), 1 + 8 * math.sqrt(0.5), 401)
    X, Y = np.meshgrid(a, b, indexing="ij")
    dens = np.exp(log_pdf(g, np.column_stack([X.ravel(), Y.ravel()]))).reshape(X.shape)
    mass = np.trapezoid(np.trapezoid(dens, b, axis=1), a)
    assert mass == pytest.approx(1.0, abs=1e-4)


# -- construction ----------------------------------------------------------

def test_construction_symmetrizes_exactly():
    cov = np.array([[2.0, 0.5 + 1e-12], [0.5, 1.0]])
    g = Gaussian([0, 0], cov)
    assert np.max(np.abs(g.cov - g.cov.T)) == 0.0


def test_construction_rejects_indefinite():
    with pytest.raises(NotPositiveDefiniteError):
        Gaussian([0, 0], [[1.0, 2.0], [2.0, 1.0]])


def test_construction_rejects_shape_mismatch():
    with pytest.raises(ContractViolation):
        Gaussian([0, 0, 0], np.eye(2))


def test_gaussian_is_immutable():
    g = Gaussian([0.0], [[1.0]])
    with pytest.raises(ValueError):
        g.mean[0] = 1.0
    with pytest.raises(AttributeError):
        g.mean = np.zeros(1)


def test_cholesky_reconstructs_with_jitter():
    # rank-one matrix needs jitter
    v = np.array([1.0, 2.0, 3.0])
    cov = np.outer(v, v)
    c = cholesky(cov)
    assert c.jitter_used > 0
    recon = c.lower @ c.lower.T
    np.testing.assert_allclose(recon, cov + c.jitter_used * np.eye(3), rtol=1e-8, atol=1e-12)


def test_cholesky_plain_when_pd():
    c = cholesky(np.eye(3) * 2.0)
    assert c.jitter_used == 0.0


# -- pushforward -----------------------------------------------------------

def test_pushforward_identity():
    rng = np.random.default_rng(2)
    g = Gaussian(rng.normal(size=3), random_spd(rng, 3))
    p = affine_pushforward(g, np.eye(3))
    np.testing.assert_array_equal(p.mean, g.mean)
    np.testing.assert_allclose(p.cov, g.cov, rtol=0, atol=1e-15)


def test_pushforward_sum_of_unit_normals():
    p = affine_pushforward(Gaussian([0, 0], np.eye(2)), [[1, 1]])
    assert p.mean[0] == 0.0 and p.cov[0, 0] == 2.0


def test_pushforward_correlated_sum_and_sampling_oracle():
    g = Gaussian([1, 2], [[1, 0.5], [0.5, 1]])
    p = affine_pushforward(g, [[1, 1]])
    assert p.mean[0] == pytest.approx(3.0) and p.cov[0, 0] == pytest.approx(3.0)
    s = sample(g, 11, 10**6).sum(axis=1)
    assert s.mean() == pytest.approx(3.0, abs=1e-2)
    assert s.var() == pytest.approx(3.0, abs=1e-2)


def test_pushforward_singular():
    # a zero map leaves nothing for a relative jitter to scale against
    with pytest.raises(SingularPushforwardError):
        affine_pushforward(Gaussian([0, 0], np.eye(2)), [[0, 0]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_pushforward_composition(seed):
    rng = np.random.default_rng(seed)
    g = Gaussian(rng.normal(size=4), random_spd(rng, 4, ridge=0.5))
    A = rng.normal(size=(3, 4))
    B = rng.normal(size=(2, 3))
    two = affine_pushforward(affine_pushforward(g, A), B)
    one = affine_pushforward(g, B @ A)
    scale = np.max(np.abs(one.cov))
    np.testing.assert_allclose(two.mean, one.mean, atol=1e-10 * max(1, np.max(np.abs(one.mean))))
    np.testing.assert_allclose(two.cov, one.cov, atol=1e-10 * scale)


# -- conditioning ----------------------------------------------------------

def test_condition_bivariate():
    c = condition(Gaussian([0, 0], [[1, 0.5], [0.5, 1]]), [0], [1.0])
    assert c.mean[0] == pytest.approx(0.5, abs=1e-14)
    assert c.cov[0, 0] == pytest.approx(0.75, abs=1e-14)


def test_condition_independent_blocks():
    cov = np.diag([1.0, 2.0, 3.0])
    c = condition(Gaussian([1, 2, 3], cov), [1], [10.0])
    np.testing.assert_allclose(c.mean, [1, 3])
    np.testing.assert_allclose(c.cov, np.diag([1.0, 3.0]))


def test_condition_empty_returns_joint():
    g = Gaussian([1, 2], np.eye(2))
    assert condition(g, [], []) is g


def test_condition_everything_observed_is_an_error():
    with pytest.raises(ContractViolation):
        condition(Gaussian([1, 2], np.eye(2)), [0, 1], [0, 0])


def test_condition_rejects_repeated_indices():
    with pytest.raises(ContractViolation):
        condition(Gaussian([1, 2, 3], np.eye(3)), [0, 0], [0, 0])


def test_condition_matches_grid_normalization():
    rng = np.random.default_rng(3)
    g = Gaussian(rng.normal(size=3), random_spd(rng, 3, ridge=0.5))
    vals = g.mean[:2] + np.array([0.4, -0.3])
    c = condition(g, [0, 1], vals)
    sd = math.sqrt(g.cov[2, 2])
    xs = np.linspace(g.mean[2] - 10 * sd, g.mean[2] + 10 * sd, 20001)
    pts = np.column_stack([np.full_like(xs, vals[0]), np.full_like(xs, vals[1]), xs])
    w = np.exp(log_pdf(g, pts))
    w /= w.sum()
    m = w @ xs
    v = w @ (xs - m) ** 2
    assert m == pytest.approx(c.mean[0], abs=1e-3)
    assert v == pytest.approx(c.cov[0, 0], abs=1e-3)


# -- sampling --------------------------------------------------------------

def test_sample_moments():
    s = sample(Gaussian([0.0], [[1.0]]), 5, 10**6)[:, 0]
    assert abs(s.mean()) < 0.005
    assert abs(s.var() - 1) < 0.01


def test_sample_narrow_width():
    s = sample(Gaussian([2.0, -1.0], 1e-9 * np.eye(2)), 0, 1000)
    assert np.max(np.abs(s - [2.0, -1.0])) < 1e-3


def test_sample_deterministic():
    g = Gaussian([0, 1], [[1, 0.2], [0.2, 2]])
    np.testing.assert_array_equal(sample(g, 42, 10), sample(g, 42, 10))


def test_sample_count_must_be_positive():
    with pytest.raises(ContractViolation):
        sample(Gaussian([0.0], [[1.0]]), 0, 0)
