import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from htsr import gp
from htsr import kernels as K
from htsr.errors import ContractViolation, FitFailureError
from htsr.gaussian import Gaussian, condition, log_pdf
from htsr.harness import gen_experiment_a
from htsr.kernels import RBF, Param, Periodic, parse_kernel

TWO_PI = 2 * math.pi


def random_instance(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(2, 16))
    Ts = int(rng.integers(1, 6))
    xs = np.sort(rng.uniform(0, 10, T))
    ys = np.sin(xs) + 0.3 * rng.normal(size=T)
    tx = rng.uniform(-2, 12, Ts)
    k = Periodic(Param.make(rng.uniform(0.5, 2)), Param.make(rng.uniform(0.5, 2)), Param.make(rng.uniform(3, 8))) + RBF(
        Param.make(rng.uniform(0.1, 1)), Param.make(rng.uniform(0.5, 4))
    )
    return xs, ys, tx, k, float(rng.uniform(0.01, 0.5))


def joint_oracle(m: gp.GpModel, tx):
    """Explicit joint over (y, f*) conditioned on y."""
    xs = m.train_x
    n = xs.size
    allx = np.concatenate([xs, tx])
    cov = K.gram(m.kernel, allx)
    cov[:n, :n] += m.noise_var * np.eye(n)
    joint = Gaussian(np.full(allx.size, m.mean_const), cov)
    return condition(joint, np.arange(n), m.train_y)


# -- log marginal likelihood ------------------------------------------------

def test_lml_single_observation():
    m = gp.build([0.0], [3.0], RBF(Param.make(0.5), Param.make(1.0)), 0.5, mean_const=3.0)
    assert gp.log_marginal_likelihood(m) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_lml_matches_gaussian_log_pdf(seed):
    xs, ys, _, k, noise = random_instance(seed)
    m = gp.build(xs, ys, k, noise)
    cov = K.gram(k, m.train_x) + noise * np.eye(m.train_x.size)
    ref = log_pdf(Gaussian(np.full(m.train_x.size, m.mean_const), cov), m.train_y)
    assert gp.log_marginal_likelihood(m) == pytest.approx(ref, abs=1e-10)


def test_lml_decreases_with_excess_noise():
    xs = np.linspace(0, 5, 20)
    ys = np.sin(xs)
    k = RBF()
    vals = [gp.log_marginal_likelihood(gp.build(xs, ys, k, s2)) for s2 in (1.0, 3.0, 10.0, 30.0, 100.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


# -- gradients --------------------------------------------------------------

@pytest.mark.parametrize("seed", range(8))
def test_gradient_matches_central_differences(seed):
    xs, ys, _, k, noise = random_instance(seed)
    noise_p = K.Param(noise, *gp.NOISE_BOUNDS)
    _, theta = K.pack(k)
    theta = np.append(theta, math.log(noise))
    c = float(np.mean(ys))
    _, grad = gp.lml_and_grad(k, noise_p, xs, ys, c, theta)
    h = 1e-5
    for i in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        fd = (gp.lml_and_grad(k, noise_p, xs, ys, c, up)[0] - gp.lml_and_grad(k, noise_p, xs, ys, c, dn)[0]) / (2 * h)
        assert grad[i] == pytest.approx(fd, rel=1e-4, abs=1e-6)


# -- fit --------------------------------------------------------------------

def test_fit_constant_data_collapses_noise():
    xs = np.linspace(0, 3, 10)
    ys = np.full(10, 2.5)
    template = RBF()
    m = gp.fit(xs, ys, template, 0.1, seed=0)
    init = gp.log_marginal_likelihood(gp.build(xs, ys, template, 0.1))
    assert m.noise_var < 1e-4
    assert gp.log_marginal_likelihood(m) >= init
    assert m.mean_const == 2.5


def test_fit_experiment_a_recovers_sine():
    ds = gen_experiment_a(0.1, 50, seed=123)
    m = gp.fit(ds.train_t, ds.y[0], parse_kernel("periodic(period=fixed(6.283185307179586))"), 0.1, seed=0)
    pred = gp.predict(m, ds.train_t)
    rmse = math.sqrt(np.mean((pred.mean - np.sin(ds.train_t)) ** 2))
    assert rmse < 0.1


def test_fit_is_deterministic():
    ds = gen_experiment_a(0.2, 30, seed=9)
    a = gp.fit(ds.train_t, ds.y[1], Periodic(period=Param.make(TWO_PI, fixed=True)), 0.1, seed=4)
    b = gp.fit(ds.train_t, ds.y[1], Periodic(period=Param.make(TWO_PI, fixed=True)), 0.1, seed=4)
    assert a.kernel == b.kernel and a.noise == b.noise


def test_fit_no_worse_than_deterministic_starts():
    xs, ys, _, k, _ = random_instance(3)
    m = gp.fit(xs, ys, k, 0.1, seed=1)
    at_template = gp.log_marginal_likelihood(gp.build(xs, ys, k, 0.1))
    assert gp.log_marginal_likelihood(m) >= at_template - 1e-12


def test_fit_respects_bounds_and_fixed():
    ds = gen_experiment_a(0.5, 20, seed=2)
    k = parse_kernel("periodic(period=fixed(6.283185307179586), ell=bounded(1, 0.5, 2))")
    m = gp.fit(ds.train_t, ds.y[0], k, 0.1, seed=0)
    assert m.kernel.period.value == TWO_PI
    assert 0.5 <= m.kernel.lengthscale.value <= 2
    assert gp.NOISE_BOUNDS[0] <= m.noise_var <= gp.NOISE_BOUNDS[1]


def test_fit_needs_two_points():
    with pytest.raises(ContractViolation):
        gp.fit([1.0], [2.0], RBF())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fit_failure_carries_diagnostics():
    # every objective evaluation overflows
    k = RBF(Param.make(1.0, fixed=True), Param.make(1.0, fixed=True))
    with pytest.raises(FitFailureError) as info:
        gp.fit([0.0, 1.0], [1e200, -1e200], k, 1e-8, fix_noise=True)
    assert info.value.diagnostics and info.value.category == "fit-failure"


def test_duplicate_inputs_are_averaged():
    m = gp.build([1.0, 0.0, 1.0], [2.0, 5.0, 4.0], RBF(), 0.1)
    np.testing.assert_array_equal(m.train_x, [0.0, 1.0])
    np.testing.assert_array_equal(m.train_y, [5.0, 3.0])


def test_relative_bounds_scale_with_data():
    xs = np.linspace(0, 20, 40)
    ys = 1e3 * np.sin(xs)
    m = gp.fit(xs, ys, RBF(), 0.1, seed=0, relative_bounds=True)
    assert m.kernel.variance.upper == pytest.approx(K.DEFAULT_BOUNDS[1] * np.var(ys))


# -- predict ----------------------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_predict_equals_joint_conditioning(seed):
    xs, ys, tx, k, noise = random_instance(seed)
    m = gp.build(xs, ys, k, noise)
    pred = gp.predict(m, tx)
    ref = joint_oracle(m, tx)
    np.testing.assert_allclose(pred.mean, ref.mean, rtol=0, atol=1e-8)
    np.testing.assert_allclose(pred.dist.cov, ref.cov, rtol=0, atol=1e-8)


def test_noise_floor_interpolates():
    xs = np.linspace(0, 5, 12)
    ys = np.cos(xs)
    m = gp.build(xs, ys, RBF(Param.make(1.0), Param.make(1.0)), gp.NOISE_BOUNDS[0])
    pred = gp.predict(m, xs)
    assert np.max(np.abs(pred.mean - ys)) < 1e-4
    assert np.max(pred.var) < 1e-4


def test_far_extrapolation_reverts_to_prior():
    m = gp.build(np.linspace(0, 2, 5), np.arange(5.0), RBF(Param.make(1.7), Param.make(0.5)), 0.01)
    pred = gp.predict(m, [200.0])
    assert pred.var[0] == pytest.approx(1.7, abs=1e-6)
    assert pred.mean[0] == pytest.approx(m.mean_const, abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_posterior_psd_and_below_prior(seed):
    xs, ys, tx, k, noise = random_instance(seed)
    m = gp.build(xs, ys, k, noise)
    pred = gp.predict(m, tx)
    assert np.min(np.linalg.eigvalsh(pred.dist.cov)) >= -1e-8
    prior = np.diag(K.gram(k, tx))
    assert np.all(pred.var <= prior + 1e-8)


def test_predict_needs_inputs():
    m = gp.build([0.0, 1.0], [0.0, 1.0], RBF(), 0.1)
    with pytest.raises(ContractViolation):
        gp.predict(m, [])


def test_fit_predict_invariant_to_time_shift():
    # dyadic inputs and shift keep every pairwise difference exact
    rng = np.random.default_rng(5)
    xs = np.arange(24) / 4.0
    ys = np.sin(xs) + 0.2 * rng.normal(size=xs.size)
    tx = 6.0 + np.arange(8) / 4.0
    k = parse_kernel("periodic(period=fixed(6.283185307179586))")
    shift = 64.0
    a = gp.predict(gp.fit(xs, ys, k, 0.1, seed=3), tx)
    b = gp.predict(gp.fit(xs + shift, ys, k, 0.1, seed=3), tx + shift)
    np.testing.assert_allclose(b.mean, a.mean, rtol=0, atol=1e-8)
    np.testing.assert_allclose(b.dist.cov, a.dist.cov, rtol=0, atol=1e-8)


# -- marginals --------------------------------------------------------------

def test_marginals_reassemble_prediction():
    xs, ys, tx, k, noise = random_instance(1)
    pred = gp.predict(gp.build(xs, ys, k, noise), np.linspace(0, 5, 4))
    margs = [gp.marginal_at(pred, i) for i in range(4)]
    np.testing.assert_array_equal([g.mean[0] for g in margs], pred.mean)
    np.testing.assert_array_equal([g.cov[0, 0] for g in margs], np.diag(pred.dist.cov))
    with pytest.raises(IndexError):
        gp.marginal_at(pred, 4)


def test_shifted_moves_mean_only():
    pred = gp.predict(gp.build([0.0, 1.0], [0.0, 1.0], RBF(), 0.1), [0.5, 2.0])
    s = gp.shifted(pred, 1.5)
    np.testing.assert_allclose(s.mean - pred.mean, 1.5)
    np.testing.assert_array_equal(s.dist.cov, pred.dist.cov)
