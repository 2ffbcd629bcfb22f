"""Gaussian-process regression with a constant mean and homoscedastic noise.

Hyperparameters (kernel plus noise variance) are fitted by maximizing the
log marginal likelihood with multi-start L-BFGS-B in log space, using
analytic gradients. Predictions are over the latent function values; the
observation noise is not added to the predictive covariance.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize

from . import kernels as K
from .errors import ContractViolation, FitFailureError, NotPositiveDefiniteError
from .gaussian import JITTER_LADDER, LOG_2PI, CholeskyFactor, Gaussian, cholesky

log = logging.getLogger(__name__)

NOISE_BOUNDS = (1e-8, 1e2)
N_STARTS = 8


@dataclass(frozen=True)
class GpModel:
    train_x: np.ndarray
    train_y: np.ndarray
    kernel: K.Kernel
    noise: K.Param
    mean_const: float
    chol: CholeskyFactor
    alpha: np.ndarray  # (K + noise I)^-1 (y - c)

    @property
    def noise_var(self) -> float:
        return self.noise.value


@dataclass(frozen=True)
class GpPrediction:
    test_x: np.ndarray
    dist: Gaussian

    @property
    def mean(self) -> np.ndarray:
        return self.dist.mean

    @property
    def var(self) -> np.ndarray:
        return self.dist.var


def _clean_inputs(xs, ys) -> tuple[np.ndarray, np.ndarray]:
    xs = np.asarray(xs, dtype=float).reshape(-1)
    ys = np.asarray(ys, dtype=float).reshape(-1)
    if xs.size != ys.size:
        raise ContractViolation(f"{xs.size} inputs but {ys.size} targets")
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise ContractViolation("training data must be finite")
    ux, inv = np.unique(xs, return_inverse=True)
    if ux.size == xs.size:
        order = np.argsort(xs, kind="stable")
        return xs[order], ys[order]
    # repeated time stamps: keep one point per stamp at the average target
    uy = np.bincount(inv, weights=ys) / np.bincount(inv)
    return ux, uy


def build(xs, ys, kernel: K.Kernel, noise: K.Param | float, mean_const: float | None = None) -> GpModel:
    """Condition a GP with given hyperparameters on training data."""
    xs, ys = _clean_inputs(xs, ys)
    if xs.size < 1:
        raise ContractViolation("need at least one training point")
    if not isinstance(noise, K.Param):
        noise = K.Param(float(noise), min(NOISE_BOUNDS[0], noise), max(NOISE_BOUNDS[1], noise))
    c = float(np.mean(ys)) if mean_const is None else float(mean_const)
    Ky = K.gram(kernel, xs) + noise.value * np.eye(xs.size)
    chol = cholesky(Ky)
    alpha = chol.solve(ys - c)
    return GpModel(xs, ys, kernel, noise, c, chol, alpha)


def log_marginal_likelihood(m: GpModel) -> float:
    """``log N(y | c, K + noise I)`` evaluated through the cached factor."""
    r = m.train_y - m.mean_const
    return float(-0.5 * (r @ m.alpha) - 0.5 * m.chol.log_det() - 0.5 * r.size * LOG_2PI)


def lml_and_grad(
    kernel: K.Kernel, noise: K.Param, xs: np.ndarray, ys: np.ndarray, mean_const: float, log_theta
) -> tuple[float, np.ndarray]:
    """Log marginal likelihood and its gradient w.r.t. the free log-hyperparameters.

    ``log_theta`` lists the kernel's free log-values (tree order) followed by
    the log noise variance when the noise is not fixed.
    """
    log_theta = np.asarray(log_theta, dtype=float)
    nk = len(kernel.free_params())
    kern = K.unpack(kernel, log_theta[:nk])
    noise_var = noise.value if noise.fixed else math.exp(log_theta[nk])
    Kx, dKs = kern.gram_and_grads(xs)
    n = xs.size
    Ky = Kx + noise_var * np.eye(n)
    chol = cholesky(Ky)
    r = ys - mean_const
    alpha = chol.solve(r)
    lml = -0.5 * (r @ alpha) - 0.5 * chol.log_det() - 0.5 * n * LOG_2PI
    Linv = solve_triangular(chol.lower, np.eye(n), lower=True, check_finite=False)
    Kinv = Linv.T @ Linv
    W = np.outer(alpha, alpha) - Kinv
    grad = [0.5 * np.sum(W * dK) for dK in dKs]
    if not noise.fixed:
        grad.append(0.5 * noise_var * np.trace(W))
    return float(lml), np.array(grad)


def _with_relative_variance_bounds(kernel: K.Kernel, noise: K.Param, scale: float):
    """Rescale the bounds of every output-scale hyperparameter by ``scale``."""
    updates = {}
    for name, p in kernel.params():
        if name.endswith(".variance") and not p.fixed:
            lo, hi = p.lower * scale, p.upper * scale
            updates[name] = K.Param(min(max(p.value * scale, lo), hi), lo, hi)
    kernel = kernel.with_params(updates)
    if not noise.fixed:
        lo, hi = noise.lower * scale, noise.upper * scale
        noise = K.Param(min(max(noise.value * scale, lo), hi), lo, hi)
    return kernel, noise


def _data_scaled_start(kernel: K.Kernel, noise: K.Param, data_var: float) -> np.ndarray:
    """Log start point with output scales at the data variance and noise at a tenth of it."""
    if data_var <= 0:
        data_var = 1.0
    theta = []
    for name, p in kernel.free_params():
        v = data_var if name.endswith(".variance") else p.value
        theta.append(math.log(min(max(v, p.lower), p.upper)))
    if not noise.fixed:
        theta.append(math.log(min(max(0.1 * data_var, noise.lower), noise.upper)))
    return np.array(theta)


def fit(
    xs,
    ys,
    kernel_template: K.Kernel,
    noise_init: float = 0.1,
    seed=0,
    *,
    n_starts: int = N_STARTS,
    noise_bounds: tuple[float, float] = NOISE_BOUNDS,
    fix_noise: bool = False,
    relative_bounds: bool = False,
) -> GpModel:
    """Maximum-likelihood fit of the kernel and noise hyperparameters.

    Starts: the template's own values, the same with output scales moved to
    the data variance, then log-uniform draws within the bounds from a
    generator seeded by ``seed`` (``n_starts`` in total). The best local
    optimum (never worse than its start) wins.

    With ``relative_bounds`` the bounds and initial values of output-scale
    and noise variances are multiplied by the sample variance of ``ys``, which
    makes the default bounds meaningful for data in arbitrary units.
    """
    xs, ys = _clean_inputs(xs, ys)
    if xs.size < 2:
        raise ContractViolation("fit needs at least two distinct training points")
    c = float(np.mean(ys))
    if fix_noise:
        noise = K.Param.make(noise_init, fixed=True)
    else:
        lo, hi = noise_bounds
        noise = K.Param(min(max(noise_init, lo), hi), lo, hi)
    kernel = kernel_template
    if relative_bounds:
        scale = float(np.var(ys))
        if scale > 0:
            kernel, noise = _with_relative_variance_bounds(kernel, noise, scale)

    _, theta0 = K.pack(kernel)
    bounds = K.log_bounds(kernel)
    if not noise.fixed:
        theta0 = np.append(theta0, math.log(noise.value))
        bounds.append((math.log(noise.lower), math.log(noise.upper)))
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    def neg(theta):
        try:
            v, g = lml_and_grad(kernel, noise, xs, ys, c, theta)
        except NotPositiveDefiniteError:
            return 1e25, np.zeros_like(theta)
        if not np.isfinite(v) or not np.all(np.isfinite(g)):
            return 1e25, np.zeros_like(theta)
        return -v, -g

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    starts = [theta0]
    if theta0.size:
        scaled = _data_scaled_start(kernel, noise, float(np.var(ys)))
        if n_starts > 1 and not np.array_equal(scaled, theta0):
            starts.append(scaled)
        starts += [rng.uniform(lo, hi) for _ in range(n_starts - len(starts))]

    best_theta, best_val = None, np.inf
    diagnostics = []
    for i, start in enumerate(starts):
        f0, _ = neg(start)
        if theta0.size:
            res = minimize(neg, start, jac=True, method="L-BFGS-B", bounds=bounds)
            theta, val = (res.x, res.fun) if res.fun <= f0 else (start, f0)
        else:
            theta, val = start, f0
        diagnostics.append({"start": i, "initial": -f0, "final": -val})
        if val < best_val:
            best_theta, best_val = theta, val
    if best_theta is None or best_val >= 1e25:
        raise FitFailureError("every optimizer start failed to factorize", diagnostics)

    nk = len(kernel.free_params())
    fitted = K.unpack(kernel, best_theta[:nk])
    if not noise.fixed:
        noise = noise.with_value(math.exp(best_theta[nk]))
    log.debug("fit %s noise=%.3g lml=%.4f", fitted, noise.value, -best_val)
    return build(xs, ys, fitted, noise, c)


def predict(m: GpModel, test_x) -> GpPrediction:
    """Posterior over the latent function at ``test_x``."""
    tx = np.asarray(test_x, dtype=float).reshape(-1)
    if tx.size == 0:
        raise ContractViolation("predict needs at least one test input")
    Ksx = m.kernel(tx, m.train_x)
    mean = m.mean_const + Ksx @ m.alpha
    v = solve_triangular(m.chol.lower, Ksx.T, lower=True, check_finite=False)
    prior = K.gram(m.kernel, tx)
    cov = prior - v.T @ v
    try:
        return GpPrediction(tx, Gaussian(mean, cov))
    except NotPositiveDefiniteError:
        pass
    # Near-interpolating fits leave a posterior smaller than the round-off of
    # prior - v'v, which scales with the prior variance: floor relative to that.
    scale = float(np.mean(np.diag(prior)))
    eye = np.eye(tx.size)
    for rel in JITTER_LADDER:
        try:
            return GpPrediction(tx, Gaussian(mean, cov + rel * scale * eye))
        except NotPositiveDefiniteError:
            continue
    raise NotPositiveDefiniteError(f"posterior covariance at {tx.size} inputs is not positive definite")


def marginal_at(p: GpPrediction, t_index: int) -> Gaussian:
    if not -p.dist.dim <= t_index < p.dist.dim:
        raise IndexError(f"time index {t_index} out of range for {p.dist.dim} test points")
    return Gaussian([p.dist.mean[t_index]], [[p.dist.cov[t_index, t_index]]])


def shifted(p: GpPrediction, delta: float) -> GpPrediction:
    """Same prediction with every mean moved by ``delta``."""
    return replace(p, dist=Gaussian(p.dist.mean + delta, p.dist.cov))
