"""Bayesian reconciliation of bottom-level forecasts with a summary forecast.

The posterior over the bottom vector ``x`` is the product prior reweighted by
the ratio between the summary forecast density and the prior's own density
for the summary, both evaluated at ``f(x)``. For a linear ``f(x) = A x`` and
Gaussian forecasts the posterior is Gaussian and available in closed form
(:func:`reconcile_lg`); :func:`grid_posterior_moments` integrates the
general density ratio numerically and serves as an oracle for it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    ConfigError,
    ContractViolation,
    IncoherentForecastsError,
    NotPositiveDefiniteError,
    OracleFailureError,
    ZeroDensityError,
)
from .gaussian import Gaussian, affine_pushforward, cholesky, log_pdf
from .hierarchy import Hierarchy

log = logging.getLogger(__name__)

# assembled precision is rejected below this fraction of its largest eigenvalue
INDEFINITE_TOL = 1e-6
GRID_BUDGET = 10_000_000


@dataclass(frozen=True)
class BaseForecasts:
    bottom: Gaussian  # product prior over the N bottom series
    upper: Gaussian  # joint forecast of the M summaries

    def check(self, h: Hierarchy) -> None:
        if self.bottom.dim != h.n_bottom or self.upper.dim != h.n_upper:
            raise ContractViolation(
                f"forecast dimensions ({self.bottom.dim}, {self.upper.dim}) do not match "
                f"hierarchy ({h.n_bottom}, {h.n_upper})"
            )

    @classmethod
    def from_marginals(cls, bottom_means, bottom_vars, upper_means, upper_vars) -> "BaseForecasts":
        """Product of independent bottom marginals plus independent upper marginals."""
        return cls(
            Gaussian.from_diagonal(bottom_means, bottom_vars),
            Gaussian.from_diagonal(upper_means, upper_vars),
        )


@dataclass(frozen=True)
class ReconciledPosterior:
    dist: Gaussian
    diagnostics: dict = field(default_factory=dict)


def _inverse(cov: np.ndarray) -> np.ndarray:
    c = cholesky(cov)
    inv = c.solve(np.eye(cov.shape[0]))
    return 0.5 * (inv + inv.T)


def reconcile_lg(f: BaseForecasts, h: Hierarchy) -> ReconciledPosterior:
    """Closed-form linear-Gaussian posterior.

    precision = inv(S_theta) + A' [inv(S_eta) - inv(A S_theta A')] A
    mean      = mu_theta + cov A' inv(S_eta) (mu_eta - A mu_theta)
    """
    f.check(h)
    A = h.A
    mu_t, S_t = f.bottom.mean, f.bottom.cov
    mu_e, S_e = f.upper.mean, f.upper.cov
    pushed = affine_pushforward(f.bottom, A)

    P_t = _inverse(S_t)
    P_e = _inverse(S_e)
    bracket = P_e - _inverse(pushed.cov)
    precision = P_t + A.T @ bracket @ A
    precision = 0.5 * (precision + precision.T)

    eig = np.linalg.eigvalsh(precision)
    scale = max(abs(eig[-1]), abs(eig[0]))
    diagnostics = {
        "min_eigenvalue_of_inner_bracket": float(np.linalg.eigvalsh(bracket)[0]),
        "min_eigenvalue_of_precision": float(eig[0]),
    }
    if eig[0] < -INDEFINITE_TOL * scale:
        raise IncoherentForecastsError(
            f"assembled precision is indefinite: min eigenvalue {eig[0]:.6g} "
            f"(largest magnitude {scale:.6g})",
            min_eigenvalue=float(eig[0]),
        )
    try:
        pf = cholesky(precision)
    except NotPositiveDefiniteError as exc:
        raise IncoherentForecastsError(
            f"assembled precision cannot be factorized: {exc}", min_eigenvalue=float(eig[0])
        ) from exc
    cov = pf.solve(np.eye(precision.shape[0]))
    mean = mu_t + cov @ A.T @ (P_e @ (mu_e - A @ mu_t))
    diagnostics["jitter_used"] = pf.jitter_used
    diagnostics["pd_repair_applied"] = pf.jitter_used > 0
    return ReconciledPosterior(Gaussian(mean, cov), diagnostics)


def reconcile_identity(f: BaseForecasts, h: Hierarchy) -> ReconciledPosterior:
    """Pass-through baseline: the base bottom forecast, untouched."""
    f.check(h)
    return ReconciledPosterior(f.bottom, {"jitter_used": 0.0, "pd_repair_applied": False})


Reconciler = Callable[[BaseForecasts, Hierarchy], ReconciledPosterior]

RECONCILERS: dict[str, Reconciler] = {
    "et": reconcile_lg,
    "identity": reconcile_identity,
}


def register_reconciler(name: str, fn: Reconciler) -> None:
    """Add a reconciler under ``name``; it must be a pure function of its inputs."""
    if name in RECONCILERS or name == "base":
        raise ConfigError(f"reconciler name {name!r} is already taken")
    RECONCILERS[name] = fn


def get_reconciler(name: str) -> Reconciler:
    try:
        return RECONCILERS[name]
    except KeyError:
        raise ConfigError(
            f"unknown reconciler {name!r}; available: {', '.join(sorted(RECONCILERS))}"
        ) from None


def reconcile(name: str, f: BaseForecasts, h: Hierarchy) -> ReconciledPosterior:
    return get_reconciler(name)(f, h)


# -- general density-ratio posterior --------------------------------------

@dataclass(frozen=True)
class SummaryMap:
    """A general summary map ``u = fn(x)`` with the prior density of ``u``.

    ``fn`` maps a batch ``(n, N)`` to ``(n, M)``; ``pushforward_log_pdf`` maps a
    batch ``(n, M)`` to ``n`` log-densities of ``f(x)`` under the prior.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    pushforward_log_pdf: Callable[[np.ndarray], np.ndarray]


def log_posterior_unnorm(x, f: BaseForecasts, mapping: Hierarchy | SummaryMap):
    """``log p(x) + log eta(f(x)) - log p_u(f(x))``, up to a constant.

    ``x`` is one point or a batch of shape ``(n, N)``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    if pts.shape[1] != f.bottom.dim:
        raise ContractViolation(f"point dimension {pts.shape[1]} != {f.bottom.dim}")
    if isinstance(mapping, Hierarchy):
        f.check(mapping)
        u = pts @ mapping.A.T
        pushed = affine_pushforward(f.bottom, mapping.A)
        log_pu = np.atleast_1d(log_pdf(pushed, u))
    else:
        u = np.asarray(mapping.fn(pts), dtype=float).reshape(pts.shape[0], -1)
        if u.shape[1] != f.upper.dim:
            raise ContractViolation(f"summary map returns {u.shape[1]} values, expected {f.upper.dim}")
        log_pu = np.asarray(mapping.pushforward_log_pdf(u), dtype=float).reshape(-1)
    log_prior = np.atleast_1d(log_pdf(f.bottom, pts))
    log_eta = np.atleast_1d(log_pdf(f.upper, u))
    bad = np.isneginf(log_pu) & np.isfinite(log_eta)
    if np.any(bad):
        raise ZeroDensityError(
            f"prior density of the summary is zero at f(x) = {u[np.argmax(bad)]} "
            "while the summary forecast is not"
        )
    out = log_prior + log_eta - log_pu
    return float(out[0]) if single else out


def grid_posterior_moments(
    f: BaseForecasts,
    mapping: Hierarchy | SummaryMap,
    half_width_sigmas: float = 6.0,
    points_per_dim: int = 201,
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and covariance by tensor-product quadrature.

    The grid spans ``mu_theta +- half_width_sigmas * sd_theta`` per dimension.
    Only meant for N <= 3.
    """
    n = f.bottom.dim
    if n > 3:
        raise ContractViolation(f"grid oracle supports N <= 3, got {n}")
    if points_per_dim < 51:
        raise ContractViolation(f"need at least 51 points per dimension, got {points_per_dim}")
    if points_per_dim ** n > GRID_BUDGET:
        raise ContractViolation(f"grid of {points_per_dim}^{n} points exceeds budget {GRID_BUDGET}")
    sd = np.sqrt(np.diag(f.bottom.cov))
    axes = [
        np.linspace(m - half_width_sigmas * s, m + half_width_sigmas * s, points_per_dim)
        for m, s in zip(f.bottom.mean, sd)
    ]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)

    chunk = 1_000_000
    lp = np.concatenate(
        [log_posterior_unnorm(grid[i:i + chunk], f, mapping) for i in range(0, grid.shape[0], chunk)]
    )
    if not np.any(np.isfinite(lp)):
        raise OracleFailureError("posterior has no finite mass on the grid")
    w = np.exp(lp - np.max(lp[np.isfinite(lp)]))
    w[~np.isfinite(w)] = 0.0
    mass = w.sum()
    if not mass > 0:
        raise OracleFailureError("grid missed the posterior: all weights are zero")
    w /= mass

    ends = np.zeros(points_per_dim, dtype=bool)
    ends[[0, -1]] = True
    edge = np.zeros((points_per_dim,) * n, dtype=bool)
    for k in range(n):
        edge |= ends.reshape([-1 if j == k else 1 for j in range(n)])
    edge_mass = w[edge.reshape(-1)].sum()
    if edge_mass > 1e-6:
        log.warning("grid oracle: %.2e of the posterior mass sits on the grid boundary", edge_mass)

    mean = w @ grid
    d = grid - mean
    cov = (d * w[:, None]).T @ d
    return mean, 0.5 * (cov + cov.T)


def max_relative_deviation(mean, cov, ref_mean, ref_cov) -> float:
    """Largest scale-aware relative gap between two sets of moments.

    Mean components are compared relative to ``max(|ref|, ref sd)`` and
    covariance entries relative to ``sqrt(ref_ii * ref_jj)``, which reduces to
    plain relative error on the diagonal.
    """
    ref_sd = np.sqrt(np.diag(ref_cov))
    mean_dev = np.abs(np.asarray(mean) - ref_mean) / np.maximum(np.abs(ref_mean), ref_sd)
    cov_dev = np.abs(np.asarray(cov) - ref_cov) / np.outer(ref_sd, ref_sd)
    return float(max(mean_dev.max(), cov_dev.max()))
