"""Multivariate normal distributions and the linear algebra built on them.

All densities are evaluated in log space through a Cholesky factor of the
covariance. Covariances are symmetrized on construction and factorized with
an escalating diagonal jitter when they are numerically semi-definite.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import ContractViolation, NotPositiveDefiniteError, SingularPushforwardError

LOG_2PI = float(np.log(2.0 * np.pi))

# multiples of the mean diagonal tried after a plain factorization fails
JITTER_LADDER = (1e-12, 1e-10, 1e-8, 1e-6, 1e-4)


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower factor ``L`` with ``L @ L.T == cov + jitter_used * I``."""

    lower: np.ndarray
    jitter_used: float = 0.0

    def solve(self, b: np.ndarray) -> np.ndarray:
        return cho_solve((self.lower, True), b, check_finite=False)

    def log_det(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))


def cholesky(cov: np.ndarray) -> CholeskyFactor:
    """Factorize ``cov``, escalating jitter until the factorization succeeds.

    The ladder is relative to the mean diagonal entry, so the same policy
    works for covariances in any units. Raises ``NotPositiveDefiniteError``
    when even the largest jitter fails.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ContractViolation(f"covariance must be square, got shape {cov.shape}")
    if not np.all(np.isfinite(cov)):
        raise NotPositiveDefiniteError("covariance has non-finite entries")
    d = cov.shape[0]
    scale = float(np.trace(cov)) / d if d else 0.0
    try:
        return CholeskyFactor(np.linalg.cholesky(cov), 0.0)
    except np.linalg.LinAlgError:
        pass
    if scale > 0.0:
        eye = np.eye(d)
        for rel in JITTER_LADDER:
            jitter = rel * scale
            try:
                return CholeskyFactor(np.linalg.cholesky(cov + jitter * eye), jitter)
            except np.linalg.LinAlgError:
                continue
    raise NotPositiveDefiniteError(
        f"covariance of dimension {d} is not positive definite "
        f"(min eigenvalue {np.linalg.eigvalsh(cov).min():.3e})"
    )


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


class Gaussian:
    """Multivariate normal ``N(mean, cov)``.

    Immutable: the arrays are copied and made read-only, and the Cholesky
    factor is computed once at construction.
    """

    __slots__ = ("mean", "cov", "chol")

    def __init__(self, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if mean.ndim != 1:
            raise ContractViolation(f"mean must be a vector, got shape {mean.shape}")
        if cov.shape != (mean.size, mean.size):
            raise ContractViolation(
                f"covariance shape {cov.shape} does not match mean length {mean.size}"
            )
        cov = 0.5 * (cov + cov.T)
        chol = cholesky(cov)
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "cov", _frozen(cov))
        object.__setattr__(self, "chol", chol)

    def __setattr__(self, name, value):
        raise AttributeError("Gaussian is immutable")

    @classmethod
    def from_diagonal(cls, mean, var) -> "Gaussian":
        return cls(mean, np.diag(np.atleast_1d(np.asarray(var, dtype=float))))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def var(self) -> np.ndarray:
        return np.diag(self.cov).copy()

    def marginal(self, idx) -> "Gaussian":
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        return Gaussian(self.mean[idx], self.cov[np.ix_(idx, idx)])

    def __repr__(self):
        return f"Gaussian(dim={self.dim}, mean={self.mean!r})"


def log_pdf(g: Gaussian, x) -> float | np.ndarray:
    """Log-density of ``g`` at ``x``.

    ``x`` may be a single point of length ``d`` or a batch of shape ``(n, d)``,
    in which case an array of ``n`` values is returned.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim > 2:
        raise ContractViolation(f"points must be a vector or a batch matrix, got shape {x.shape}")
    single = x.ndim <= 1
    pts = x.reshape(1, -1) if single else x
    if pts.shape[-1] != g.dim:
        raise ContractViolation(f"point dimension {pts.shape[-1]} != Gaussian dimension {g.dim}")
    diff = pts - g.mean
    z = solve_triangular(g.chol.lower, diff.T, lower=True, check_finite=False)
    maha = np.sum(z * z, axis=0)
    out = -0.5 * (maha + g.chol.log_det() + g.dim * LOG_2PI)
    return float(out[0]) if single else out


def affine_pushforward(g: Gaussian, A) -> Gaussian:
    """Distribution of ``A @ x`` for ``x ~ g``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[1] != g.dim:
        raise ContractViolation(f"map has {A.shape[1]} columns, Gaussian has dimension {g.dim}")
    try:
        return Gaussian(A @ g.mean, A @ g.cov @ A.T)
    except NotPositiveDefiniteError as exc:
        raise SingularPushforwardError(f"pushforward covariance is singular: {exc}") from exc


def condition(joint: Gaussian, observed_idx: Sequence[int], observed_vals) -> Gaussian:
    """Conditional distribution of the unobserved coordinates given the observed ones.

    The result is ordered like the unobserved indices in increasing order.
    """
    obs = np.asarray(observed_idx, dtype=int).reshape(-1)
    vals = np.asarray(observed_vals, dtype=float).reshape(-1)
    d = joint.dim
    if obs.size != vals.size:
        raise ContractViolation(f"{obs.size} observed indices but {vals.size} values")
    if obs.size and (obs.min() < 0 or obs.max() >= d):
        raise ContractViolation(f"observed indices out of range for dimension {d}")
    if np.unique(obs).size != obs.size:
        raise ContractViolation("observed indices must be distinct")
    if obs.size == 0:
        return joint
    rest = np.setdiff1d(np.arange(d), obs)
    if rest.size == 0:
        raise ContractViolation("nothing left to condition: every coordinate is observed")
    s11 = joint.cov[np.ix_(obs, obs)]
    s21 = joint.cov[np.ix_(rest, obs)]
    s22 = joint.cov[np.ix_(rest, rest)]
    f11 = cholesky(s11)
    gain = f11.solve(s21.T).T
    mean = joint.mean[rest] + gain @ (vals - joint.mean[obs])
    cov = s22 - gain @ s21.T
    return Gaussian(mean, cov)


def sample(g: Gaussian, rng: np.random.Generator | int, n: int) -> np.ndarray:
    """Draw ``n`` samples as ``mean + L z``; returns shape ``(n, d)``.

    An integer ``rng`` seeds a fresh PCG64 generator.
    """
    if n < 1:
        raise ContractViolation(f"sample count must be >= 1, got {n}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    z = rng.standard_normal((n, g.dim))
    return g.mean + z @ g.chol.lower.T
