"""
Gaussian exponential-family algebra.

Three parameterizations of a (possibly multivariate) Gaussian are kept side
by side:

* ``GaussianMoment``     -- mean and covariance, proper densities only
* ``GaussianNatural``    -- ``theta1 = inv(S) m`` and ``theta2 = -inv(S) / 2``;
  may be improper, which is the normal state of affairs for EP sites
* ``GaussianMeanParams`` -- ``eta1 = E[x]`` and ``eta2 = E[x x^T]``

Positive-definiteness is always decided by an unjittered Cholesky attempt.
A failure means "improper" and is reported, never repaired.

Tilted-distribution gradients are passed around in moment coordinates,
``d log Z / d mean`` and ``d log Z / d cov`` (the latter as the matrix of
elementwise partials). :func:`natural_grad` maps them to gradients with respect
to the natural parameters, and :func:`natural_increment` turns them into the
natural-parameter difference between the projected and the cavity density
without inverting any covariance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from lossep.special import LOG_SQRT_2PI


class ImproperDensity(ValueError):
    """A natural-form Gaussian has no valid moment form."""


class NonPosteriorizableMoments(ValueError):
    """Moment matching produced a non positive-definite covariance."""


class DimensionMismatch(ValueError):
    pass


def _vec(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=float)).reshape(-1)


def _mat(x, dim: int) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim < 2:
        a = a.reshape(1, 1) if a.size == 1 else np.diag(a.reshape(-1))
    if a.shape != (dim, dim):
        raise DimensionMismatch(f"expected ({dim}, {dim}) matrix, got {a.shape}")
    asym = a - a.T
    if asym.size and np.max(np.abs(asym)) > 1e-10 * max(1.0, float(np.max(np.abs(a)))):
        raise ValueError("matrix is not symmetric")
    return 0.5 * (a + a.T)


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; raises :class:`ImproperDensity` if not PD."""
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise ImproperDensity("matrix is not positive definite") from exc


def is_pd(a: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return False
    return True


def _chol_inv(a: np.ndarray) -> np.ndarray:
    L = cholesky(a)
    Linv = np.linalg.inv(L)
    out = Linv.T @ Linv
    return 0.5 * (out + out.T)


@dataclass(frozen=True, eq=False)
class GaussianMoment:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = _vec(self.mean)
        cov = _mat(self.cov, mean.size)
        if not is_pd(cov):
            raise ImproperDensity("covariance is not positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def _trusted(cls, mean: np.ndarray, cov: np.ndarray) -> "GaussianMoment":
        # skips validation; callers guarantee shape, symmetry and definiteness
        g = object.__new__(cls)
        object.__setattr__(g, "mean", mean)
        object.__setattr__(g, "cov", cov)
        return g

    @classmethod
    def scalar(cls, m: float, v: float) -> "GaussianMoment":
        return cls(np.array([m]), np.array([[v]]))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def m(self) -> float:
        return float(self.mean[0])

    @property
    def v(self) -> float:
        return float(self.cov[0, 0])

    def to_natural(self) -> "GaussianNatural":
        prec = _chol_inv(self.cov)
        return GaussianNatural(prec @ self.mean, -0.5 * prec)

    def to_mean_params(self) -> "GaussianMeanParams":
        return GaussianMeanParams(self.mean.copy(), self.cov + np.outer(self.mean, self.mean))

    def to_moment(self) -> "GaussianMoment":
        return self

    def marginal(self, idx) -> "GaussianMoment":
        idx = np.asarray(idx, dtype=int)
        return GaussianMoment._trusted(self.mean[idx], self.cov[np.ix_(idx, idx)])

    def logpdf(self, x) -> np.ndarray:
        """Log density at points ``x`` of shape (..., dim)."""
        x = np.asarray(x, dtype=float)
        if self.dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        L = cholesky(self.cov)
        d = x - self.mean
        z = np.linalg.solve(L, d.reshape(-1, self.dim).T).T.reshape(d.shape)
        return (
            -0.5 * np.sum(z * z, axis=-1)
            - np.sum(np.log(np.diag(L)))
            - self.dim * LOG_SQRT_2PI
        )


@dataclass(frozen=True, eq=False)
class GaussianNatural:
    theta1: np.ndarray
    theta2: np.ndarray

    def __post_init__(self):
        t1 = _vec(self.theta1)
        object.__setattr__(self, "theta1", t1)
        object.__setattr__(self, "theta2", _mat(self.theta2, t1.size))

    @classmethod
    def _trusted(cls, theta1: np.ndarray, theta2: np.ndarray) -> "GaussianNatural":
        g = object.__new__(cls)
        object.__setattr__(g, "theta1", theta1)
        object.__setattr__(g, "theta2", theta2)
        return g

    @classmethod
    def scalar(cls, theta1: float, theta2: float) -> "GaussianNatural":
        return cls(np.array([theta1]), np.array([[theta2]]))

    @classmethod
    def zeros(cls, dim: int) -> "GaussianNatural":
        return cls(np.zeros(dim), np.zeros((dim, dim)))

    @property
    def dim(self) -> int:
        return self.theta1.size

    @property
    def is_proper(self) -> bool:
        return is_pd(-2.0 * self.theta2)

    def to_moment(self) -> GaussianMoment:
        cov = _chol_inv(-2.0 * self.theta2)
        return GaussianMoment(cov @ self.theta1, cov)

    def to_mean_params(self) -> "GaussianMeanParams":
        return self.to_moment().to_mean_params()

    def to_natural(self) -> "GaussianNatural":
        return self

    def embed(self, idx, dim: int) -> "GaussianNatural":
        """Lift a factor over coordinates ``idx`` into ``dim`` dimensions."""
        idx = np.asarray(idx, dtype=int)
        t1 = np.zeros(dim)
        t2 = np.zeros((dim, dim))
        t1[idx] = self.theta1
        t2[np.ix_(idx, idx)] = self.theta2
        return GaussianNatural(t1, t2)

    def __add__(self, other: "GaussianNatural") -> "GaussianNatural":
        return factor_combine(self, other, +1)

    def __sub__(self, other: "GaussianNatural") -> "GaussianNatural":
        return factor_combine(self, other, -1)


@dataclass(frozen=True, eq=False)
class GaussianMeanParams:
    eta1: np.ndarray
    eta2: np.ndarray

    def __post_init__(self):
        e1 = _vec(self.eta1)
        object.__setattr__(self, "eta1", e1)
        object.__setattr__(self, "eta2", _mat(self.eta2, e1.size))

    @property
    def dim(self) -> int:
        return self.eta1.size

    def to_moment(self) -> GaussianMoment:
        cov = self.eta2 - np.outer(self.eta1, self.eta1)
        if not is_pd(cov):
            raise NonPosteriorizableMoments("eta2 - eta1 eta1^T is not positive definite")
        return GaussianMoment(self.eta1, cov)

    def to_natural(self) -> GaussianNatural:
        return self.to_moment().to_natural()

    def to_mean_params(self) -> "GaussianMeanParams":
        return self


Gaussian = Union[GaussianMoment, GaussianNatural, GaussianMeanParams]

_TARGETS = {
    GaussianMoment: "to_moment",
    GaussianNatural: "to_natural",
    GaussianMeanParams: "to_mean_params",
}


def convert(g: Gaussian, target: type) -> Gaussian:
    """Convert ``g`` to the parameterization ``target`` (one of the three classes)."""
    try:
        method = _TARGETS[target]
    except KeyError:
        raise TypeError(f"unknown Gaussian parameterization {target!r}") from None
    return getattr(g, method)()


def factor_combine(a: GaussianNatural, b: GaussianNatural, sign: int) -> GaussianNatural:
    """Multiply (``sign=+1``) or divide (``sign=-1``) two Gaussian factors.

    The result may be improper.
    """
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    if a.dim != b.dim:
        raise DimensionMismatch(f"dims {a.dim} and {b.dim} differ")
    return GaussianNatural(a.theta1 + sign * b.theta1, a.theta2 + sign * b.theta2)


def gaussian_product(a: GaussianMoment, b: GaussianMoment) -> Tuple[float, GaussianMoment]:
    """Refactor ``N(x; a, A) N(x; b, B)`` into evidence times posterior.

    Returns ``(log N(a; b, A + B), N(x; B (A+B)^-1 a + A (A+B)^-1 b, A (A+B)^-1 B))``.
    """
    if a.dim != b.dim:
        raise DimensionMismatch(f"dims {a.dim} and {b.dim} differ")
    S = a.cov + b.cov
    L = cholesky(S)
    diff = a.mean - b.mean
    z = np.linalg.solve(L, diff)
    log_evidence = float(
        -0.5 * z @ z - np.sum(np.log(np.diag(L))) - a.dim * LOG_SQRT_2PI
    )
    # S^-1 A and S^-1 B via the shared factor
    SiA = np.linalg.solve(L.T, np.linalg.solve(L, a.cov))
    SiB = np.linalg.solve(L.T, np.linalg.solve(L, b.cov))
    mean = SiB.T @ a.mean + SiA.T @ b.mean
    cov = a.cov @ SiB
    return log_evidence, GaussianMoment(mean, 0.5 * (cov + cov.T))


def natural_grad(cavity: GaussianMoment, d_mean, d_cov) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient of log Z w.r.t. the cavity's natural parameters.

    Chain rule from the moment-coordinate gradients ``g = dlogZ/dm`` and
    ``G = dlogZ/dS``: ``d/dtheta1 = S g`` and
    ``d/dtheta2 = 2 S G S + m (S g)^T + (S g) m^T``.
    """
    g = _vec(d_mean)
    G = _mat(d_cov, g.size)
    S, m = cavity.cov, cavity.mean
    Sg = S @ g
    g2 = 2.0 * S @ G @ S + np.outer(m, Sg) + np.outer(Sg, m)
    return Sg, 0.5 * (g2 + g2.T)


def moment_match(cavity: GaussianNatural, grad_logZ) -> GaussianMeanParams:
    """Mean parameters of the projected density: cavity mean params plus grad log Z.

    ``grad_logZ`` is the pair (d/dtheta1, d/dtheta2). Raises
    :class:`NonPosteriorizableMoments` when the result is not a valid Gaussian.
    """
    g1, g2 = grad_logZ
    eta = cavity.to_mean_params()
    out = GaussianMeanParams(eta.eta1 + _vec(g1), eta.eta2 + np.asarray(g2, dtype=float))
    out.to_moment()
    return out


def tilted_moments(cavity: GaussianMoment, d_mean, d_cov) -> GaussianMoment:
    """Moments of the tilted density from moment-coordinate gradients of log Z.

    ``m_new = m + S g`` and ``S_new = S + S (2 G - g g^T) S``.
    """
    g = _vec(d_mean)
    M = 2.0 * _mat(d_cov, g.size) - np.outer(g, g)
    S = cavity.cov
    cov = S + S @ M @ S
    cov = 0.5 * (cov + cov.T)
    if not is_pd(cov):
        raise NonPosteriorizableMoments("tilted covariance is not positive definite")
    return GaussianMoment(cavity.mean + S @ g, cov)


def natural_increment(cavity: GaussianMoment, d_mean, d_cov) -> GaussianNatural:
    """Natural parameters of ``proj[tilted] / cavity``.

    Uses ``delta(inv S) = -(I + M S)^-1 M`` with ``M = 2G - g g^T`` so no
    covariance is ever inverted; this keeps the update accurate when the cavity
    covariance is badly conditioned (GP priors).
    """
    g = _vec(d_mean)
    M = 2.0 * _mat(d_cov, g.size) - np.outer(g, g)
    S, m = cavity.cov, cavity.mean
    cov_new = S + S @ M @ S
    if not is_pd(0.5 * (cov_new + cov_new.T)):
        raise NonPosteriorizableMoments("tilted covariance is not positive definite")
    d_prec = -np.linalg.solve(np.eye(g.size) + M @ S, M)
    d_prec = 0.5 * (d_prec + d_prec.T)
    d_theta1 = g + d_prec @ (m + S @ g)
    return GaussianNatural(d_theta1, -0.5 * d_prec)
