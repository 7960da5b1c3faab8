"""
Gaussian process probit classification with loss-calibrated EP.

Latent values ``f`` at the training inputs get the prior ``N(0, K)`` with an
RBF kernel, and labels ``y_i in {-1, +1}`` the likelihood ``Phi(y_i f_i)``.
Each data site touches one coordinate of ``f``.

Decisions are made on a finite "comb" of predictive inputs. Test latents are
integrated out under the conditional prior ``f* | f``, so for point ``c``
``P(y*=+1 | f) = Phi(alpha_c^T f)`` with
``alpha_c = K^-1 k_c / sqrt(1 + vbar_c)`` and ``vbar_c = k** - k_c K^-1 k_c^T``.
The predictive utility ``U(a, f)`` is the comb average of affine functions of
these probits. The utility site is therefore a full-rank Gaussian factor over
``f`` and ``log Z_l`` stays closed-form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from lossep.ep import EPConfig, Tilted, run_ep, run_loss_ep
from lossep.gauss import GaussianMoment, ImproperDensity
from lossep.special import mills_ratio, norm_cdf, norm_logcdf, norm_pdf, norm_ppf


class CholeskyFailure(ImproperDensity):
    pass


class BiasUndefined(ValueError):
    pass


class ZeroUtilityMass(ValueError):
    pass


# ---------------------------------------------------------------------------
# kernel
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RBFKernelParams:
    sigma2: float = math.exp(2 * 1.5)
    ell: float = math.exp(1.0)
    jitter: float | None = None

    def __post_init__(self):
        if self.sigma2 <= 0 or self.ell <= 0:
            raise ValueError("sigma2 and ell must be positive")
        if self.jitter is not None and self.jitter < 0:
            raise ValueError("jitter must be non-negative")

    @classmethod
    def from_log(cls, log_sigma: float = 1.5, log_ell: float = 1.0, jitter=None):
        return cls(math.exp(2.0 * log_sigma), math.exp(log_ell), jitter)

    @property
    def nugget(self) -> float:
        return 1e-8 * self.sigma2 if self.jitter is None else self.jitter


def _as_inputs(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def rbf(X1, X2, params: RBFKernelParams) -> np.ndarray:
    """Cross-covariance ``sigma2 exp(-|x - x'|^2 / (2 ell^2))`` without jitter."""
    X1, X2 = _as_inputs(X1), _as_inputs(X2)
    d2 = (
        np.sum(X1 * X1, axis=1)[:, None]
        + np.sum(X2 * X2, axis=1)[None, :]
        - 2.0 * X1 @ X2.T
    )
    np.maximum(d2, 0.0, out=d2)
    return params.sigma2 * np.exp(-0.5 * d2 / params.ell**2)


def kernel_matrix(X, params: RBFKernelParams, check: bool = True) -> np.ndarray:
    X = _as_inputs(X)
    if not np.all(np.isfinite(X)):
        raise ValueError("inputs must be finite")
    K = rbf(X, X, params)
    K = 0.5 * (K + K.T) + params.nugget * np.eye(X.shape[0])
    if check:
        try:
            np.linalg.cholesky(K)
        except np.linalg.LinAlgError:
            raise CholeskyFailure("kernel matrix is not numerically PD; raise the jitter") from None
    return K


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GPCDataset:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = _as_inputs(self.X)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.shape[0] != y.size:
            raise ValueError("X and y disagree on the number of points")
        if not np.all(np.abs(y) == 1.0):
            raise ValueError("labels must be -1 or +1")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.size


@dataclass(frozen=True)
class BinaryUtility4:
    """``u_ij``: utility of taking action ``i`` when outcome ``j`` occurs (0 is -1)."""

    u00: float
    u01: float
    u10: float
    u11: float

    @property
    def _num(self) -> float:
        return self.u00 - self.u10

    @property
    def _den(self) -> float:
        return (self.u00 - self.u10) - (self.u01 - self.u11)

    def validate(self) -> None:
        den = self._den
        if den == 0.0:
            raise BiasUndefined("utilities make both actions equivalent")
        t = self._num / den
        if not 0.0 < t < 1.0:
            raise BiasUndefined(f"bias argument {t} is outside (0, 1)")

    @property
    def threshold(self) -> float:
        """Probability of y=+1 at which both actions have equal expected utility."""
        self.validate()
        return self._num / self._den

    @property
    def bias(self) -> float:
        return float(norm_ppf(self.threshold))

    def expected(self, p_plus, a):
        return conditional_expected_utility(p_plus, self, a)

    @property
    def symmetric(self) -> bool:
        return self.u00 == self.u11 and self.u01 == self.u10

    def affine(self, a):
        """Per-point ``(offset, slope)`` with ``E[u] = offset + slope * p_plus``."""
        a = np.asarray(a)
        off = np.where(a > 0, self.u10, self.u00)
        slope = np.where(a > 0, self.u11 - self.u10, self.u01 - self.u00)
        return off.astype(float), slope.astype(float)


def conditional_expected_utility(p_plus, u: BinaryUtility4, a):
    p = np.asarray(p_plus, dtype=float)
    return np.where(
        np.asarray(a) > 0,
        u.u10 * (1.0 - p) + u.u11 * p,
        u.u00 * (1.0 - p) + u.u01 * p,
    )


def q_action(m, v, u: BinaryUtility4):
    """Closed-form decision ``sign(m / sqrt(1 + v) - b)``; ties go to +1.

    When the utilities reward the wrong label (negative denominator in the
    bias argument) the comparison flips, which the plain sign rule ignores.
    """
    b = u.bias
    z = np.asarray(m, dtype=float) / np.sqrt(1.0 + np.asarray(v, dtype=float))
    plus = z >= b if u._den > 0 else z <= b
    return np.where(plus, 1, -1)


# ---------------------------------------------------------------------------
# probit data sites
# ---------------------------------------------------------------------------


def probit_tilted(cavity: GaussianMoment, y: float) -> Tilted:
    """``log Phi(y m / sqrt(1 + v))`` with gradients w.r.t. cavity mean and variance."""
    m, v = cavity.m, cavity.v
    s = math.sqrt(1.0 + v)
    z = y * m / s
    log_z = float(norm_logcdf(z))
    r = float(mills_ratio(z))
    gm = y * r / s
    gv = -0.5 * r * z / (1.0 + v)
    return Tilted(log_z, np.array([gm]), np.array([[gv]]))


def probit_site_logZ(cavity: GaussianMoment, y: float) -> float:
    return probit_tilted(cavity, y).log_z


class ProbitModel:
    """EP data sites ``Phi(y_i f_i)``, site ``i`` scoped to coordinate ``i``."""

    def __init__(self, y):
        self.y = np.asarray(y, dtype=float).reshape(-1)
        self.dim = self.y.size
        self.n_sites = self.y.size

    def scope(self, i):
        return (i,)

    def tilted(self, i, cavity):
        return probit_tilted(cavity, self.y[i])


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PredictiveSet:
    """Geometry of a comb of predictive points against the training inputs.

    ``beta`` rows are ``K^-1 k_c``, ``vbar`` the conditional prior variances,
    ``alpha = beta / sqrt(1 + vbar)``.
    """

    points: np.ndarray
    beta: np.ndarray
    vbar: np.ndarray
    kss: np.ndarray
    n_clamped: int = 0
    alpha: np.ndarray = field(init=False)

    def __post_init__(self):
        self.alpha = self.beta / np.sqrt(1.0 + self.vbar)[:, None]

    @classmethod
    def build(cls, X, points, params: RBFKernelParams, K=None) -> "PredictiveSet":
        X, P = _as_inputs(X), _as_inputs(points)
        if K is None:
            K = kernel_matrix(X, params)
        L = np.linalg.cholesky(K)
        Ks = rbf(P, X, params)
        W = solve_triangular(L, Ks.T, lower=True)
        beta = solve_triangular(L.T, W, lower=False).T
        kss = np.full(P.shape[0], params.sigma2 + params.nugget)
        vbar = kss - np.sum(W * W, axis=0)
        neg = vbar < 0
        vbar = np.where(neg, 0.0, vbar)
        return cls(P, beta, vbar, kss, int(neg.sum()))

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def predictive(self, approx: GaussianMoment):
        """Latent predictive mean and variance at every point, clamped at zero variance."""
        m = self.beta @ approx.mean
        v = self.vbar + np.einsum("cn,nk,ck->c", self.beta, approx.cov, self.beta)
        neg = v < 0
        self.n_clamped += int(neg.sum())
        return m, np.where(neg, 0.0, v)


def posterior_predictive(approx: GaussianMoment, K, k_star, k_ss):
    """Latent predictive moments from the kernel pieces directly.

    ``m = k* K^-1 mu_q`` and ``v = k** - k* K^-1 k*^T + k* K^-1 S_q K^-1 k*^T``.
    """
    cf = (np.linalg.cholesky(K), True)
    k_star = np.atleast_2d(k_star)
    b = cho_solve(cf, k_star.T).T
    m = b @ approx.mean
    v = np.asarray(k_ss) - np.sum(k_star * b, axis=1) + np.einsum("cn,nk,ck->c", b, approx.cov, b)
    return m, np.maximum(v, 0.0)


def predictive_prob(m, v):
    """``p(y* = +1) = Phi(m / sqrt(1 + v))``."""
    return norm_cdf(np.asarray(m, dtype=float) / np.sqrt(1.0 + np.asarray(v, dtype=float)))


# ---------------------------------------------------------------------------
# utility site
# ---------------------------------------------------------------------------


def utility_tilted(cavity: GaussianMoment, u: BinaryUtility4, actions, pred: PredictiveSet) -> Tilted:
    """Closed-form ``log Z_l`` of the comb utility under a Gaussian cavity over ``f``.

    ``Z_l = mean_c(A_c + B_c Phi(z_c))`` with ``z_c = alpha_c^T mu / s_c`` and
    ``s_c = sqrt(1 + alpha_c^T S alpha_c)``. Gradients:
    ``dZ/dmu = mean_c B_c pdf(z_c) alpha_c / s_c`` and
    ``dZ/dS = -mean_c B_c pdf(z_c) z_c / (2 s_c^2) alpha_c alpha_c^T``.
    """
    A = pred.alpha
    off, slope = u.affine(actions)
    am = A @ cavity.mean
    s2 = 1.0 + np.einsum("cn,nk,ck->c", A, cavity.cov, A)
    s = np.sqrt(s2)
    z = am / s
    Z = float(np.mean(off + slope * norm_cdf(z)))
    if not Z > 0.0:
        raise ZeroUtilityMass(f"expected utility {Z} is not positive")
    w = slope * norm_pdf(z) / A.shape[0] / Z
    d_mean = A.T @ (w / s)
    d_cov = -(A.T * (w * z / (2.0 * s2))) @ A
    return Tilted(math.log(Z), d_mean, 0.5 * (d_cov + d_cov.T))


def utility_site_logZ(cavity, u, actions, pred) -> float:
    return utility_tilted(cavity, u, actions, pred).log_z


class GPCUtility:
    """Utility term: re-selects the q-actions on every visit, then tilts."""

    def __init__(self, u: BinaryUtility4, pred: PredictiveSet):
        u.validate()
        self.u = u
        self.pred = pred

    def select_actions(self, cavity):
        m, v = self.pred.predictive(cavity)
        return q_action(m, v, self.u)

    def tilted(self, cavity, actions):
        return utility_tilted(cavity, self.u, actions, self.pred)


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class GPCResult:
    q: GaussianMoment
    q_bar: GaussianMoment
    actions: np.ndarray
    diagnostics: object
    state: object


def ep_gpc(data: GPCDataset, kernel: RBFKernelParams, config: EPConfig = EPConfig()) -> GPCResult:
    K = kernel_matrix(data.X, kernel)
    prior = GaussianMoment(np.zeros(data.n), K)
    state, diag = run_ep(ProbitModel(data.y), prior, config)
    q = state.q()
    return GPCResult(q, q, None, diag, state)


def loss_ep_gpc(
    data: GPCDataset,
    kernel: RBFKernelParams,
    u: BinaryUtility4,
    pred: PredictiveSet,
    config: EPConfig = EPConfig(),
) -> GPCResult:
    """Loss-calibrated EP for GP classification.

    ``result.q`` excludes the utility site (the posterior approximation);
    ``result.q_bar`` includes it (the utility-weighted approximation).
    """
    K = kernel_matrix(data.X, kernel)
    prior = GaussianMoment(np.zeros(data.n), K)
    state, actions, diag = run_loss_ep(ProbitModel(data.y), GPCUtility(u, pred), prior, config)
    return GPCResult(state.q(), state.q_bar, actions, diag, state)


def actions_for(approx: GaussianMoment, u: BinaryUtility4, pred: PredictiveSet):
    m, v = pred.predictive(approx)
    return q_action(m, v, u)
