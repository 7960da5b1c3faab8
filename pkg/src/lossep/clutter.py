"""
The clutter problem and the reactor decision problem built on top of it.

Generative model (scalar observations)::

    phi ~ N(0, v0)
    y_i | phi ~ (1 - pi) N(y_i; phi, 1) + pi N(y_i; 0, vc)

The reactor decision is whether to keep a reactor on (action 0) or shut it
down (action 1) given that the latent temperature ``phi`` may exceed
``tau_crit``. Its utility is ``L_a`` below the threshold and ``H_a`` at or above
it. In the two-index notation ``u_ij`` (utility of action ``i`` when
``I[phi >= tau_crit] = j``) used for classifiers, ``u00 = L0``, ``u01 = H0``,
``u10 = L1`` and ``u11 = H1``; see :meth:`ReactorUtility.as_binary`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from lossep import kernels
from lossep.ep import EPConfig, Tilted, run_ep, run_loss_ep
from lossep.gauss import GaussianMoment
from lossep.special import gauss_logpdf, norm_cdf, norm_logcdf, norm_logpdf

KEEP_ON = 0
SHUT_DOWN = 1

MAX_ENUMERATION = 20


class TooManyPoints(ValueError):
    pass


class NonpositiveUtilityMass(ValueError):
    pass


@dataclass(frozen=True)
class ClutterParams:
    pi: float = 0.5
    v_c: float = 10.0
    v_0: float = 100.0

    def __post_init__(self):
        if not 0.0 <= self.pi <= 1.0:
            raise ValueError("clutter proportion must lie in [0, 1]")
        if self.v_c <= 0 or self.v_0 <= 0:
            raise ValueError("variances must be positive")

    @property
    def prior(self) -> GaussianMoment:
        return GaussianMoment.scalar(0.0, self.v_0)

    def log_likelihood(self, y, phi):
        """log p(y | phi) elementwise (broadcasting)."""
        y = np.asarray(y, dtype=float)
        phi = np.asarray(phi, dtype=float)
        a = gauss_logpdf(y, phi, 1.0)
        b = gauss_logpdf(y, 0.0, self.v_c) + np.zeros_like(a)
        if self.pi == 0.0:
            return a
        if self.pi == 1.0:
            return b
        return np.logaddexp(math.log1p(-self.pi) + a, math.log(self.pi) + b)


@dataclass(frozen=True)
class ReactorUtility:
    L0: float = 1.0
    L1: float = 0.5
    H0: float = 0.0
    H1: float = 1.5
    tau_crit: float = 0.0

    def __post_init__(self):
        if not (self.H0 < self.L1 <= self.L0 < self.H1):
            raise ValueError("reactor utilities must satisfy H0 < L1 <= L0 < H1")

    def low(self, a: int) -> float:
        return self.L1 if a == SHUT_DOWN else self.L0

    def high(self, a: int) -> float:
        return self.H1 if a == SHUT_DOWN else self.H0

    def as_binary(self):
        from lossep.gpc import BinaryUtility4

        return BinaryUtility4(u00=self.L0, u01=self.H0, u10=self.L1, u11=self.H1)

    def expected(self, a: int, p_high: float) -> float:
        """Expected utility of action ``a`` when P(phi >= tau_crit) = p_high."""
        return self.low(a) * (1.0 - p_high) + self.high(a) * p_high

    @property
    def threshold(self) -> float:
        """P(phi >= tau_crit) at which both actions tie."""
        return (self.L0 - self.L1) / ((self.L0 - self.L1) + (self.H1 - self.H0))


# ---------------------------------------------------------------------------
# data sites
# ---------------------------------------------------------------------------


def clutter_tilted(cavity: GaussianMoment, y: float, params: ClutterParams) -> Tilted:
    """log Z_i of a clutter site and its gradients w.r.t. cavity mean and variance.

    ``Z_i = (1 - pi) N(y; m, 1 + v) + pi N(y; 0, vc)``. With the signal
    responsibility ``r = (1 - pi) N(y; m, 1 + v) / Z_i``:
    ``dlogZ/dm = r (y - m) / (1 + v)`` and
    ``dlogZ/dv = r ((y - m)^2 / (1 + v) - 1) / (2 (1 + v))``.
    """
    m, v = cavity.m, cavity.v
    s = 1.0 + v
    d = y - m
    log_sig = gauss_logpdf(y, m, s)
    if params.pi == 0.0:
        log_z = float(log_sig)
        r = 1.0
    else:
        a = math.log1p(-params.pi) + log_sig if params.pi < 1.0 else -np.inf
        b = math.log(params.pi) + gauss_logpdf(y, 0.0, params.v_c)
        log_z = float(np.logaddexp(a, b))
        r = math.exp(a - log_z)
    gm = r * d / s
    gv = 0.5 * r * (d * d / s - 1.0) / s
    return Tilted(log_z, np.array([gm]), np.array([[gv]]))


def clutter_logZ(cavity: GaussianMoment, y: float, params: ClutterParams) -> float:
    return clutter_tilted(cavity, y, params).log_z


def clutter_tilted_moments(cavity: GaussianMoment, y: float, params: ClutterParams):
    """Tilted mean and variance written out in closed form.

    Kept as a separate route from ``clutter_tilted`` + moment matching so the
    two can be checked against each other.
    """
    m, v = cavity.m, cavity.v
    s = 1.0 + v
    d = y - m
    z = (1.0 - params.pi) * math.exp(gauss_logpdf(y, m, s))
    z_i = z + params.pi * math.exp(gauss_logpdf(y, 0.0, params.v_c))
    r = z / z_i
    m_new = m + v * r * d / s
    v_new = v - v * v * (r / s - r * (1.0 - r) * d * d / (s * s))
    return GaussianMoment.scalar(m_new, v_new).to_mean_params()


class ClutterModel:
    """EP data sites for a clutter dataset (each site spans the scalar phi)."""

    dim = 1

    def __init__(self, y, params: ClutterParams = ClutterParams()):
        self.y = np.asarray(y, dtype=float).reshape(-1)
        if not np.all(np.isfinite(self.y)):
            raise ValueError("observations must be finite")
        self.params = params
        self.n_sites = self.y.size

    def scope(self, i):
        return None

    def tilted(self, i, cavity):
        return clutter_tilted(cavity, self.y[i], self.params)


# ---------------------------------------------------------------------------
# utility site
# ---------------------------------------------------------------------------


def reactor_tilted(cavity: GaussianMoment, u: ReactorUtility, a: int) -> Tilted:
    """log Z_l = log(L_a Phi(tau; m, v) + H_a (1 - Phi(tau; m, v))) and gradients."""
    lo, hi = u.low(a), u.high(a)
    if lo <= 0 and hi <= 0:
        raise NonpositiveUtilityMass(f"no positive utility mass for action {a}")
    m, v = cavity.m, cavity.v
    sd = math.sqrt(v)
    z = (u.tau_crit - m) / sd
    # log Phi(z) and log Phi(-z) kept separately for tail accuracy
    lp_lo = float(norm_logcdf(z))
    lp_hi = float(norm_logcdf(-z))
    terms = []
    if lo > 0:
        terms.append(math.log(lo) + lp_lo)
    if hi > 0:
        terms.append(math.log(hi) + lp_hi)
    log_z = float(logsumexp(terms))
    # dZ/dm = (H_a - L_a) pdf(z) / sd ; dZ/dv = (H_a - L_a) pdf(z) z / (2 v)
    w = (hi - lo) * math.exp(float(norm_logpdf(z)) - log_z)
    gm = w / sd
    gv = w * z / (2.0 * v)
    return Tilted(log_z, np.array([gm]), np.array([[gv]]))


def reactor_logZ(cavity: GaussianMoment, u: ReactorUtility, a: int) -> float:
    return reactor_tilted(cavity, u, a).log_z


def select_reactor_action(cavity: GaussianMoment, u: ReactorUtility) -> int:
    """Expected-utility maximizing action under a Gaussian; ties go to shut-down."""
    p_high = float(norm_cdf((cavity.m - u.tau_crit) / math.sqrt(cavity.v)))
    return reactor_action(p_high, u)


def reactor_action(p_high: float, u: ReactorUtility) -> int:
    keep = u.expected(KEEP_ON, p_high)
    shut = u.expected(SHUT_DOWN, p_high)
    return SHUT_DOWN if shut >= keep else KEEP_ON


class ReactorSite:
    """Utility term for loss-calibrated EP on the reactor problem."""

    def __init__(self, u: ReactorUtility):
        self.u = u

    def select_actions(self, cavity):
        return select_reactor_action(cavity, self.u)

    def tilted(self, cavity, actions):
        return reactor_tilted(cavity, self.u, actions)


# ---------------------------------------------------------------------------
# exact posterior
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MixturePosterior:
    log_weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def components(self):
        return [GaussianMoment.scalar(m, v) for m, v in zip(self.means, self.variances)]

    def mean(self) -> float:
        return float(np.sum(self.weights * self.means))

    def var(self) -> float:
        w = self.weights
        mu = np.sum(w * self.means)
        return float(np.sum(w * (self.variances + self.means**2)) - mu * mu)

    def cdf(self, x: float) -> float:
        return float(np.sum(self.weights * norm_cdf((x - self.means) / np.sqrt(self.variances))))

    def sf(self, x: float) -> float:
        """P(phi >= x), computed directly to avoid 1 - cdf cancellation."""
        return float(np.sum(self.weights * norm_cdf((self.means - x) / np.sqrt(self.variances))))

    def pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1)
        out = np.empty(flat.size)
        # chunked so points x branches stays around 2^22 entries
        step = max(1, (1 << 22) // max(1, self.means.size))
        for i in range(0, flat.size, step):
            lp = gauss_logpdf(flat[i:i + step, None], self.means, self.variances) + self.log_weights
            out[i:i + step] = np.exp(logsumexp(lp, axis=-1))
        return out.reshape(x.shape)

    def bayes_action(self, u: ReactorUtility) -> int:
        return reactor_action(self.sf(u.tau_crit), u)


def exact_clutter_posterior(y, params: ClutterParams = ClutterParams(), backend=None) -> MixturePosterior:
    """Exact posterior as a normalized mixture of 2^N Gaussians (N <= 20)."""
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size > MAX_ENUMERATION:
        raise TooManyPoints(f"{y.size} observations; enumeration is capped at {MAX_ENUMERATION}")
    if params.pi in (0.0, 1.0):
        # one live branch: all signal or all clutter
        k = y.size if params.pi == 0.0 else 0
        prec = k + 1.0 / params.v_0
        s = float(np.sum(y)) if k else 0.0
        return MixturePosterior(np.zeros(1), np.array([s / prec]), np.array([1.0 / prec]))
    log_w, mean, var = kernels.clutter_enumerate(y, params.pi, params.v_c, params.v_0, backend)
    log_w = log_w - logsumexp(log_w)
    return MixturePosterior(log_w, mean, var)


# ---------------------------------------------------------------------------
# convenience drivers
# ---------------------------------------------------------------------------


def clutter_ep(y, params: ClutterParams = ClutterParams(), config: EPConfig = EPConfig()):
    model = ClutterModel(y, params)
    return run_ep(model, params.prior, config)


def clutter_loss_ep(
    y,
    u: ReactorUtility,
    params: ClutterParams = ClutterParams(),
    config: EPConfig = EPConfig(),
):
    model = ClutterModel(y, params)
    return run_loss_ep(model, ReactorSite(u), params.prior, config)


def simulate_clutter(rng: np.random.Generator, n: int, phi: float, params: ClutterParams = ClutterParams()):
    clutter = rng.random(n) < params.pi
    y = np.where(clutter, rng.normal(0.0, math.sqrt(params.v_c), n), rng.normal(phi, 1.0, n))
    return y


__all__ = [
    "KEEP_ON",
    "SHUT_DOWN",
    "ClutterParams",
    "ReactorUtility",
    "ClutterModel",
    "ReactorSite",
    "MixturePosterior",
    "TooManyPoints",
    "NonpositiveUtilityMass",
    "clutter_tilted",
    "clutter_logZ",
    "clutter_tilted_moments",
    "reactor_tilted",
    "reactor_logZ",
    "select_reactor_action",
    "reactor_action",
    "exact_clutter_posterior",
    "clutter_ep",
    "clutter_loss_ep",
    "simulate_clutter",
]
