"""
Ground truth for decision quality.

The exact GPC posterior is sampled with elliptical slice sampling (ESS), which
needs no tuning or gradients under a Gaussian prior. Predictive probabilities
on the comb are Monte Carlo averages over the chain. The Bayes-optimal actions
and all expected utilities are computed from one shared set of estimates, so
``U(a_opt) >= U(a_q) >= U(-a_opt)`` holds exactly, not just up to noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from lossep import kernels
from lossep.gpc import BinaryUtility4, PredictiveSet, conditional_expected_utility
from lossep.special import norm_cdf


class DegenerateMetric(ValueError):
    pass


@dataclass(frozen=True)
class ESSConfig:
    n_samples: int = 20000
    n_burnin: int = 2000
    seed: int = 0
    max_shrink: int = 32

    def __post_init__(self):
        if self.n_samples < 1 or self.n_burnin < 0:
            raise ValueError("n_samples must be positive and n_burnin non-negative")


def draw_streams(config: ESSConfig, prior_chol: np.ndarray):
    """All randomness one ESS chain consumes, drawn up front."""
    rng = np.random.default_rng(config.seed)
    T = config.n_samples + config.n_burnin
    n = prior_chol.shape[0]
    nus = rng.standard_normal((T, n)) @ prior_chol.T
    log_u = np.log(rng.random(T))
    theta0 = 2.0 * math.pi * rng.random(T)
    shrink = rng.random((T, config.max_shrink))
    return nus, log_u, theta0, shrink


def ess_sample(prior_chol, loglik, config: ESSConfig = ESSConfig(), f0=None) -> np.ndarray:
    """ESS targeting ``N(f; 0, L L^T) exp(loglik(f))`` for any Python ``loglik``.

    Returns ``n_samples`` post-burn-in draws as rows.
    """
    L = np.asarray(prior_chol, dtype=float)
    nus, log_u, theta0, shrink = draw_streams(config, L)
    f = np.zeros(L.shape[0]) if f0 is None else np.asarray(f0, dtype=float).copy()
    ll = loglik(f)
    out = np.empty((config.n_samples, L.shape[0]))
    for t in range(nus.shape[0]):
        f, ll = kernels.ess_step(f, ll, nus[t], log_u[t], theta0[t], shrink[t], loglik)
        if t >= config.n_burnin:
            out[t - config.n_burnin] = f
    return out


def ess_sample_probit(prior_chol, y, config: ESSConfig = ESSConfig(), backend=None) -> np.ndarray:
    """ESS for the GP probit posterior through the compiled kernel."""
    L = np.asarray(prior_chol, dtype=float)
    nus, log_u, theta0, shrink = draw_streams(config, L)
    chain = kernels.ess_probit_chain(y, np.zeros(L.shape[0]), nus, log_u, theta0, shrink, backend)
    return chain[config.n_burnin:]


def batch_means_stderr(x, n_batches: int = 50) -> np.ndarray:
    """Standard error of the mean of a correlated chain (columns), by batch means."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n < 2:
        return np.full(x.shape[1:], np.nan)
    if n < 2 * n_batches:
        return np.std(x, axis=0, ddof=1) / math.sqrt(n)
    size = n // n_batches
    b = x[: size * n_batches].reshape((n_batches, size) + x.shape[1:]).mean(axis=1)
    return np.std(b, axis=0, ddof=1) / math.sqrt(n_batches)


def mc_predictive_prob(samples, pred: PredictiveSet, n_batches: int = 50):
    """Estimate ``p(y*=+1 | x*_c)`` for every comb point from posterior draws.

    Each draw contributes ``Phi(alpha_c^T f)``. Returns ``(p_hat, stderr)``.
    """
    samples = np.atleast_2d(samples)
    per_draw = norm_cdf(samples @ pred.alpha.T)
    return per_draw.mean(axis=0), batch_means_stderr(per_draw, n_batches)


def bayes_optimal_actions(p_hat, u: BinaryUtility4) -> np.ndarray:
    """+1 where ``p_hat`` reaches the utility threshold, else -1 (ties to +1)."""
    t = u.threshold
    p = np.asarray(p_hat, dtype=float)
    plus = p >= t if u._den > 0 else p <= t
    return np.where(plus, 1, -1)


@dataclass(frozen=True)
class UtilityEvalReport:
    u_opt: float
    u_q: float
    u_antiopt: float
    discrepancy: float
    metric: float
    mc_stderr: float


def expected_utility(actions, p_hat, u: BinaryUtility4) -> float:
    """Comb average of per-point expected utilities."""
    return float(np.mean(conditional_expected_utility(p_hat, u, actions)))


def evaluate(q_actions, p_hat, u: BinaryUtility4, p_stderr=None) -> UtilityEvalReport:
    """Score ``q_actions`` against the Bayes-optimal actions under shared ``p_hat``.

    ``mc_stderr`` bounds the standard error of ``u_q`` by summing per-point
    contributions ``|slope_c| se_c / C``, which is conservative for any
    correlation between points.
    """
    p_hat = np.asarray(p_hat, dtype=float)
    q_actions = np.asarray(q_actions)
    a_opt = bayes_optimal_actions(p_hat, u)
    u_opt = expected_utility(a_opt, p_hat, u)
    u_q = expected_utility(q_actions, p_hat, u)
    u_anti = expected_utility(-a_opt, p_hat, u)
    den = u_opt - u_anti
    if not den > 0.0:
        raise DegenerateMetric("best and worst action vectors have equal utility")
    metric = (u_opt - u_q) / den
    if p_stderr is None:
        se = float("nan")
    else:
        _, slope = u.affine(q_actions)
        se = float(np.sum(np.abs(slope) * np.asarray(p_stderr)) / p_hat.size)
    return UtilityEvalReport(u_opt, u_q, u_anti, u_opt - u_q, metric, se)
