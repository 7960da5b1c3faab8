"""
Cross-checks of every closed form against an independent route.

Each check returns a :class:`CheckResult`; ``run_all`` drives the
``validate`` command. Independent routes are central finite differences,
dense-grid Simpson quadrature (split at discontinuities), brute-force action
enumeration, exact mixture enumeration and elliptical slice sampling.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np
from scipy.integrate import simpson

from lossep.clutter import (
    ClutterModel,
    ClutterParams,
    ReactorUtility,
    clutter_ep,
    clutter_tilted,
    exact_clutter_posterior,
    reactor_tilted,
    simulate_clutter,
)
from lossep.ep import EPConfig, fixed_point_residual
from lossep.gauss import GaussianMoment, gaussian_product
from lossep.gpc import (
    BinaryUtility4,
    BiasUndefined,
    PredictiveSet,
    ProbitModel,
    RBFKernelParams,
    ep_gpc,
    kernel_matrix,
    probit_tilted,
    q_action,
    utility_tilted,
)
from lossep.oracle import (
    DegenerateMetric,
    ESSConfig,
    batch_means_stderr,
    bayes_optimal_actions,
    ess_sample_probit,
    evaluate,
)
from lossep.special import gauss_logpdf, norm_cdf


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    metrics: Dict[str, float] = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(name: str, fn: Callable[[], CheckResult]) -> CheckResult:
    t = time.perf_counter()
    r = fn()
    r.seconds = time.perf_counter() - t
    r.name = name
    return r


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def fd_gradient(log_z: Callable[[np.ndarray, np.ndarray], float], mean, cov, rel_step: float = 1e-5):
    """Central differences of ``log_z(mean, cov)`` in every mean and covariance entry.

    Covariance entries are perturbed one at a time (not symmetrically), which
    is the elementwise partial the analytic gradients report.
    """
    mean = np.asarray(mean, float)
    cov = np.asarray(cov, float)
    gm = np.zeros_like(mean)
    gS = np.zeros_like(cov)
    for i in range(mean.size):
        h = rel_step * max(1.0, abs(mean[i]))
        e = np.zeros_like(mean)
        e[i] = h
        gm[i] = (log_z(mean + e, cov) - log_z(mean - e, cov)) / (2 * h)
    for i in range(cov.shape[0]):
        for j in range(cov.shape[1]):
            h = rel_step * max(1.0, abs(cov[i, j]))
            E = np.zeros_like(cov)
            E[i, j] = h
            gS[i, j] = (log_z(mean, cov + E) - log_z(mean, cov - E)) / (2 * h)
    return gm, gS


# Gradients smaller than this are compared absolutely: central differences of
# log Z carry round-off near eps |log Z| / h regardless of the gradient's size.
GRAD_FLOOR = 1e-3


def _rel_err(analytic, numeric) -> float:
    """Worst componentwise error relative to the largest gradient component."""
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), GRAD_FLOOR)
    return float(np.max(np.abs(a - n)) / scale)


def _g(mean, cov):
    return GaussianMoment._trusted(np.asarray(mean, float), np.asarray(cov, float))


def gradient_errors(n: int = 100, seed: int = 0) -> Dict[str, float]:
    """Worst relative gradient error per site family over ``n`` random cavities."""
    rng = np.random.default_rng(seed)
    worst = {"clutter": 0.0, "reactor": 0.0, "probit": 0.0, "gpc_utility": 0.0}
    params = ClutterParams()
    for _ in range(n):
        m = rng.uniform(-5, 5)
        v = math.exp(rng.uniform(math.log(0.05), math.log(20.0)))
        y = rng.uniform(-8, 8)
        t = clutter_tilted(_g([m], [[v]]), y, params)
        fd = fd_gradient(lambda a, S: clutter_tilted(_g(a, S), y, params).log_z, [m], [[v]])
        worst["clutter"] = max(worst["clutter"], _rel_err((t.d_mean, t.d_cov), fd))

        m = rng.uniform(-4, 4)
        v = math.exp(rng.uniform(math.log(0.05), math.log(10.0)))
        u = ReactorUtility(tau_crit=rng.uniform(-3, 3))
        a = int(rng.integers(0, 2))
        t = reactor_tilted(_g([m], [[v]]), u, a)
        fd = fd_gradient(lambda mm, S: reactor_tilted(_g(mm, S), u, a).log_z, [m], [[v]])
        worst["reactor"] = max(worst["reactor"], _rel_err((t.d_mean, t.d_cov), fd))

        m = rng.uniform(-4, 4)
        v = math.exp(rng.uniform(math.log(0.05), math.log(10.0)))
        yy = float(rng.choice([-1.0, 1.0]))
        t = probit_tilted(_g([m], [[v]]), yy)
        fd = fd_gradient(lambda mm, S: probit_tilted(_g(mm, S), yy).log_z, [m], [[v]])
        worst["probit"] = max(worst["probit"], _rel_err((t.d_mean, t.d_cov), fd))

        N = int(rng.integers(1, 7))
        X = rng.uniform(-5, 5, N)
        kern = RBFKernelParams.from_log(1.5, 1.0)
        pred = PredictiveSet.build(X, rng.uniform(-8, 8, 7), kern)
        uu = BinaryUtility4(1.0, 0.0, float(rng.uniform(0.05, 0.95)), 1.0)
        acts = rng.choice([-1, 1], size=pred.size)
        A = rng.standard_normal((N, N))
        cov = A @ A.T / N + 0.5 * np.eye(N)
        mean = rng.normal(0, 2, N)
        t = utility_tilted(_g(mean, cov), uu, acts, pred)
        fd = fd_gradient(lambda mm, S: utility_tilted(_g(mm, S), uu, acts, pred).log_z, mean, cov)
        worst["gpc_utility"] = max(worst["gpc_utility"], _rel_err((t.d_mean, t.d_cov), fd))
    return worst


def check_gradients(n: int = 100, seed: int = 0, tol: float = 1e-5) -> CheckResult:
    worst = gradient_errors(n, seed)
    ok = all(v < tol for v in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return CheckResult("gradients", ok, f"max rel err {detail} (tol {tol:g}, {n} cavities each)", metrics=worst)


# ---------------------------------------------------------------------------
# closed forms vs quadrature
# ---------------------------------------------------------------------------


def _quad(f, lo, hi, n=20001) -> float:
    x = np.linspace(lo, hi, n)
    return float(simpson(f(x), x=x))


def closed_form_errors(n: int = 50, seed: int = 1) -> Dict[str, float]:
    rng = np.random.default_rng(seed)
    worst = {"probit_marginal": 0.0, "gaussian_product": 0.0, "clutter_z": 0.0, "reactor_z": 0.0}
    params = ClutterParams(pi=float(rng.uniform(0.1, 0.9)), v_c=float(rng.uniform(2, 20)))
    for _ in range(n):
        m = rng.uniform(-5, 5)
        v = rng.uniform(0.0, 25.0) + 1e-3
        sd = math.sqrt(v)
        lo, hi = m - 12 * sd, m + 12 * sd
        dens = lambda x: np.exp(gauss_logpdf(x, m, v))

        closed = float(norm_cdf(m / math.sqrt(1 + v)))
        num = _quad(lambda x: dens(x) * norm_cdf(x), lo, hi)
        worst["probit_marginal"] = max(worst["probit_marginal"], abs(closed - num))

        b, B = rng.uniform(-5, 5), rng.uniform(0.1, 10.0)
        log_ev, post = gaussian_product(GaussianMoment.scalar(m, v), GaussianMoment.scalar(b, B))
        lo2, hi2 = min(lo, b - 12 * math.sqrt(B)), max(hi, b + 12 * math.sqrt(B))
        prod = lambda x: dens(x) * np.exp(gauss_logpdf(x, b, B))
        z = _quad(prod, lo2, hi2, 40001)
        mu = _quad(lambda x: x * prod(x), lo2, hi2, 40001) / z
        var = _quad(lambda x: (x - mu) ** 2 * prod(x), lo2, hi2, 40001) / z
        err = max(abs(math.exp(log_ev) - z), abs(post.m - mu), abs(post.v - var))
        worst["gaussian_product"] = max(worst["gaussian_product"], err)

        y = rng.uniform(-8, 8)
        closed = math.exp(clutter_tilted(GaussianMoment.scalar(m, v), y, params).log_z)
        lik = lambda x: np.exp(params.log_likelihood(y, x))
        num = _quad(lambda x: dens(x) * lik(x), min(lo, y - 12), max(hi, y + 12), 40001)
        worst["clutter_z"] = max(worst["clutter_z"], abs(closed - num))

        tau = rng.uniform(m - 3 * sd, m + 3 * sd)
        u = ReactorUtility(tau_crit=tau)
        for a in (0, 1):
            closed = math.exp(reactor_tilted(GaussianMoment.scalar(m, v), u, a).log_z)
            num = u.low(a) * _quad(dens, lo, tau) + u.high(a) * _quad(dens, tau, hi)
            worst["reactor_z"] = max(worst["reactor_z"], abs(closed - num))
    return worst


def check_closed_forms(n: int = 50, seed: int = 1, tol: float = 1e-8) -> CheckResult:
    worst = closed_form_errors(n, seed)
    ok = all(v < tol for v in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return CheckResult("closed_forms", ok, f"max abs err {detail} (tol {tol:g})", metrics=worst)


# ---------------------------------------------------------------------------
# oracles vs quadrature
# ---------------------------------------------------------------------------


def grid_clutter_posterior(y, params: ClutterParams, tau: float, half_width: float = 80.0, n: int = 200001):
    """Mean, variance and P(phi >= tau) by Simpson quadrature split at ``tau``."""
    y = np.asarray(y, float)

    def unnorm(x):
        lp = gauss_logpdf(x, 0.0, params.v_0) + params.log_likelihood(y[:, None], x[None, :]).sum(axis=0)
        return lp

    x = np.linspace(-half_width, half_width, n)
    shift = float(np.max(unnorm(x)))
    f = lambda t: np.exp(unnorm(t) - shift)
    xl = np.linspace(-half_width, tau, n // 2 + 1)
    xh = np.linspace(tau, half_width, n // 2 + 1)
    zl = float(simpson(f(xl), x=xl))
    zh = float(simpson(f(xh), x=xh))
    Z = zl + zh
    m1 = (float(simpson(xl * f(xl), x=xl)) + float(simpson(xh * f(xh), x=xh))) / Z
    m2 = (float(simpson((xl - m1) ** 2 * f(xl), x=xl)) + float(simpson((xh - m1) ** 2 * f(xh), x=xh))) / Z
    return m1, m2, zh / Z


def check_enumeration(n_sets: int = 10, seed: int = 2, tol: float = 1e-8) -> CheckResult:
    rng = np.random.default_rng(seed)
    params = ClutterParams()
    worst = 0.0
    for k in range(n_sets):
        N = k % 10 + 1
        y = simulate_clutter(rng, N, rng.uniform(-3, 6), params)
        tau = float(rng.uniform(-2, 5))
        post = exact_clutter_posterior(y, params)
        m, v, p = grid_clutter_posterior(y, params, tau)
        worst = max(worst, abs(post.mean() - m), abs(post.var() - v), abs(post.sf(tau) - p))
    return CheckResult(
        "enumeration",
        worst < tol,
        f"max abs err {worst:.1e} in mean/var/tail over {n_sets} datasets, N<=10 (tol {tol:g})",
        metrics={"max_err": worst},
    )


def check_ess_two_point(n_samples: int = 20000, seed: int = 0, n_sigma: float = 3.0) -> CheckResult:
    from lossep.demos import TWO_POINT_KERNEL, TWO_POINT_X, TWO_POINT_Y, two_point_grid

    grid = two_point_grid().moments()
    K = kernel_matrix(TWO_POINT_X, TWO_POINT_KERNEL)
    s = ess_sample_probit(np.linalg.cholesky(K), TWO_POINT_Y, ESSConfig(n_samples=n_samples, seed=seed))
    mean = s.mean(axis=0)
    se_m = batch_means_stderr(s)
    sq = (s - mean) ** 2
    var = sq.mean(axis=0)
    se_v = batch_means_stderr(sq)
    z = np.concatenate([np.abs(mean - grid.mean) / se_m, np.abs(var - np.diag(grid.cov)) / se_v])
    return CheckResult(
        "ess_two_point",
        bool(np.all(z < n_sigma)),
        f"ESS vs grid means/variances at {float(np.max(z)):.2f} MC std errs max (limit {n_sigma:g})",
        metrics={"max_z": float(np.max(z))},
    )


# ---------------------------------------------------------------------------
# EP fixed points
# ---------------------------------------------------------------------------

FIXED_POINT_CONFIG = EPConfig(tol=1e-10, max_sweeps=2000)


# The first ten seeds from 10000 on which EP converges under
# FIXED_POINT_CONFIG (see clutter_fixed_point_seeds). The skipped seeds 10000,
# 10002, 10003, 10004, 10010 and 10013 have spread-out multimodal posteriors on
# which EP keeps cycling even at damping 0.1.
CLUTTER_FIXED_POINT_SEEDS = (10001, 10005, 10006, 10007, 10008, 10009, 10011, 10012, 10014, 10015)


def clutter_fixed_point_seeds(n: int = 10, start: int = 10_000, params: ClutterParams = ClutterParams()):
    """First ``n`` seeds from ``start`` whose N=8 clutter data let EP converge.

    Returns ``(seeds, skipped)``.
    """
    seeds, skipped = [], []
    k = start
    while len(seeds) < n:
        rng = np.random.default_rng(k)
        y = simulate_clutter(rng, 8, rng.uniform(-3, 6), params)
        _, d = clutter_ep(y, params, FIXED_POINT_CONFIG)
        (seeds if d.converged else skipped).append(k)
        k += 1
    return seeds, skipped


def clutter_dataset(seed: int, params: ClutterParams = ClutterParams()):
    rng = np.random.default_rng(seed)
    return simulate_clutter(rng, 8, rng.uniform(-3, 6), params)


def fixed_point_datasets():
    """Pinned instances: ten clutter sets (N=8) and five GPC sets (N=15)."""
    from lossep.experiments import SweepConfig, simulate_dataset

    clutter = [clutter_dataset(s) for s in CLUTTER_FIXED_POINT_SEEDS]
    cfg = SweepConfig()
    gpc = [simulate_dataset(20_000 + k, cfg) for k in range(5)]
    return clutter, gpc


def check_fixed_points(tol_clutter: float = 1e-6, tol_gpc: float = 1e-5) -> CheckResult:
    clutter, gpc = fixed_point_datasets()
    params = ClutterParams()
    res_c, res_g, unconverged = [], [], 0
    for y in clutter:
        state, d = clutter_ep(y, params, FIXED_POINT_CONFIG)
        unconverged += not d.converged
        res_c.append(fixed_point_residual(state, ClutterModel(y, params)))
    kern = RBFKernelParams.from_log(1.5, 1.0)
    for data in gpc:
        r = ep_gpc(data, kern, FIXED_POINT_CONFIG)
        unconverged += not r.diagnostics.converged
        res_g.append(fixed_point_residual(r.state, ProbitModel(data.y)))
    ok = unconverged == 0 and max(res_c) < tol_clutter and max(res_g) < tol_gpc
    return CheckResult(
        "fixed_points",
        ok,
        f"max residual clutter {max(res_c):.1e} (tol {tol_clutter:g}), GPC {max(res_g):.1e} "
        f"(tol {tol_gpc:g}), {unconverged} unconverged",
        metrics={"clutter": max(res_c), "gpc": max(res_g), "unconverged": unconverged},
    )


# ---------------------------------------------------------------------------
# decisions and the metric
# ---------------------------------------------------------------------------


def random_utility(rng) -> BinaryUtility4:
    while True:
        u = BinaryUtility4(*rng.uniform(-1.0, 2.0, 4))
        try:
            u.validate()
            return u
        except BiasUndefined:
            continue


def brute_force_action(p_plus: float, u: BinaryUtility4) -> int:
    """Enumerate both actions; ties go to +1."""
    plus = u.u10 * (1 - p_plus) + u.u11 * p_plus
    minus = u.u00 * (1 - p_plus) + u.u01 * p_plus
    return 1 if plus >= minus else -1


def check_action_rules(n: int = 1000, seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    mism_q = mism_b = 0
    for _ in range(n):
        u = random_utility(rng)
        m, v = rng.normal(0, 3), rng.uniform(0, 10)
        p = float(norm_cdf(m / math.sqrt(1 + v)))
        mism_q += int(q_action(m, v, u)) != brute_force_action(p, u)
        p = float(rng.random())
        mism_b += int(bayes_optimal_actions(p, u)) != brute_force_action(p, u)
    return CheckResult(
        "action_rules",
        mism_q == 0 and mism_b == 0,
        f"{mism_q} q_action and {mism_b} bayes_optimal_actions mismatches in {n} draws each",
        metrics={"q_action": mism_q, "bayes": mism_b},
    )


def check_metric_invariants(n: int = 500, seed: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        u = random_utility(rng)
        p = rng.random(int(rng.integers(1, 60)))
        a = bayes_optimal_actions(p, u)
        try:
            best = evaluate(a, p, u).metric
            worst = evaluate(-a, p, u).metric
        except DegenerateMetric:
            continue
        other = evaluate(rng.choice([-1, 1], size=p.size), p, u).metric
        bad += not (best == 0.0 and worst == 1.0 and 0.0 <= other <= 1.0)
    return CheckResult("metric_invariants", bad == 0, f"{bad} violations in {n} trials", metrics={"violations": bad})


CHECKS: Dict[str, Callable[[], CheckResult]] = {
    "gradients": check_gradients,
    "closed_forms": check_closed_forms,
    "enumeration": check_enumeration,
    "ess_two_point": check_ess_two_point,
    "fixed_points": check_fixed_points,
    "action_rules": check_action_rules,
    "metric_invariants": check_metric_invariants,
}


def run_all(names=None, report=None) -> List[CheckResult]:
    out = []
    for name, fn in CHECKS.items():
        if names and name not in names:
            continue
        r = _timed(name, fn)
        if report:
            report(r)
        out.append(r)
    return out
