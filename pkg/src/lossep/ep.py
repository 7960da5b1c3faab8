"""
Damped EP fixed-point loop with an optional loss-calibration (utility) site.

The global approximation is ``prior * prod(sites)``. The prior is kept in
moment form with Cholesky factor ``L``; all sites are natural-parameter
factors. Moments of any partial product are computed as
``S = L B^-1 L^T`` with ``B = I + L^T Lam L`` (``Lam`` the summed site
precision), which stays accurate for badly conditioned GP priors and doubles
as the properness test (``B`` positive definite).

Site order is a fresh random permutation per sweep, the utility site shuffled
in with the data sites. At every visit of the utility site the actions are
re-selected against its cavity before projecting.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.linalg import solve_triangular

from lossep.gauss import (
    GaussianMoment,
    GaussianNatural,
    ImproperDensity,
    NonPosteriorizableMoments,
    natural_grad,
    natural_increment,
    tilted_moments,
)

log = logging.getLogger(__name__)

DATA = "data"
UTILITY = "utility"


class ImproperCavity(ImproperDensity):
    pass


class DivergenceDetected(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Site:
    id: int
    kind: str
    params: GaussianNatural
    # coordinates the factor touches; None means all of them
    scope: Optional[Tuple[int, ...]] = None

    def embedded(self, dim: int) -> GaussianNatural:
        if self.scope is None:
            return self.params
        return self.params.embed(self.scope, dim)


@dataclass(frozen=True)
class EPConfig:
    damping: float = 0.5
    max_sweeps: int = 200
    tol: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    raise_on_divergence: bool = False

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")


@dataclass(frozen=True, eq=False)
class Tilted:
    """Log-normalizer of a tilted density and its moment-coordinate gradients."""

    log_z: float
    d_mean: np.ndarray
    d_cov: np.ndarray

    def natural_grad(self, cavity: GaussianMoment):
        return natural_grad(cavity, self.d_mean, self.d_cov)

    def moments(self, cavity: GaussianMoment) -> GaussianMoment:
        return tilted_moments(cavity, self.d_mean, self.d_cov)


class TiltedModel(Protocol):
    dim: int
    n_sites: int

    def scope(self, i: int) -> Optional[Sequence[int]]: ...

    def tilted(self, i: int, cavity: GaussianMoment) -> Tilted: ...


class UtilityTerm(Protocol):
    def select_actions(self, cavity: GaussianMoment) -> Any: ...

    def tilted(self, cavity: GaussianMoment, actions: Any) -> Tilted: ...


@dataclass
class Diagnostics:
    converged: bool = False
    sweeps: int = 0
    deltas: List[float] = field(default_factory=list)
    skipped: List[int] = field(default_factory=list)
    rollbacks: int = 0
    failure: Optional[str] = None

    @property
    def n_skipped(self) -> int:
        return int(sum(self.skipped))


class EPState:
    """Prior, sites, and the cached moments of their product."""

    def __init__(self, prior: GaussianMoment, sites: List[Site]):
        self.prior = prior
        self.sites = list(sites)
        self.sweep = 0
        self._L = np.linalg.cholesky(prior.cov)
        self._Linv_m0 = solve_triangular(self._L, prior.mean, lower=True)
        self.refresh()

    def refresh(self) -> None:
        """Recompute the running site totals and ``q_bar`` from scratch."""
        d = self.dim
        self._t1 = np.zeros(d)
        self._t2 = np.zeros((d, d))
        for s in self.sites:
            _accumulate(self._t1, self._t2, s, 1.0)
        self.q_bar = self.moments()

    def replace(self, j: int, site: Site, q_bar: Optional[GaussianMoment] = None) -> None:
        """Swap in a new version of the site at position ``j``."""
        _accumulate(self._t1, self._t2, self.sites[j], -1.0)
        _accumulate(self._t1, self._t2, site, 1.0)
        self.sites[j] = site
        self.q_bar = self.moments() if q_bar is None else q_bar

    @property
    def dim(self) -> int:
        return self.prior.dim

    @property
    def prior_natural(self) -> GaussianNatural:
        return self.prior.to_natural()

    def site_totals(self, exclude=()) -> Tuple[np.ndarray, np.ndarray]:
        """Summed ``(theta1, theta2)`` of all sites not in ``exclude``, in full dimension."""
        t1 = self._t1.copy()
        t2 = self._t2.copy()
        for s in self.sites:
            if s.id in exclude:
                _accumulate(t1, t2, s, -1.0)
        return t1, t2

    def moments(self, exclude=(), sites: Optional[List[Site]] = None) -> GaussianMoment:
        """Moments of ``prior * prod(sites not excluded)``; ImproperDensity if improper.

        ``sites`` evaluates a different site list without touching the state.
        """
        if sites is not None:
            h = np.zeros(self.dim)
            t2 = np.zeros((self.dim, self.dim))
            for s in sites:
                if s.id not in exclude:
                    _accumulate(h, t2, s, 1.0)
        else:
            h, t2 = self.site_totals(exclude)
        return self._moments_from(h, t2)

    def moments_swapped(self, j: int, site: Site) -> GaussianMoment:
        """Moments with the site at position ``j`` replaced by ``site``."""
        h = self._t1.copy()
        t2 = self._t2.copy()
        _accumulate(h, t2, self.sites[j], -1.0)
        _accumulate(h, t2, site, 1.0)
        return self._moments_from(h, t2)

    def _moments_from(self, h, t2) -> GaussianMoment:
        L = self._L
        B = np.eye(self.dim) + L.T @ (-2.0 * t2) @ L
        B = 0.5 * (B + B.T)
        try:
            C = np.linalg.cholesky(B)
        except np.linalg.LinAlgError:
            raise ImproperDensity("site product is improper") from None
        W = solve_triangular(C, L.T, lower=True, check_finite=False)
        cov = W.T @ W
        mean = W.T @ (W @ h + solve_triangular(C, self._Linv_m0, lower=True, check_finite=False))
        # S = W^T W with W full rank, so PD by construction
        return GaussianMoment._trusted(mean, cov)

    @property
    def q_natural_bar(self) -> GaussianNatural:
        """``prior + sum(sites)`` in natural coordinates, recomputed from scratch."""
        q = self.prior_natural
        for s in self.sites:
            q = q + s.embedded(self.dim)
        return q

    def q(self) -> GaussianMoment:
        """The posterior approximation: every site except the utility site."""
        util = [s.id for s in self.sites if s.kind == UTILITY]
        return self.moments(exclude=util) if util else self.q_bar


def _accumulate(t1, t2, site: Site, sign: float) -> None:
    p = site.params
    if site.scope is None:
        t1 += sign * p.theta1
        t2 += sign * p.theta2
    elif len(site.scope) == 1:
        i = site.scope[0]
        t1[i] += sign * p.theta1[0]
        t2[i, i] += sign * p.theta2[0, 0]
    else:
        idx = np.asarray(site.scope)
        t1[idx] += sign * p.theta1
        t2[np.ix_(idx, idx)] += sign * p.theta2


def cavity(state: EPState, i: int) -> GaussianNatural:
    """Natural parameters of the approximation with site ``i`` divided out."""
    site = _site(state, i)
    return state.q_natural_bar - site.embedded(state.dim)


def cavity_moment(state: EPState, i: int) -> GaussianMoment:
    """Cavity for site ``i`` in moment form; raises :class:`ImproperCavity`."""
    _site(state, i)
    try:
        return state.moments(exclude=(i,))
    except ImproperDensity:
        raise ImproperCavity(f"cavity for site {i} is improper") from None


def _site(state: EPState, i: int) -> Site:
    for s in state.sites:
        if s.id == i:
            return s
    raise KeyError(f"no site with id {i}")


def damped(old: GaussianNatural, increment: GaussianNatural, damping: float) -> GaussianNatural:
    return GaussianNatural._trusted(
        damping * increment.theta1 + (1.0 - damping) * old.theta1,
        damping * increment.theta2 + (1.0 - damping) * old.theta2,
    )


def site_update(old: Site, q_new: GaussianNatural, cav: GaussianNatural, damping: float) -> Site:
    """Damped site step ``delta (q_new - cavity) + (1 - delta) old`` in natural coordinates."""
    if not 0.0 <= damping <= 1.0:
        raise ValueError("damping must lie in [0, 1]")
    inc = q_new - cav
    return Site(old.id, old.kind, damped(old.params, inc, damping), old.scope)


def _max_change(a: GaussianNatural, b: GaussianNatural) -> float:
    return max(
        float(np.max(np.abs(a.theta1 - b.theta1))),
        float(np.max(np.abs(a.theta2 - b.theta2))),
    )


def init_state(model: TiltedModel, prior: GaussianMoment, with_utility: bool) -> EPState:
    sites = []
    for i in range(model.n_sites):
        scope = model.scope(i)
        k = prior.dim if scope is None else len(scope)
        sites.append(Site(i, DATA, GaussianNatural.zeros(k), None if scope is None else tuple(scope)))
    if with_utility:
        sites.append(Site(model.n_sites, UTILITY, GaussianNatural.zeros(prior.dim)))
    return EPState(prior, sites)


def _run(model, prior, config: EPConfig, utility=None):
    state = init_state(model, prior, utility is not None)
    diag = Diagnostics()
    rng = np.random.default_rng(config.seed)
    n_total = len(state.sites)
    actions = None

    for sweep in range(config.max_sweeps):
        order = rng.permutation(n_total) if config.shuffle else np.arange(n_total)
        max_delta = 0.0
        skipped = 0
        for j in order:
            site = state.sites[j]
            try:
                cav = cavity_moment(state, site.id)
            except ImproperCavity:
                skipped += 1
                continue
            if site.scope is not None:
                cav = cav.marginal(site.scope)
            if site.kind == UTILITY:
                a = utility.select_actions(cav)
                t = utility.tilted(cav, a)
            else:
                t = model.tilted(site.id, cav)
            if not np.isfinite(t.log_z):
                skipped += 1
                continue
            try:
                inc = natural_increment(cav, t.d_mean, t.d_cov)
            except NonPosteriorizableMoments:
                skipped += 1
                continue
            new = Site(site.id, site.kind, damped(site.params, inc, config.damping), site.scope)
            try:
                q_bar = state.moments_swapped(j, new)
            except ImproperDensity:
                diag.rollbacks += 1
                skipped += 1
                if config.raise_on_divergence:
                    raise DivergenceDetected(
                        f"update of site {site.id} in sweep {sweep} made q improper"
                    ) from None
                continue
            max_delta = max(max_delta, _max_change(site.params, new.params))
            state.replace(j, new, q_bar)
            if site.kind == UTILITY:
                actions = a
        # drop accumulated round-off in the running totals
        try:
            state.refresh()
        except ImproperDensity:
            pass
        state.sweep = sweep + 1
        diag.sweeps = sweep + 1
        diag.deltas.append(max_delta)
        diag.skipped.append(skipped)
        if n_total and skipped == n_total:
            diag.failure = f"every site skipped in sweep {sweep}"
            log.warning(diag.failure)
            break
        if max_delta < config.tol:
            diag.converged = True
            break
    return state, actions, diag


def run_ep(model: TiltedModel, prior: GaussianMoment, config: EPConfig = EPConfig()):
    """Standard EP over the data sites of ``model``. Returns ``(state, diagnostics)``."""
    state, _, diag = _run(model, prior, config)
    return state, diag


def run_loss_ep(
    model: TiltedModel,
    utility: UtilityTerm,
    prior: GaussianMoment,
    config: EPConfig = EPConfig(),
):
    """Loss-calibrated EP: data sites plus one utility site.

    Returns ``(state, actions, diagnostics)``; ``actions`` come from the last
    accepted utility-site visit and ``state.q()`` excludes the utility site.
    """
    return _run(model, prior, config, utility)


def fixed_point_residual(state: EPState, model: TiltedModel, utility: UtilityTerm = None) -> float:
    """Largest gap between tilted and current mean parameters over all sites.

    Sites with an improper cavity are left out, as EP would skip them.
    """
    worst = 0.0
    for site in state.sites:
        try:
            cav = cavity_moment(state, site.id)
        except ImproperCavity:
            continue
        cur = state.q_bar
        if site.scope is not None:
            cav = cav.marginal(site.scope)
            cur = cur.marginal(site.scope)
        if site.kind == UTILITY:
            t = utility.tilted(cav, utility.select_actions(cav))
        else:
            t = model.tilted(site.id, cav)
        tm = t.moments(cav).to_mean_params()
        qm = cur.to_mean_params()
        worst = max(
            worst,
            float(np.max(np.abs(tm.eta1 - qm.eta1))),
            float(np.max(np.abs(tm.eta2 - qm.eta2))),
        )
    return worst


__all__ = [
    "DATA",
    "UTILITY",
    "Site",
    "EPConfig",
    "EPState",
    "Tilted",
    "TiltedModel",
    "UtilityTerm",
    "Diagnostics",
    "ImproperCavity",
    "DivergenceDetected",
    "cavity",
    "cavity_moment",
    "site_update",
    "damped",
    "run_ep",
    "run_loss_ep",
    "fixed_point_residual",
]
