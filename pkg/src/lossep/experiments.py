"""
Utility-asymmetry by covariate-shift sweep for GP classification.

Each repeat simulates one training set (reused by every cell of that repeat,
so EP and Loss-EP results are paired), runs one elliptical slice sampling
chain on its exact posterior, and scores both methods' actions in every
(u10, predictive range) cell against that shared oracle.

Seeds are split from ``base_seed`` with :class:`numpy.random.SeedSequence`:
``spawn_key = (stream, *indices)`` where ``stream`` names the consumer
(dataset, predictive points, oracle chain, EP schedule). A row's ``seed`` is
the EP schedule seed for its (method, u10, range, repeat).
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from lossep import reporting
from lossep.ep import EPConfig
from lossep.gpc import (
    BinaryUtility4,
    GPCDataset,
    PredictiveSet,
    RBFKernelParams,
    actions_for,
    ep_gpc,
    kernel_matrix,
    loss_ep_gpc,
)
from lossep.oracle import ESSConfig, ess_sample_probit, evaluate, mc_predictive_prob
from lossep.special import norm_cdf

log = logging.getLogger(__name__)

METHODS = ("EP", "LossEP")

# SeedSequence stream tags
_DATA, _PRED, _ORACLE, _RUN = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class TooFewSamples(ValueError):
    pass


@dataclass(frozen=True)
class SweepConfig:
    n_train: int = 15
    train_range: Tuple[float, float] = (-10.0, 10.0)
    n_pred: int = 1000
    pred_ranges: Tuple[Tuple[float, float], ...] = ((-10.0, 10.0), (-8.0, 12.0), (-5.0, 15.0))
    u00: float = 1.0
    u01: float = 0.0
    u11: float = 1.0
    u10_grid: Tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 0.95)
    n_repeats: int = 20
    base_seed: int = 0
    log_sigma: float = 1.5
    log_ell: float = 1.0
    ess_samples: int = 20000
    ess_burnin: int = 2000
    damping: float = 0.5
    max_sweeps: int = 200
    tol: float = 1e-8
    alpha: float = 0.05

    def __post_init__(self):
        def bad(msg):
            raise ConfigError(msg)

        if self.n_train < 1 or self.n_pred < 1 or self.n_repeats < 1:
            bad("n_train, n_pred and n_repeats must be positive")
        for r in (self.train_range, *self.pred_ranges):
            if len(r) != 2 or not r[0] < r[1]:
                bad(f"range {r} must be [low, high] with low < high")
        if not self.pred_ranges or not self.u10_grid:
            bad("pred_ranges and u10_grid must be non-empty")
        if self.ess_samples < 1 or self.ess_burnin < 0:
            bad("ess_samples must be positive and ess_burnin non-negative")
        if not 0.0 < self.damping <= 1.0:
            bad("damping must lie in (0, 1]")
        if not 0.0 < self.alpha < 1.0:
            bad("alpha must lie in (0, 1)")
        if self.base_seed < 0:
            bad("base_seed must be non-negative")
        for u10 in self.u10_grid:
            try:
                self.utility(u10).validate()
            except ValueError as e:
                bad(f"u10={u10}: {e}")

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kw = dict(d)
        try:
            if "train_range" in kw:
                kw["train_range"] = tuple(float(v) for v in kw["train_range"])
            if "pred_ranges" in kw:
                kw["pred_ranges"] = tuple(tuple(float(v) for v in r) for r in kw["pred_ranges"])
            if "u10_grid" in kw:
                kw["u10_grid"] = tuple(float(v) for v in kw["u10_grid"])
            for k in ("n_train", "n_pred", "n_repeats", "base_seed", "ess_samples", "ess_burnin", "max_sweeps"):
                if k in kw:
                    if isinstance(kw[k], bool) or int(kw[k]) != kw[k]:
                        raise ConfigError(f"{k} must be an integer")
                    kw[k] = int(kw[k])
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from None
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_range"] = list(self.train_range)
        d["pred_ranges"] = [list(r) for r in self.pred_ranges]
        d["u10_grid"] = list(self.u10_grid)
        return d

    @property
    def kernel(self) -> RBFKernelParams:
        return RBFKernelParams.from_log(self.log_sigma, self.log_ell)

    def utility(self, u10: float) -> BinaryUtility4:
        return BinaryUtility4(u00=self.u00, u01=self.u01, u10=float(u10), u11=self.u11)

    @property
    def ep_config(self) -> EPConfig:
        return EPConfig(damping=self.damping, max_sweeps=self.max_sweeps, tol=self.tol)

    @property
    def n_cells(self) -> int:
        return len(self.u10_grid) * len(self.pred_ranges)


def derive_seed(base_seed: int, *keys: int) -> int:
    """Independent 32-bit seed for the stream named by ``keys``."""
    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def simulate_dataset(seed: int, config: SweepConfig = SweepConfig()) -> GPCDataset:
    """Uniform inputs, latents from the GP prior, labels ``+1`` w.p. ``Phi(f)``."""
    rng = np.random.default_rng(seed)
    lo, hi = config.train_range
    X = rng.uniform(lo, hi, config.n_train)
    K = kernel_matrix(X, config.kernel)
    f = np.linalg.cholesky(K) @ rng.standard_normal(config.n_train)
    y = np.where(rng.random(config.n_train) < norm_cdf(f), 1.0, -1.0)
    return GPCDataset(X, y)


def predictive_points(seed: int, lo: float, hi: float, n: int) -> np.ndarray:
    return np.random.default_rng(seed).uniform(lo, hi, n)


@dataclass(frozen=True)
class SweepRow:
    method: str
    u10: float
    pred_lo: float
    pred_hi: float
    repeat: int
    seed: int
    metric: float
    mc_stderr: float
    converged: bool
    sweeps: int
    skipped: int
    error: str = ""

    @property
    def failed(self) -> bool:
        return bool(self.error) or not self.converged

    def cell(self):
        return (self.u10, self.pred_lo, self.pred_hi)


ROW_HEADER = [
    "method",
    "u10",
    "pred_lo",
    "pred_hi",
    "repeat",
    "seed",
    "metric",
    "mc_stderr",
    "converged",
    "sweeps",
    "skipped",
    "error",
]


def run_repeat(config: SweepConfig, repeat: int) -> List[SweepRow]:
    """Every (method, cell) run for one simulated dataset, in canonical order."""
    data = simulate_dataset(derive_seed(config.base_seed, _DATA, repeat), config)
    kern = config.kernel
    K = kernel_matrix(data.X, kern)
    ess = ESSConfig(
        n_samples=config.ess_samples,
        n_burnin=config.ess_burnin,
        seed=derive_seed(config.base_seed, _ORACLE, repeat),
    )
    samples = ess_sample_probit(np.linalg.cholesky(K), data.y, ess)
    rows = []
    for si, (lo, hi) in enumerate(config.pred_ranges):
        pts = predictive_points(derive_seed(config.base_seed, _PRED, repeat, si), lo, hi, config.n_pred)
        pred = PredictiveSet.build(data.X, pts, kern, K)
        p_hat, p_se = mc_predictive_prob(samples, pred)
        for ui, u10 in enumerate(config.u10_grid):
            u = config.utility(u10)
            for mi, method in enumerate(METHODS):
                seed = derive_seed(config.base_seed, _RUN, mi, ui, si, repeat)
                rows.append(_one_run(method, data, kern, u, pred, p_hat, p_se, config, seed, lo, hi, repeat))
    return rows


def _one_run(method, data, kern, u, pred, p_hat, p_se, config, seed, lo, hi, repeat) -> SweepRow:
    ep_cfg = EPConfig(damping=config.damping, max_sweeps=config.max_sweeps, tol=config.tol, seed=seed)
    try:
        if method == "EP":
            res = ep_gpc(data, kern, ep_cfg)
        else:
            res = loss_ep_gpc(data, kern, u, pred, ep_cfg)
        a = actions_for(res.q, u, pred)
        rep = evaluate(a, p_hat, u, p_se)
        d = res.diagnostics
        return SweepRow(method, u.u10, lo, hi, repeat, seed, rep.metric, rep.mc_stderr, d.converged, d.sweeps, d.n_skipped)
    except Exception as e:  # recorded in the row; the sweep carries on
        log.warning("%s run failed (u10=%s, range=[%s, %s], repeat=%d): %s", method, u.u10, lo, hi, repeat, e)
        return SweepRow(method, u.u10, lo, hi, repeat, seed, math.nan, math.nan, False, 0, 0, f"{type(e).__name__}: {e}")


@dataclass(frozen=True)
class WilcoxonResult:
    p_value: float
    statistic: float  # W+, the sum of ranks of positive differences
    n_used: int
    n_zero: int
    z: float


def wilcoxon_signed_rank(differences) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test, normal approximation.

    Zero differences are dropped; tied magnitudes get midranks and the
    variance is reduced by ``sum(t^3 - t) / 48``. A continuity correction of
    0.5 is applied. With no nonzero differences the result is ``p = 1``.
    """
    d = np.asarray(differences, dtype=float).ravel()
    if np.any(~np.isfinite(d)):
        raise ValueError("differences must be finite")
    nz = d[d != 0.0]
    n_zero = d.size - nz.size
    n = nz.size
    if n == 0:
        return WilcoxonResult(1.0, 0.0, 0, n_zero, 0.0)
    if n < 6:
        raise TooFewSamples(f"{n} nonzero differences; the normal approximation needs at least 6")
    r = rankdata(np.abs(nz))
    w_plus = float(r[nz > 0].sum())
    mean = n * (n + 1) / 4.0
    _, t = np.unique(r, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(t**3 - t)) / 48.0
    if var <= 0.0:
        return WilcoxonResult(1.0, w_plus, n, n_zero, 0.0)
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    return WilcoxonResult(p, w_plus, n, n_zero, z)


@dataclass
class SweepResult:
    config: SweepConfig
    rows: List[SweepRow]
    cells: list = field(default_factory=list)
    tests: list = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def failures(self) -> List[SweepRow]:
        return [r for r in self.rows if r.failed]


CELL_HEADER = ["method", "u10", "pred_lo", "pred_hi", "n", "mean_metric", "stderr_metric", "n_failed"]
TEST_HEADER = [
    "u10",
    "pred_lo",
    "pred_hi",
    "n_pairs",
    "n_zero",
    "w_plus",
    "z",
    "p_value",
    "p_bonferroni",
    "significant",
    "status",
]


def summarize(config: SweepConfig, rows: Sequence[SweepRow]):
    """Per-cell mean and standard error, plus the paired EP vs Loss-EP test per cell."""
    by = {}
    for r in rows:
        by.setdefault((r.method, r.cell()), []).append(r)
    cells = []
    tests = []
    m = config.n_cells
    for lo, hi in config.pred_ranges:
        for u10 in config.u10_grid:
            cell = (float(u10), float(lo), float(hi))
            per = {}
            for method in METHODS:
                rs = sorted(by.get((method, cell), []), key=lambda r: r.repeat)
                per[method] = {r.repeat: r.metric for r in rs if not r.error}
                vals = np.array([r.metric for r in rs if not r.error], dtype=float)
                n = vals.size
                mean = float(vals.mean()) if n else math.nan
                se = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
                cells.append([method, u10, lo, hi, n, mean, se, sum(r.failed for r in rs)])
            common = sorted(set(per["EP"]) & set(per["LossEP"]))
            diffs = np.array([per["EP"][k] - per["LossEP"][k] for k in common], dtype=float)
            try:
                w = wilcoxon_signed_rank(diffs)
                pb = min(1.0, w.p_value * m)
                tests.append([u10, lo, hi, len(common), w.n_zero, w.statistic, w.z, w.p_value, pb,
                              pb < config.alpha, "ok" if w.n_used else "all_zero"])
            except TooFewSamples:
                nz = int(np.sum(diffs == 0.0))
                tests.append([u10, lo, hi, len(common), nz, math.nan, math.nan, math.nan, math.nan,
                              False, "too_few_samples"])
    return cells, tests


def _row_key(config: SweepConfig):
    u_idx = {float(u): i for i, u in enumerate(config.u10_grid)}
    s_idx = {(float(a), float(b)): i for i, (a, b) in enumerate(config.pred_ranges)}
    m_idx = {m: i for i, m in enumerate(METHODS)}
    return lambda r: (s_idx[(r.pred_lo, r.pred_hi)], u_idx[r.u10], r.repeat, m_idx[r.method])


def run_sweep(config: SweepConfig = SweepConfig(), jobs: int = 1, progress=None) -> SweepResult:
    """Run every repeat (optionally in ``jobs`` processes) and merge in canonical order."""
    t0 = time.perf_counter()
    repeats = range(config.n_repeats)
    rows: List[SweepRow] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            for k, part in enumerate(ex.map(run_repeat, [config] * config.n_repeats, repeats)):
                rows.extend(part)
                if progress:
                    progress(k + 1, config.n_repeats)
    else:
        for k in repeats:
            rows.extend(run_repeat(config, k))
            if progress:
                progress(k + 1, config.n_repeats)
    rows.sort(key=_row_key(config))
    cells, tests = summarize(config, rows)
    return SweepResult(config, rows, cells, tests, time.perf_counter() - t0)


def write_sweep(result: SweepResult, out) -> dict:
    out = Path(out)
    reporting.write_csv(
        out / "sweep_rows.csv",
        ROW_HEADER,
        ([getattr(r, k) for k in ROW_HEADER] for r in result.rows),
    )
    reporting.write_csv(out / "sweep_cells.csv", CELL_HEADER, result.cells)
    reporting.write_csv(out / "sweep_tests.csv", TEST_HEADER, result.tests)
    cfg = result.config
    manifest = {
        "command": "sweep",
        "config": cfg.to_dict(),
        "seeding": {
            "rule": "SeedSequence(entropy=base_seed, spawn_key=(stream, *indices)).generate_state(1)",
            "streams": {
                "dataset": [_DATA, "repeat"],
                "predictive_points": [_PRED, "repeat", "range_index"],
                "oracle_chain": [_ORACLE, "repeat"],
                "ep_schedule": [_RUN, "method_index", "u10_index", "range_index", "repeat"],
            },
            "dataset_seeds": [derive_seed(cfg.base_seed, _DATA, k) for k in range(cfg.n_repeats)],
            "oracle_seeds": [derive_seed(cfg.base_seed, _ORACLE, k) for k in range(cfg.n_repeats)],
        },
        "n_rows": len(result.rows),
        "n_failed": len(result.failures),
        "elapsed_seconds": result.elapsed,
        "files": ["sweep_rows.csv", "sweep_cells.csv", "sweep_tests.csv"],
    }
    reporting.write_manifest(out / "sweep_manifest.json", manifest)
    return manifest


__all__ = [
    "SweepConfig",
    "SweepRow",
    "SweepResult",
    "ConfigError",
    "TooFewSamples",
    "WilcoxonResult",
    "derive_seed",
    "simulate_dataset",
    "predictive_points",
    "run_repeat",
    "run_sweep",
    "summarize",
    "wilcoxon_signed_rank",
    "write_sweep",
]
