"""Multi-product newsvendor under Student-t demand with spike contamination.

Each replication draws clean Student-t training demand, contaminates the
test demand with a Gaussian spike far in the upper tail, fits the shared
Student-t posterior predictive, and sweeps robustness tolerances for every
method. Out-of-sample cost is summarised by its mean, SD and
MSD = (mean + sd) / 2.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from ..calibrate import calibrate_bulk
from ..centres import AcceptanceShortfall, StudentTPredictive, fit_student_t_gibbs, rejection_sample_bulk
from ..core import FrontierPoint, NewsvendorLoss
from ..kernels import newsvendor_losses
from ..solve import (build_kl_bdro_objective, build_kl_dual_objective, build_lv_objective,
                     minimize)
from .common import replication_seed

METHODS = ("LV", "KL-Empirical", "KL-BAS_PP", "KL-BDRO")


class HarnessError(RuntimeError):
    """A solver or calibration failure, annotated with where it happened."""


@dataclass(frozen=True)
class NewsvendorConfig:
    d: int = 5
    nu: float = 3.0
    mu: float = 30.0
    scale: float = 10.0
    scale_step: float = 0.1
    rho: float = 0.6
    h: float = 3.0
    b: float = 8.0
    n_train: int = 2000
    n_test: int = 500
    replications: int = 20
    contamination: float = 0.2
    spike_shift: float = 6.0
    spike_cov_scale: float = 0.05
    budget: int = 2500            # M, predictive draws / retained Gibbs states
    lv_saa_fraction: float = 0.5  # LV keeps the first fraction*M in-bulk draws
    m_post: int = 50
    m_pred: int = 50
    gamma: float = 0.05
    delta: float = 0.05
    fit_ratio: float = 0.5
    burn_in: int = 200
    ridge: float = 1e-6
    grid_size: int = 24
    lv_grid: tuple | None = None
    kl_grid: tuple | None = None
    kl_max: float = 25.0
    tol: float = 1e-6
    max_iters: int = 5000
    workers: int = 1

    def __post_init__(self):
        if self.d < 1 or self.n_train <= self.d or self.n_test < 1 or self.replications < 1:
            raise ValueError("invalid sizes in NewsvendorConfig")
        if not 0 <= self.contamination <= 1:
            raise ValueError("contamination must lie in [0, 1]")
        if self.nu <= 0 or self.h <= 0 or self.b <= 0:
            raise ValueError("nu, h and b must be positive")
        if self.grid_size < 2:
            raise ValueError("grid_size must be at least 2")

    def scales(self) -> np.ndarray:
        return self.scale * (1.0 + self.scale_step * np.arange(self.d))

    def scale_matrix(self) -> np.ndarray:
        i = np.arange(self.d)
        R = self.rho ** np.abs(i[:, None] - i[None, :])
        s = self.scales()
        return R * np.outer(s, s)

    def lv_tolerances(self) -> np.ndarray:
        """0 followed by ``grid_size`` log-spaced values in (0, 1]."""
        if self.lv_grid is not None:
            return np.asarray(self.lv_grid, dtype=float)
        return np.concatenate([[0.0], np.logspace(-3, 0, self.grid_size)])

    def kl_tolerances(self) -> np.ndarray:
        """``grid_size`` values in (0, kl_max]: log-spaced points plus 5 and 10."""
        if self.kl_grid is not None:
            return np.asarray(self.kl_grid, dtype=float)
        base = np.logspace(-2, math.log10(self.kl_max), self.grid_size - 2)
        return np.unique(np.round(np.concatenate([base, [5.0, 10.0]]), 12))

    def loss(self) -> NewsvendorLoss:
        return NewsvendorLoss(self.h, self.b, self.d)


def _student_t(rng, n, mu, L, nu):
    z = rng.standard_normal((n, mu.size)) @ L.T
    g = rng.chisquare(nu, size=n) / nu
    return mu + z / np.sqrt(g)[:, None]


def generate_newsvendor_data(cfg: NewsvendorConfig, seed=None):
    """Clean Student-t training demand and spike-contaminated test demand.

    Returns ``(train, test, is_spike)``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mu = np.full(cfg.d, cfg.mu)
    Sigma = cfg.scale_matrix()
    L = np.linalg.cholesky(Sigma)
    train = _student_t(rng, cfg.n_train, mu, L, cfg.nu)
    clean = _student_t(rng, cfg.n_test, mu, L, cfg.nu)
    spike_mean = mu + cfg.spike_shift * np.sqrt(np.diag(Sigma))
    spikes = spike_mean + rng.standard_normal((cfg.n_test, cfg.d)) @ (math.sqrt(cfg.spike_cov_scale) * L).T
    is_spike = rng.random(cfg.n_test) < cfg.contamination
    test = np.where(is_spike[:, None], spikes, clean)
    return train, test, is_spike


def saa_quantile_policy(train: np.ndarray, h: float, b: float) -> np.ndarray:
    """Per-coordinate ``ceil(n b / (h + b))``-th order statistic (the SAA newsvendor solution)."""
    n = train.shape[0]
    k = min(max(int(math.ceil(n * b / (h + b) - 1e-9)), 1), n)
    return np.sort(train, axis=0)[k - 1].copy()


@dataclass
class _RepInputs:
    train: np.ndarray
    test: np.ndarray
    bulk: object
    predictive: StudentTPredictive
    x0: np.ndarray


def _prepare(cfg: NewsvendorConfig, seed: int, r: int, n_states: int) -> tuple[_RepInputs, list]:
    ss = replication_seed(seed, r)
    s_data, s_split, s_gibbs, s_lv, s_bdro, s_pp = ss.spawn(6)
    train, test, _ = generate_newsvendor_data(cfg, np.random.default_rng(s_data))
    _, cal, bulk = calibrate_bulk(train, "ellipsoid", cfg.gamma, cfg.delta, cfg.fit_ratio,
                                  seed=np.random.default_rng(s_split))
    if bulk is None:
        raise HarnessError(f"replication {r}: bulk calibration failed ({cal.message})")
    pred = fit_student_t_gibbs(train, cfg.nu, iters=cfg.burn_in + n_states, burn_in=cfg.burn_in,
                               ridge=cfg.ridge, seed=np.random.default_rng(s_gibbs))
    x0 = saa_quantile_policy(train, cfg.h, cfg.b)
    return _RepInputs(train, test, bulk, pred, x0), [s_lv, s_bdro, s_pp]


def _truncate(pred: StudentTPredictive, n: int) -> StudentTPredictive:
    return replace(pred, mus=pred.mus[:n], chols=pred.chols[:n])


def _oracles(cfg, inp: _RepInputs, method: str, budget: int, m_post: int, m_pred: int, seeds):
    """Return ``(tolerances, eps -> oracle)`` for one method."""
    loss = cfg.loss()
    pred = _truncate(inp.predictive, budget)
    s_lv, s_bdro, s_pp = seeds
    if method == "LV":
        k = max(1, int(round(cfg.lv_saa_fraction * budget)))
        try:
            S, _ = rejection_sample_bulk(pred, inp.bulk, k, max_draw_factor=budget / k,
                                         seed=np.random.default_rng(s_lv))
        except AcceptanceShortfall as exc:
            raise HarnessError(f"LV SAA at M={budget}: {exc}") from exc
        return cfg.lv_tolerances(), lambda e: build_lv_objective(loss, S, inp.bulk, e, check_membership=False)
    if method == "KL-Empirical":
        return cfg.kl_tolerances(), lambda e: build_kl_dual_objective(loss, inp.train, e)
    if method == "KL-BAS_PP":
        S = pred.sample(budget, np.random.default_rng(s_pp))
        return cfg.kl_tolerances(), lambda e: build_kl_dual_objective(loss, S, e)
    if method == "KL-BDRO":
        D = pred.sample_nested(m_post, m_pred, np.random.default_rng(s_bdro))
        return cfg.kl_tolerances(), lambda e: build_kl_bdro_objective(loss, D, e)
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


def _sweep(cfg, inp, method, r, budget, m_post, m_pred, seeds) -> list[dict]:
    rows = []
    tols, make = _oracles(cfg, inp, method, budget, m_post, m_pred, seeds)
    for eps in tols:
        try:
            rep = minimize(make(float(eps)), inp.x0, tol=cfg.tol, max_iters=cfg.max_iters)
        except Exception as exc:
            raise HarnessError(f"method={method} eps={eps:g} replication={r}: {exc}") from exc
        cost = newsvendor_losses(rep.x, np.ascontiguousarray(inp.test), cfg.h, cfg.b)
        fp = FrontierPoint.from_stats(eps, cost.mean(), cost.std(ddof=1), rep.seconds)
        rows.append({"method": method, "tolerance": fp.tolerance, "replication": r,
                     "budget": budget, "oos_mean": fp.oos_mean, "oos_sd": fp.oos_sd,
                     "msd": fp.msd, "certified": rep.certified, "solve_seconds": fp.solve_seconds})
    return rows


def _frontier_rep(args):
    cfg, methods, seed, r = args
    inp, seeds = _prepare(cfg, seed, r, cfg.budget)
    out = []
    for m in methods:
        out.extend(_sweep(cfg, inp, m, r, cfg.budget, cfg.m_post, cfg.m_pred, seeds))
    return out


def _map(fn, jobs, workers):
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


def aggregate(rows: list[dict], keys=("method", "tolerance")) -> list[dict]:
    """Average per-replication rows over replications, one row per ``keys`` group.

    ``msd`` is recomputed from the averaged mean and SD; ``msd_rep_sd`` is the
    spread of the per-replication MSD.
    """
    groups: dict = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    out = []
    for key in sorted(groups):
        g = groups[key]
        m = float(np.mean([x["oos_mean"] for x in g]))
        s = float(np.mean([x["oos_sd"] for x in g]))
        msds = np.array([x["msd"] for x in g])
        rec = dict(zip(keys, key))
        rec.update({"replications": len(g), "oos_mean": m, "oos_sd": s, "msd": 0.5 * (m + s),
                    "msd_rep_sd": float(msds.std(ddof=1)) if len(g) > 1 else 0.0,
                    "solve_seconds": float(np.mean([x["solve_seconds"] for x in g]))})
        out.append(rec)
    return out


def run_newsvendor_frontier(cfg: NewsvendorConfig, methods=METHODS, seed: int = 0) -> dict:
    """Tolerance sweep for every method and replication.

    Returns ``{"replications": per-replication rows, "frontier": aggregated rows}``,
    both sorted by (method, tolerance[, replication]).
    """
    methods = tuple(methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
    reps = _map(_frontier_rep, [(cfg, methods, seed, r) for r in range(cfg.replications)], cfg.workers)
    rows = sorted((x for rep in reps for x in rep),
                  key=lambda x: (x["method"], x["tolerance"], x["replication"]))
    return {"replications": rows, "frontier": aggregate(rows)}


def frontier_points(frontier_rows: list[dict], method: str) -> list[FrontierPoint]:
    return [FrontierPoint(r["tolerance"], r["oos_mean"], r["oos_sd"], r["msd"], r["solve_seconds"])
            for r in frontier_rows if r["method"] == method]


# ---------------------------------------------------------------------------
# sample efficiency

def balanced_pair(M: int) -> tuple[int, int, bool]:
    """Nearest ``(m_post, m_pred)`` with ``m_post = m_pred`` and product close to M."""
    m = max(1, int(round(math.sqrt(M))))
    return m, m, m * m == M


def _efficiency_rep(args):
    cfg, methods, budgets, seed, r = args
    inp, seeds = _prepare(cfg, seed, r, max(budgets))
    out = []
    for M in budgets:
        mp, mq, _ = balanced_pair(M)
        for m in methods:
            out.extend(_sweep(cfg, inp, m, r, M, mp, mq, seeds))
    return out


DEFAULT_BUDGETS = (25, 100, 400, 900, 1600, 2500, 4900)


def run_sample_efficiency(cfg: NewsvendorConfig, budgets=DEFAULT_BUDGETS,
                          methods=("LV", "KL-BAS_PP", "KL-BDRO"), seed: int = 0) -> dict:
    """Deviation of each MSD curve from the curve at the largest budget.

    ``delta_msd(M) = mean over tolerances of |MSD_M(eps) - MSD_Mmax(eps)|``
    with MSD averaged over replications. KL-BDRO uses the balanced split
    ``m_post = m_pred = round(sqrt(M))``; non-square budgets are flagged.
    """
    budgets = tuple(sorted(set(int(b) for b in budgets)))
    if len(budgets) < 1 or budgets[0] < 1:
        raise ValueError("budgets must be positive integers")
    reps = _map(_efficiency_rep, [(cfg, tuple(methods), budgets, seed, r)
                                  for r in range(cfg.replications)], cfg.workers)
    rows = [x for rep in reps for x in rep]
    curves = aggregate(rows, keys=("method", "budget", "tolerance"))
    ref_budget = budgets[-1]
    ref = {(c["method"], c["tolerance"]): c["msd"] for c in curves if c["budget"] == ref_budget}
    table = []
    for m in methods:
        for M in budgets:
            devs = [abs(c["msd"] - ref[(m, c["tolerance"])]) for c in curves
                    if c["method"] == m and c["budget"] == M]
            mp, mq, exact = balanced_pair(M)
            table.append({"method": m, "budget": M,
                          "m_post": mp if m == "KL-BDRO" else 0,
                          "m_pred": mq if m == "KL-BDRO" else M,
                          "balanced_exact": exact if m == "KL-BDRO" else True,
                          "delta_msd": float(np.mean(devs))})
    return {"curves": curves, "deviation": table}
