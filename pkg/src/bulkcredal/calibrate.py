"""Score fitting and DKW threshold selection for bulk sets.

A bulk set is a sublevel set ``{xi : s(xi) <= t}`` of a score fitted on one
half of the data.  The threshold is chosen on the other half as an order
statistic that clears the target mass uniformly over the DKW band, which
certifies ``P*(bulk) >= 1 - gamma`` with probability at least ``1 - delta``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .config import TOL
from .core import BoxBulk, DiscreteDistribution, EllipsoidBulk, ProductBulk, as_outcomes


class CalibrationError(ValueError):
    pass


# --------------------------------------------------------------------------
# Scores
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MahalanobisScore:
    center: np.ndarray
    chol: np.ndarray

    def __call__(self, xi) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(xi, dtype=float))
        z = solve_triangular(self.chol, (rows - self.center).T, lower=True)
        return np.sqrt(np.sum(z * z, axis=0))

    def bulk(self, t: float) -> EllipsoidBulk:
        return EllipsoidBulk(self.center, self.chol, t)

    @property
    def dim(self) -> int:
        return len(self.center)


@dataclass(frozen=True)
class ScaledBoxScore:
    center: np.ndarray
    widths: np.ndarray

    def __call__(self, xi) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(xi, dtype=float))
        return np.max(np.abs(rows - self.center) / self.widths, axis=1)

    def bulk(self, t: float) -> BoxBulk:
        return BoxBulk(self.center, self.widths, t)

    @property
    def dim(self) -> int:
        return len(self.center)


ScoreFunction = MahalanobisScore | ScaledBoxScore


def fit_score(data_fit, geometry: str = "ellipsoid", ridge: float = TOL.calib_ridge):
    """Fit a Mahalanobis (``"ellipsoid"``) or scaled-box (``"box"``) score.

    Only the fitting split should be passed here; the selection split must
    stay independent of the fitted score for the certificate to hold.
    """
    X = as_outcomes(data_fit)
    n, d = X.shape
    if n < d + 1:
        raise CalibrationError(f"need at least d + 1 = {d + 1} fitting rows, got {n}")
    mu = X.mean(axis=0)
    if geometry == "ellipsoid":
        cov = np.atleast_2d(np.cov(X, rowvar=False)) + ridge * np.eye(d)
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            lam = np.linalg.eigvalsh(cov).min()
            sign = "negative" if lam < 0 else "zero"
            raise CalibrationError(
                f"covariance not positive definite after ridge {ridge:g}: "
                f"smallest eigenvalue is {sign} ({lam:.3e})"
            ) from None
        return MahalanobisScore(mu, L)
    if geometry == "box":
        w = np.maximum(X.std(axis=0, ddof=1), ridge)
        return ScaledBoxScore(mu, w)
    raise ValueError(f"unknown geometry {geometry!r}")


def split_fit_select(data, fit_ratio: float = 0.5, seed=None):
    """Seeded random split into (fit, select) rows."""
    X = np.asarray(data)
    if not 0 < fit_ratio < 1:
        raise ValueError("fit_ratio must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(X.shape[0])
    n_fit = int(round(fit_ratio * X.shape[0]))
    return X[perm[:n_fit]], X[perm[n_fit:]]


# --------------------------------------------------------------------------
# DKW selection
# --------------------------------------------------------------------------

def dkw_radius(m: int, delta: float) -> float:
    """Two-sided DKW band half-width ``sqrt(log(2/delta) / (2m))``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return math.sqrt(math.log(2.0 / delta) / (2.0 * m))


def min_certifiable_m(gamma: float, delta: float) -> int:
    """Smallest selection size ``m`` with ``dkw_radius(m, delta) <= gamma``."""
    m = math.ceil(math.log(2.0 / delta) / (2.0 * gamma * gamma))
    # guard the closed form against rounding at the boundary
    while m > 1 and dkw_radius(m - 1, delta) <= gamma:
        m -= 1
    while dkw_radius(m, delta) > gamma:
        m += 1
    return m


@dataclass(frozen=True)
class CalibrationResult:
    threshold: float | None
    gamma: float
    delta: float
    m: int
    r_mdelta: float
    selected_index: int | None
    certified: bool
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "gamma": self.gamma,
            "delta": self.delta,
            "m": self.m,
            "r_mdelta": self.r_mdelta,
            "selected_index": self.selected_index,
            "certified": self.certified,
            "message": self.message,
        }


def _order_index(x: float) -> int:
    # ceil with a relative guard so that products which are integers up to
    # rounding (e.g. m * (1/m)) select that integer
    return int(math.ceil(x - 1e-9 * max(1.0, abs(x))))


def select_threshold(selection_scores: Sequence[float], gamma: float, delta: float) -> CalibrationResult:
    """Pick ``t_hat`` as the ``ceil(m(1 - gamma + r))``-th smallest selection score.

    Returns an uncertified result (``threshold=None``) when ``gamma`` is below
    the DKW radius; the message then states the smallest certifiable gamma.
    ``selected_index`` is 1-based, matching the order-statistic convention.
    """
    z = np.asarray(selection_scores, dtype=float).ravel()
    if z.size == 0:
        raise CalibrationError("no selection scores")
    if not (0 < gamma < 1 and 0 < delta < 1):
        raise ValueError("gamma and delta must lie in (0, 1)")
    m = z.size
    r = dkw_radius(m, delta)
    if gamma < r:
        return CalibrationResult(
            None, gamma, delta, m, r, None, False,
            f"no certificate; smallest certifiable gamma = {r:.6g} at m={m}, delta={delta:g}",
        )
    j = _order_index(m * (1.0 - gamma + r))
    j = min(max(j, 1), m)
    t = float(np.partition(z, j - 1)[j - 1])
    return CalibrationResult(t, gamma, delta, m, r, j, True)


@dataclass(frozen=True)
class BlockwiseCalibration:
    blocks: tuple
    gamma_total: float
    delta_total: float
    certified: bool

    def to_dict(self) -> dict:
        return {
            "blocks": [b.to_dict() for b in self.blocks],
            "gamma_total": self.gamma_total,
            "delta_total": self.delta_total,
            "certified": self.certified,
        }


def calibrate_blockwise(block_scores, budgets) -> BlockwiseCalibration:
    """Per-block DKW selection; the intersection carries mass ``1 - sum(gamma_i)``
    with confidence ``1 - sum(delta_i)`` by a union bound."""
    if len(block_scores) < 1 or len(block_scores) != len(budgets):
        raise ValueError("need one (gamma, delta) budget per block, at least one block")
    results = tuple(select_threshold(s, g, d) for s, (g, d) in zip(block_scores, budgets))
    return BlockwiseCalibration(
        results,
        float(sum(g for g, _ in budgets)),
        float(sum(d for _, d in budgets)),
        all(r.certified for r in results),
    )


def calibrate_bulk(data, geometry="ellipsoid", gamma=0.05, delta=0.05,
                   fit_ratio=0.5, seed=None, ridge=TOL.calib_ridge):
    """Split, fit a score and select its threshold. Returns ``(score, result, bulk)``;
    ``bulk`` is None when the certificate is unavailable."""
    fit, sel = split_fit_select(as_outcomes(data), fit_ratio, seed)
    score = fit_score(fit, geometry, ridge)
    res = select_threshold(score(sel), gamma, delta)
    return score, res, (score.bulk(res.threshold) if res.certified else None)


def calibrate_product_bulk(data, blocks, gamma=0.1, delta=0.05, fit_ratio=0.5,
                          seed=None, ridge=TOL.calib_ridge):
    """Calibrate one score per coordinate block, each at ``(gamma/k, delta/k)``.

    ``blocks`` lists ``(indices, geometry)`` pairs partitioning the columns.
    Returns ``(calibration, bulk)`` with ``bulk`` a :class:`ProductBulk`, or
    None when some block cannot be certified.
    """
    X = as_outcomes(data)
    fit, sel = split_fit_select(X, fit_ratio, seed)
    k = len(blocks)
    scores, sel_scores = [], []
    for idx, geometry in blocks:
        idx = list(idx)
        sc = fit_score(fit[:, idx], geometry, ridge)
        scores.append(sc)
        sel_scores.append(sc(sel[:, idx]))
    cal = calibrate_blockwise(sel_scores, [(gamma / k, delta / k)] * k)
    if not cal.certified:
        return cal, None
    bulk = ProductBulk(tuple((tuple(int(i) for i in idx), sc.bulk(r.threshold))
                             for (idx, _), sc, r in zip(blocks, scores, cal.blocks)))
    return cal, bulk


# --------------------------------------------------------------------------
# Tolerance diagnostics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EpsilonDiagnostics:
    thresholds: np.ndarray
    p_star: np.ndarray
    p_centre: np.ndarray
    gamma: float
    delta: float
    m: int
    n_centre: int


def epsilon_diagnostics(selection_scores, centre_scores, gamma, delta,
                        bulk_threshold=None, n_grid: int = 20) -> EpsilonDiagnostics:
    """Tabulate empirical score CDFs of training and centre draws on a grid.

    The grid defaults to ``n_grid`` equally spaced empirical quantiles of the
    selection scores below the bulk threshold, with the threshold itself last.
    """
    s_sel = np.sort(np.asarray(selection_scores, dtype=float).ravel())
    s_c = np.sort(np.asarray(centre_scores, dtype=float).ravel())
    t_K = s_sel[-1] if bulk_threshold is None else float(bulk_threshold)
    inside = s_sel[s_sel <= t_K]
    if inside.size == 0:
        grid = np.array([t_K])
    else:
        grid = np.quantile(inside, np.linspace(1.0 / n_grid, 1.0, n_grid))
        grid = np.unique(np.append(grid[grid < t_K], t_K))
    p_star = np.searchsorted(s_sel, grid, side="right") / s_sel.size
    p_c = np.searchsorted(s_c, grid, side="right") / s_c.size
    return EpsilonDiagnostics(grid, p_star, p_c, float(gamma), float(delta), s_sel.size, s_c.size)


def eps_c_lower_bound(diag: EpsilonDiagnostics) -> float:
    """High-probability lower bound on the in-bulk centre mismatch.

    Each DKW event is run at level ``delta/2`` so that both hold jointly
    with probability ``1 - delta``.
    """
    r_m = math.sqrt(math.log(4.0 / diag.delta) / (2.0 * diag.m))
    r_c = math.sqrt(math.log(4.0 / diag.delta) / (2.0 * diag.n_centre))
    p_star = np.asarray(diag.p_star, dtype=float)
    p_c = np.asarray(diag.p_centre, dtype=float)
    ok = p_c > r_c
    if not np.any(ok):
        return 0.0
    num = (p_star[ok] + r_m) * (p_c[-1] + r_c)
    den = (1.0 - diag.gamma) * (p_c[ok] - r_c)
    return float(np.clip(np.max(1.0 - num / den), 0.0, 1.0))


def _aligned_probs(Q: DiscreteDistribution, P: DiscreteDistribution):
    def key(a):
        return tuple(np.atleast_1d(np.asarray(a, dtype=float)).tolist())

    index: dict = {}
    for a in list(P.atoms) + list(Q.atoms):
        index.setdefault(key(a), len(index))
    p = np.zeros(len(index))
    q = np.zeros(len(index))
    for a, w in zip(P.atoms, P.probs):
        p[index[key(a)]] += w
    for a, w in zip(Q.atoms, Q.probs):
        q[index[key(a)]] += w
    return q, p


def lv_distortion_discrete(Q: DiscreteDistribution, P: DiscreteDistribution) -> float:
    """``1 - min_{p_i > 0} q_i / p_i`` over the union of supports."""
    q, p = _aligned_probs(Q, P)
    pos = p > 0
    if not np.any(pos):
        raise ValueError("reference law has no positive-mass atom")
    return max(0.0, float(1.0 - np.min(q[pos] / p[pos])))


def lv_distortion_bruteforce(Q: DiscreteDistribution, P: DiscreteDistribution) -> float:
    """Exhaustive ``max_A (P(A) - Q(A)) / P(A)`` over all events with ``P(A) > 0``."""
    q, p = _aligned_probs(Q, P)
    n = p.size
    if n > TOL.max_bruteforce_atoms:
        raise ValueError(f"brute force limited to {TOL.max_bruteforce_atoms} atoms, got {n}")
    masks = ((np.arange(1, 2 ** n)[:, None] >> np.arange(n)) & 1).astype(float)
    pa = masks @ p
    qa = masks @ q
    ok = pa > 0
    return float(np.max((pa[ok] - qa[ok]) / pa[ok]))
