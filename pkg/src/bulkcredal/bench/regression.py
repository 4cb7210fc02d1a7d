"""Linear regression under a geographic deployment shift.

Rows are ordered by one coordinate (longitude). The top ``train_fraction``
trains, a contiguous band of ``gap`` is discarded, and the remaining tail is
the test region. Hyperparameters are chosen by geo-block cross-validation
inside the training region; test error is reported as MAE, RMSE, the 98th
percentile of absolute error and CVaR at tail mass 2%.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass

import numpy as np

from ..calibrate import calibrate_product_bulk
from ..centres import AcceptanceShortfall, fit_copula_centre, rejection_sample_bulk
from ..core import LADLoss
from ..solve import (build_cvar_objective, build_lv_objective, build_saa_objective,
                     build_wasserstein_lad_objective, minimize, ridge_solve)
from ..worstcase import reverse_lv_risk
from .common import replication_seed

METHODS = ("ERM", "LV", "CVaR", "Wasserstein", "Ridge")
_EPS_GRID = (0.025, 0.05, 0.075, 0.10, 0.125, 0.15, 0.175, 0.20)


class IngestionError(ValueError):
    """CSV problems, one message per offending column or cell."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        shown = problems[:20]
        more = f"\n  ... and {len(problems) - 20} more" if len(problems) > 20 else ""
        super().__init__("cannot ingest CSV:\n  " + "\n  ".join(shown) + more)


@dataclass(frozen=True)
class RegressionSplitConfig:
    order_col: str = "longitude"
    target_col: str = "median_house_value"
    lat_col: str = "latitude"
    lon_col: str = "longitude"
    feature_cols: tuple | None = None   # default: every column except the target
    train_high: bool = True             # training block takes the largest ordering values
    train_fraction: float = 0.5
    gap: float = 0.3
    cv_bins: int = 6
    folds: int = 3
    lv_grid: tuple = _EPS_GRID
    cvar_grid: tuple = _EPS_GRID
    wasserstein_grid: tuple = (0.05, 0.1, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
    ridge_grid: tuple = (1e-2, 1e-1, 0.5, 1.0, 5.0, 10.0, 50.0, 100.0)
    gamma: float = 0.1
    delta: float = 0.05
    fit_ratio: float = 0.8
    saa_size: int = 2000
    max_draw_factor: float = 20.0
    jitter: float = 1e-6
    tol: float = 1e-6
    max_iters: int = 5000

    def __post_init__(self):
        if not (0 < self.train_fraction < 1 and 0 <= self.gap < 1):
            raise ValueError("train_fraction must lie in (0, 1) and gap in [0, 1)")
        if self.train_fraction + self.gap >= 1:
            raise ValueError("train and gap fractions leave no test rows")
        for name in ("lv_grid", "cvar_grid", "wasserstein_grid", "ridge_grid"):
            if len(getattr(self, name)) == 0:
                raise ValueError(f"{name} is empty")
        if self.cv_bins < 1 or self.folds < 2:
            raise ValueError("need cv_bins >= 1 and folds >= 2")


@dataclass
class RegressionData:
    X: np.ndarray
    y: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    order: np.ndarray
    feature_names: tuple


def load_regression_csv(path, cfg: RegressionSplitConfig) -> RegressionData:
    """Read the designated columns; every problem is reported, not just the first."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestionError(["file is empty"]) from None
        body = list(reader)
    features = list(cfg.feature_cols) if cfg.feature_cols else [c for c in header if c != cfg.target_col]
    needed = list(dict.fromkeys(features + [cfg.target_col, cfg.lat_col, cfg.lon_col, cfg.order_col]))
    problems = [f"missing column {c!r}" for c in needed if c not in header]
    if problems:
        raise IngestionError(problems)
    pos = {c: header.index(c) for c in needed}
    table = np.empty((len(body), len(needed)))
    for i, row in enumerate(body, start=2):
        if len(row) != len(header):
            problems.append(f"line {i}: expected {len(header)} fields, found {len(row)}")
            continue
        for j, c in enumerate(needed):
            cell = row[pos[c]].strip()
            try:
                v = float(cell)
            except ValueError:
                v = math.nan
            if not math.isfinite(v):
                problems.append(f"line {i}, column {c!r}: non-numeric value {cell!r}")
            table[i - 2, j] = v
    if problems:
        raise IngestionError(problems)
    if not body:
        raise IngestionError(["no data rows"])
    col = {c: table[:, k] for k, c in enumerate(needed)}
    return RegressionData(np.column_stack([col[c] for c in features]), col[cfg.target_col],
                          col[cfg.lat_col], col[cfg.lon_col], col[cfg.order_col], tuple(features))


def gap_split(order: np.ndarray, cfg: RegressionSplitConfig):
    """Index arrays ``(train, gap, test)`` along the ordering coordinate."""
    n = order.size
    idx = np.argsort(order, kind="stable")
    if cfg.train_high:
        idx = idx[::-1]
    n_train = int(round(cfg.train_fraction * n))
    n_gap = int(round(cfg.gap * n))
    train, gap, test = idx[:n_train], idx[n_train:n_train + n_gap], idx[n_train + n_gap:]
    if train.size < 2 or test.size < 1:
        raise ValueError("split leaves too few training or test rows")
    return np.sort(train), np.sort(gap), np.sort(test)


def geo_block_folds(lat: np.ndarray, lon: np.ndarray, bins: int, folds: int, rng) -> np.ndarray:
    """Fold label per row: bin (lat, lon) on a ``bins x bins`` grid over the rows'
    range, drop empty cells, shuffle the nonempty cells and deal them into folds."""
    def cell(v):
        lo, hi = float(v.min()), float(v.max())
        if hi <= lo:
            return np.zeros(v.size, dtype=int)
        return np.minimum(((v - lo) / (hi - lo) * bins).astype(int), bins - 1)
    block = cell(lat) * bins + cell(lon)
    blocks = np.unique(block)
    if blocks.size < folds:
        raise ValueError(f"only {blocks.size} nonempty blocks for {folds} folds")
    order = rng.permutation(blocks)
    fold_of = {int(b): k % folds for k, b in enumerate(order)}
    return np.array([fold_of[int(b)] for b in block])


def error_metrics(residuals) -> dict:
    a = np.abs(np.asarray(residuals, dtype=float))
    return {"mae": float(a.mean()), "rmse": float(np.sqrt(np.mean(a * a))),
            "p98": float(np.percentile(a, 98)), "cvar2": reverse_lv_risk(a, eps=0.02)}


# ---------------------------------------------------------------------------
# per-method fitting

def _ols(X, y):
    A = np.column_stack([X, np.ones(y.size)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return coef


def _solve(oracle, x0, cfg):
    rep = minimize(oracle, x0, tol=cfg.tol, max_iters=cfg.max_iters)
    return rep.x, rep.seconds


class _LVCentre:
    """Copula centre, product bulk and truncated SAA for one training set."""

    def __init__(self, X, y, cfg, rng):
        t0 = time.perf_counter()
        d = X.shape[1]
        Z = np.column_stack([X, y])
        _, self.bulk = calibrate_product_bulk(
            Z, [(tuple(range(d)), "ellipsoid"), ((d,), "box")], cfg.gamma, cfg.delta,
            cfg.fit_ratio, seed=rng)
        if self.bulk is None:
            raise ValueError("LV bulk could not be certified on this training set")
        centre = fit_copula_centre(X, y, cfg.jitter)
        try:
            self.S, self.acceptance = rejection_sample_bulk(
                centre, self.bulk, cfg.saa_size, cfg.max_draw_factor, seed=rng)
        except AcceptanceShortfall as exc:
            raise ValueError(f"LV SAA: {exc}") from exc
        self.seconds = time.perf_counter() - t0


def _fit(method, param, X, y, cfg, x0, centre=None):
    """Return ``(theta, solve_seconds)``."""
    d = X.shape[1]
    loss = LADLoss(d)
    S = np.column_stack([X, y])
    if method == "ERM":
        return _solve(build_saa_objective(loss, S), x0, cfg)
    if method == "Ridge":
        t0 = time.perf_counter()
        return ridge_solve(X, y, param), time.perf_counter() - t0
    if method == "Wasserstein":
        return _solve(build_wasserstein_lad_objective(X, y, param, float(np.std(y))), x0, cfg)
    if method == "CVaR":
        r = np.abs(y - X @ x0[:-1] - x0[-1])
        z0 = np.append(x0, np.quantile(r, 1.0 - param))
        z, sec = _solve(build_cvar_objective(loss, S, param), z0, cfg)
        return z[:-1], sec
    if method == "LV":
        return _solve(build_lv_objective(loss, centre.S, centre.bulk, param, check_membership=False),
                      x0, cfg)
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


def _grid(method, cfg):
    return {"ERM": (None,), "LV": cfg.lv_grid, "CVaR": cfg.cvar_grid,
            "Wasserstein": cfg.wasserstein_grid, "Ridge": cfg.ridge_grid}[method]


def run_regression_experiment(source, cfg: RegressionSplitConfig, methods=METHODS,
                              seed: int = 0) -> list[dict]:
    """One metrics row per method (selected hyperparameter, test metrics, timings).

    Timing columns: ``cv_seconds`` is the whole cross-validation phase,
    ``likelihood_seconds`` the final centre fit (LV only) and
    ``solve_seconds`` the final solve, so they sum to at most
    ``total_seconds``.

    ``source`` is a CSV path or a :class:`RegressionData`.
    """
    methods = tuple(methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
    data = source if isinstance(source, RegressionData) else load_regression_csv(source, cfg)
    tr, _, te = gap_split(data.order, cfg)
    if np.intersect1d(tr, te).size:
        raise AssertionError("train and test rows overlap")
    mu, sd = data.X[tr].mean(axis=0), data.X[tr].std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    X = (data.X - mu) / sd
    Xtr, ytr, Xte, yte = X[tr], data.y[tr], X[te], data.y[te]
    ss = replication_seed(seed, 0)
    s_folds, s_lv = ss.spawn(2)
    folds = geo_block_folds(data.lat[tr], data.lon[tr], cfg.cv_bins, cfg.folds,
                            np.random.default_rng(s_folds))
    lv_streams = s_lv.spawn(cfg.folds + 1)
    rows = []
    for method in methods:
        t_start = time.perf_counter()
        grid = _grid(method, cfg)
        val_mae = np.zeros(len(grid))
        if len(grid) > 1:
            for k in range(cfg.folds):
                fit_idx, val_idx = np.flatnonzero(folds != k), np.flatnonzero(folds == k)
                Xf, yf = Xtr[fit_idx], ytr[fit_idx]
                x0 = _ols(Xf, yf)
                centre = None
                if method == "LV":
                    centre = _LVCentre(Xf, yf, cfg, np.random.default_rng(lv_streams[k]))
                for g, p in enumerate(grid):
                    theta, _ = _fit(method, p, Xf, yf, cfg, x0, centre)
                    val_mae[g] += np.mean(np.abs(ytr[val_idx] - Xtr[val_idx] @ theta[:-1] - theta[-1]))
            val_mae /= cfg.folds
        cv_seconds = time.perf_counter() - t_start
        best = int(np.argmin(val_mae))
        param = grid[best]
        centre, lik = None, 0.0
        if method == "LV":
            centre = _LVCentre(Xtr, ytr, cfg, np.random.default_rng(lv_streams[cfg.folds]))
            lik = centre.seconds
        theta, solve_t = _fit(method, param, Xtr, ytr, cfg, _ols(Xtr, ytr), centre)
        total = time.perf_counter() - t_start
        row = {"method": method, "param": math.nan if param is None else float(param),
               "cv_mae": float(val_mae[best]) if len(grid) > 1 else math.nan,
               "n_train": int(tr.size), "n_test": int(te.size), "gap": cfg.gap}
        row.update(error_metrics(yte - Xte @ theta[:-1] - theta[-1]))
        row.update({"cv_seconds": cv_seconds, "likelihood_seconds": lik,
                    "solve_seconds": solve_t, "total_seconds": total})
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# synthetic shifted-conditional data

def make_shift_dataset(n: int = 14000, seed: int = 0, d: int = 3) -> RegressionData:
    """Synthetic data whose response slope and covariate mean drift with longitude.

    ``x_1`` grows and the slope on ``x_1`` shrinks toward the West (small
    longitude), so a model fitted in the East over-extrapolates in the West.
    """
    rng = np.random.default_rng(seed)
    lon = rng.uniform(0.0, 1.0, n)
    lat = rng.uniform(0.0, 1.0, n)
    X = rng.standard_normal((n, d))
    X[:, 0] += 1.5 * (1.0 - lon)
    beta1 = 1.0 + 2.0 * lon
    y = beta1 * X[:, 0] + 0.5 * X[:, 1:].sum(axis=1) + 0.5 * rng.standard_t(5, n)
    names = tuple(f"x{j + 1}" for j in range(d))
    return RegressionData(X, y, lat, lon, lon.copy(), names)


def write_regression_csv(data: RegressionData, path, target: str = "target") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(data.feature_names) + ["latitude", "longitude", target])
        for i in range(data.y.size):
            w.writerow([repr(float(v)) for v in data.X[i]] +
                       [repr(float(data.lat[i])), repr(float(data.lon[i])), repr(float(data.y[i]))])
