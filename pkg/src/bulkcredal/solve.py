"""Convex objective builders and a small nonsmooth minimisation engine.

Every builder returns an :class:`ObjectiveOracle`, a pure value-and-subgradient
map. :func:`minimize` runs a box-step bundle method: a Kelley cutting-plane
model is minimised over a trust box around the stability centre by an LP
(HiGHS through ``scipy.optimize.linprog``), and a global LP over the whole
search box supplies the lower bound used for the gap certificate.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linprog

from . import kernels
from .config import TOL
from .core import BulkSet, DimensionError, LADLoss, NewsvendorLoss, bulk_contains
from .worstcase import bulk_center, support_grad, support_rows


class SolveError(RuntimeError):
    """Raised for invalid starting points, non-finite oracle values or LP failures."""


class ConvexityError(SolveError):
    """A new oracle value lies below an earlier cut: the oracle is not convex."""


@dataclass(frozen=True)
class ObjectiveOracle:
    """Value-and-subgradient map ``x -> (f(x), g(x))``.

    ``lower``/``upper`` are a data-scaled hint for the initial search box;
    the solver enlarges the box whenever the minimiser lands on its boundary.
    """
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]]
    dim: int
    nonneg: bool = False
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    name: str = "objective"
    parts: Callable[[np.ndarray], dict] | None = field(default=None, compare=False)
    closed_form: np.ndarray | None = field(default=None, compare=False)

    @property
    def domain(self) -> str:
        return "nonnegative" if self.nonneg else "free"

    def __call__(self, x) -> tuple[float, np.ndarray]:
        x = np.ascontiguousarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise DimensionError(f"decision has shape {x.shape}, expected ({self.dim},)")
        return self.fun(x)

    def value(self, x) -> float:
        return self(x)[0]


@dataclass
class SolveReport:
    x: np.ndarray
    value: float
    gap: float | None            # None means uncertified
    lower_bound: float | None
    iterations: int
    seconds: float
    method: str
    status: str
    evaluations: int = 0

    @property
    def certified(self) -> bool:
        return self.gap is not None

    def to_dict(self) -> dict:
        return {
            "x": [float(v) for v in self.x],
            "value": float(self.value),
            "gap": "uncertified" if self.gap is None else float(self.gap),
            "lower_bound": None if self.lower_bound is None else float(self.lower_bound),
            "iterations": int(self.iterations),
            "seconds": float(self.seconds),
            "method": self.method,
            "status": self.status,
            "evaluations": int(self.evaluations),
        }


# ---------------------------------------------------------------------------
# engine

def _initial_box(oracle: ObjectiveOracle, x0: np.ndarray, bounds):
    if bounds is not None:
        lo, hi = (np.asarray(b, dtype=float).copy() for b in bounds)
    elif oracle.lower is not None and oracle.upper is not None:
        lo, hi = np.array(oracle.lower, dtype=float), np.array(oracle.upper, dtype=float)
    else:
        half = 10.0 * np.maximum(1.0, np.abs(x0))
        lo, hi = x0 - half, x0 + half
    if lo.shape != x0.shape or hi.shape != x0.shape:
        raise DimensionError("bounds do not match the decision dimension")
    lo, hi = np.minimum(lo, x0), np.maximum(hi, x0)
    if oracle.nonneg:
        lo = np.maximum(lo, 0.0)
    width = hi - lo
    pad = np.where(width > 0, 0.0, np.maximum(1.0, np.abs(x0)))
    hi = hi + pad
    if not oracle.nonneg:
        lo = lo - pad
    return lo, hi


def _evaluate(oracle, x):
    f, g = oracle(x)
    f = float(f)
    g = np.asarray(g, dtype=float)
    if not math.isfinite(f) or not np.all(np.isfinite(g)):
        raise SolveError(f"{oracle.name}: non-finite oracle output at x={x.tolist()}")
    return f, g


class _Cuts:
    """Growing store of affine minorants ``f_i + g_i.(x - x_i) = c_i + g_i.x``."""

    def __init__(self, dim: int, cap: int = 64):
        self.G = np.empty((cap, dim))
        self.c = np.empty(cap)
        self.n = 0

    def add(self, x, f, g):
        if self.n == self.c.size:
            self.G = np.vstack([self.G, np.empty_like(self.G)])
            self.c = np.concatenate([self.c, np.empty_like(self.c)])
        self.G[self.n] = g
        self.c[self.n] = f - g @ x
        self.n += 1

    def check(self, x, f, name):
        if self.n == 0:
            return
        model = self.c[: self.n] + self.G[: self.n] @ x
        slack = TOL.cut_validity * (1.0 + abs(f))
        i = int(np.argmax(model))
        if model[i] > f + slack:
            raise ConvexityError(
                f"{name}: value {f:.12g} at x={np.round(x, 10).tolist()} lies "
                f"{model[i] - f:.3g} below cut #{i}; the subgradient oracle is invalid")

    def model(self, x) -> float:
        return float(np.max(self.c[: self.n] + self.G[: self.n] @ x))

    def lp_min(self, lo, hi):
        """Minimise the cut model over the box ``[lo, hi]``; returns (argmin, value)."""
        n, d = self.n, self.G.shape[1]
        A = np.hstack([self.G[:n], -np.ones((n, 1))])
        cost = np.zeros(d + 1)
        cost[-1] = 1.0
        bnds = [(float(a), float(b)) for a, b in zip(lo, hi)] + [(None, None)]
        res = linprog(cost, A_ub=A, b_ub=-self.c[:n], bounds=bnds, method="highs")
        if res.status != 0:
            raise SolveError(f"cutting-plane LP failed: {res.message}")
        y = np.clip(res.x[:d], lo, hi)
        return y, float(min(res.fun, self.model(y)))


def _cutting_plane(oracle, x0, lo, hi, tol, max_iters, t0):
    dim = x0.size
    cuts = _Cuts(dim)
    xc = x0.copy()
    fc, gc = _evaluate(oracle, xc)
    cuts.add(xc, fc, gc)
    evals = 1
    best_x, upper = xc.copy(), fc
    lower = -math.inf
    delta = 0.25 * (hi - lo)
    floor = 1e-9 * (hi - lo)
    fixed_lo = np.zeros(dim, dtype=bool) if not oracle.nonneg else lo <= 0.0
    max_width = 1e9 * (1.0 + np.max(hi - lo))

    def new_point(y):
        nonlocal best_x, upper, evals
        fy, gy = _evaluate(oracle, y)
        evals += 1
        cuts.check(y, fy, oracle.name)
        cuts.add(y, fy, gy)
        if fy < upper:
            best_x, upper = y.copy(), fy
        return fy

    def converged():
        return upper - lower <= tol * (1.0 + abs(upper))

    status = "max_iters"
    it = 0
    since_global = 0
    while it < max_iters:
        it += 1
        tl, th = np.maximum(lo, xc - delta), np.minimum(hi, xc + delta)
        y, my = cuts.lp_min(tl, th)
        eps_pos = 1e-9 * (1.0 + np.abs(y))
        active = np.any((np.abs(y - tl) <= eps_pos) & (tl > lo)) or \
            np.any((np.abs(y - th) <= eps_pos) & (th < hi))
        if not active:
            lower = max(lower, my)
        since_global += 1
        pred = fc - my
        if not active and converged():
            pass
        elif active and (since_global >= 5 or pred <= tol * (1.0 + abs(fc))):
            z, mz = cuts.lp_min(lo, hi)
            lower = max(lower, mz)
            since_global = 0
            if not converged():
                new_point(z)
        if converged():
            # grow the search box if the incumbent sits on an artificial face
            w = hi - lo
            on_lo = (np.abs(best_x - lo) <= 1e-7 * (1.0 + w)) & ~fixed_lo
            on_hi = np.abs(best_x - hi) <= 1e-7 * (1.0 + w)
            if not (on_lo.any() or on_hi.any()):
                status = "optimal"
                break
            lo = np.where(on_lo, lo - w, lo)
            if oracle.nonneg:
                lo = np.maximum(lo, 0.0)
                fixed_lo = lo <= 0.0
            hi = np.where(on_hi, hi + w, hi)
            if np.max(hi - lo) > max_width:
                raise SolveError(f"{oracle.name}: objective appears unbounded below "
                                 f"(search box grew past {max_width:.3g})")
            floor = 1e-9 * (hi - lo)
            lower = -math.inf
            continue
        if pred <= 0.0:
            continue
        fy = new_point(y)
        if fc - fy >= 0.1 * pred:
            xc, fc = y, fy
            if active:
                delta = np.minimum(2.0 * delta, hi - lo)
        elif fy > fc:
            delta = np.maximum(0.5 * delta, floor)
    gap = max(upper - lower, 0.0) if math.isfinite(lower) else None
    return SolveReport(best_x, upper, gap if status == "optimal" or gap is not None else None,
                       lower if math.isfinite(lower) else None, it,
                       time.perf_counter() - t0, "cutting_plane", status, evals)


def _subgradient(oracle, x0, lo, hi, max_iters, t0):
    radius = float(np.linalg.norm(hi - lo))
    x = x0.copy()
    best_x, best_f = x.copy(), math.inf
    for k in range(max_iters):
        f, g = _evaluate(oracle, x)
        if f < best_f:
            best_x, best_f = x.copy(), f
        ng = float(np.linalg.norm(g))
        if ng == 0.0:
            break
        x = x - (0.5 * radius / math.sqrt(k + 1.0)) * g / ng
        if oracle.nonneg:
            x = np.maximum(x, 0.0)
    return SolveReport(best_x, best_f, None, None, k + 1, time.perf_counter() - t0,
                       "subgradient", "uncertified", k + 1)


def minimize(oracle: ObjectiveOracle, x0, method: str = "cutting_plane",
             tol: float = TOL.solve_rel_gap, max_iters: int = TOL.solve_max_iters,
             bounds=None) -> SolveReport:
    """Minimise a convex oracle from ``x0``.

    Parameters
    ----------
    method : {"cutting_plane", "subgradient"}
        The bundle method certifies ``upper - lower <= tol * (1 + |upper|)``;
        the projected subgradient fallback reports its gap as uncertified.
    bounds : pair of arrays, optional
        Initial search box; defaults to the oracle's hint.
    """
    t0 = time.perf_counter()
    x0 = np.array(x0, dtype=float).reshape(-1)
    if x0.size != oracle.dim:
        raise DimensionError(f"x0 has {x0.size} entries, oracle expects {oracle.dim}")
    if not np.all(np.isfinite(x0)):
        raise SolveError("x0 must be finite")
    if oracle.nonneg and np.any(x0 < 0):
        raise SolveError("x0 violates the nonnegativity constraint of the domain")
    if tol <= 0 or max_iters < 1:
        raise ValueError("tol must be positive and max_iters at least 1")
    lo, hi = _initial_box(oracle, x0, bounds)
    if method == "cutting_plane":
        return _cutting_plane(oracle, x0, lo, hi, tol, max_iters, t0)
    if method == "subgradient":
        return _subgradient(oracle, x0, lo, hi, max_iters, t0)
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# per-sample losses and subgradients

def _samples(loss, samples) -> np.ndarray:
    S = np.ascontiguousarray(np.asarray(samples, dtype=float))
    if S.ndim != 2 or S.shape[1] != loss.outcome_dim:
        raise DimensionError(f"samples must be (n, {loss.outcome_dim}), got {S.shape}")
    return S


def sample_losses(loss, x, S) -> np.ndarray:
    if isinstance(loss, NewsvendorLoss):
        return kernels.newsvendor_losses(x, S, loss.h, loss.b)
    if isinstance(loss, LADLoss):
        return np.abs(S[:, -1] - S[:, :-1] @ x[:-1] - x[-1])
    raise TypeError(f"unsupported loss {type(loss).__name__}")


def weighted_subgradient(loss, x, S, weights) -> np.ndarray:
    """``sum_i weights_i * g_i(x)`` with kink conventions (zero at kinks)."""
    weights = np.ascontiguousarray(weights, dtype=float)
    if isinstance(loss, NewsvendorLoss):
        return kernels.newsvendor_grad(x, S, loss.h, loss.b, weights)
    if isinstance(loss, LADLoss):
        return kernels.lad_grad(x, S, weights)
    raise TypeError(f"unsupported loss {type(loss).__name__}")


def _newsvendor_box(S, bulk=None):
    if S is not None and S.size:
        top = float(S.max())
    else:
        top = max(bulk.support(e) for e in np.eye(bulk.dim))
    top = max(top, 1.0)
    d = S.shape[1] if S is not None else bulk.dim
    return np.zeros(d), np.full(d, 3.0 * top)


def _regression_box(X, y):
    sx = np.std(X, axis=0)
    sy = float(np.std(y))
    scale = max(sy, 1e-12) / max(float(sx.min()), 1e-12)
    wmax = 10.0 * max(scale, 1e-6)
    bmax = abs(float(np.mean(y))) + wmax * float(np.abs(X.mean(axis=0)).sum()) + 10.0 * max(sy, 1.0)
    d = X.shape[1]
    return (np.concatenate([np.full(d, -wmax), [-bmax]]),
            np.concatenate([np.full(d, wmax), [bmax]]))


def _box_for(loss, S, bulk=None):
    if isinstance(loss, NewsvendorLoss):
        return _newsvendor_box(S, bulk)
    if S is None or not S.size:
        c = bulk_center(bulk)
        half = np.array([bulk.support(e) for e in np.eye(bulk.dim)]) - c
        S = np.vstack([c - half, c + half, c])
    return _regression_box(S[:, :-1], S[:, -1])


def _sup_term(loss, bulk):
    """Closed-form ``x -> (sup_{xi in bulk} loss(x, xi), subgradient)``."""
    if bulk.dim != loss.outcome_dim:
        raise DimensionError("bulk dimension does not match the loss outcome dimension")
    if isinstance(loss, NewsvendorLoss):
        A = loss.piece_slopes()
        sA = support_rows(bulk, A)

        def sup(x):
            vals = sA - A @ x
            j = int(np.argmax(vals))
            return float(vals[j]), -A[j]
        return sup
    if isinstance(loss, LADLoss):
        mu = bulk_center(bulk)
        d = loss.d

        def sup(theta):
            a = np.append(-theta[:-1], 1.0)
            C = float(a @ mu) - theta[-1]
            rad = float(support_rows(bulk, a[None, :])[0]) - float(a @ mu)
            s = float(np.sign(C))
            drad = support_grad(bulk, a) - mu
            g = np.empty(d + 1)
            g[:-1] = -s * mu[:-1] - drad[:-1]
            g[-1] = -s
            return abs(C) + rad, g
        return sup
    raise TypeError(f"unsupported loss {type(loss).__name__}")


# ---------------------------------------------------------------------------
# builders

def build_saa_objective(loss, samples) -> ObjectiveOracle:
    """Empirical mean loss (ERM)."""
    S = _samples(loss, samples)
    if S.shape[0] == 0:
        raise ValueError("SAA objective needs at least one sample")
    w = np.full(S.shape[0], 1.0 / S.shape[0])

    def fun(x):
        return float(np.mean(sample_losses(loss, x, S))), weighted_subgradient(loss, x, S, w)

    lo, hi = _box_for(loss, S)
    return ObjectiveOracle(fun, loss.decision_dim, isinstance(loss, NewsvendorLoss), lo, hi, "saa")


def build_lv_objective(loss, in_bulk_samples, bulk: BulkSet, eps: float,
                       check_membership: bool = True) -> ObjectiveOracle:
    """``(1 - eps) * mean of loss over in-bulk samples + eps * sup over the bulk``."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    S = _samples(loss, in_bulk_samples) if in_bulk_samples is not None else None
    n = 0 if S is None else S.shape[0]
    if n == 0 and eps < 1.0:
        raise ValueError("LV objective needs in-bulk samples when eps < 1")
    if n and check_membership and not np.all(bulk_contains(bulk, S)):
        raise ValueError("some SAA samples fall outside the bulk set")
    sup = _sup_term(loss, bulk)
    w = np.full(n, 1.0 / n) if n else None

    def parts(x):
        out = {"sup": sup(x)[0]}
        if n:
            out["mean"] = float(np.mean(sample_losses(loss, x, S)))
        return out

    def fun(x):
        val, grad = 0.0, np.zeros(x.size)
        if eps < 1.0:
            val += (1.0 - eps) * float(np.mean(sample_losses(loss, x, S)))
            grad += (1.0 - eps) * weighted_subgradient(loss, x, S, w)
        if eps > 0.0:
            sv, sg = sup(x)
            val += eps * sv
            grad += eps * sg
        return val, grad

    lo, hi = _box_for(loss, S, bulk)
    return ObjectiveOracle(fun, loss.decision_dim, isinstance(loss, NewsvendorLoss), lo, hi,
                           f"lv(eps={eps:g})", parts=parts)


def build_cvar_objective(loss, samples, eps: float) -> ObjectiveOracle:
    """Rockafellar-Uryasev objective ``tau + mean((loss - tau)_+) / eps`` over ``(x, tau)``."""
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    S = _samples(loss, samples)
    n = S.shape[0]
    if n == 0:
        raise ValueError("CVaR objective needs at least one sample")
    d = loss.decision_dim
    scale = 1.0 / (eps * n)

    def fun(z):
        x, tau = z[:d], float(z[d])
        l = sample_losses(loss, x, S)
        over = l > tau
        excess = np.where(over, l - tau, 0.0)
        g = np.empty(d + 1)
        g[:d] = weighted_subgradient(loss, x, S, over * scale)
        g[d] = 1.0 - over.sum() * scale
        return tau + scale * float(excess.sum()), g

    lo, hi = _box_for(loss, S)
    mid = 0.5 * (lo + hi)
    top = max(float(sample_losses(loss, np.ascontiguousarray(mid), S).max()), 1.0)
    lo = np.append(lo, 0.0)
    hi = np.append(hi, 2.0 * top)
    return ObjectiveOracle(fun, d + 1, False, lo, hi, f"cvar(eps={eps:g})")


def kl_dual(losses, eps: float) -> tuple[float, float, np.ndarray]:
    """``inf_{lam > 0} lam * eps + lam * log mean exp(losses / lam)``.

    Returns ``(value, lam, weights)``; ``weights`` is the worst-case
    reweighting (softmax at ``lam``). ``lam = 0`` flags saturation at the
    maximum loss and ``lam = inf`` the ``eps = 0`` mean.
    """
    l = np.ascontiguousarray(losses, dtype=float).ravel()
    if l.size == 0:
        raise ValueError("KL dual needs at least one loss")
    if eps < 0:
        raise ValueError("KL radius must be nonnegative")
    if eps == 0.0:
        return float(l.mean()), math.inf, np.full(l.size, 1.0 / l.size)
    s = float(l.max() - l.min()) + 1e-12
    return kernels.kl_dual_inner(l, float(eps), 1e-6 * s, 10.0 * s)


def build_kl_dual_objective(loss, samples, eps: float) -> ObjectiveOracle:
    """KL-ball worst-case mean around the empirical law of ``samples``."""
    S = _samples(loss, samples)
    if S.shape[0] == 0:
        raise ValueError("KL objective needs at least one sample")

    def fun(x):
        val, _, w = kl_dual(sample_losses(loss, x, S), eps)
        return float(val), weighted_subgradient(loss, x, S, w)

    lo, hi = _box_for(loss, S)
    return ObjectiveOracle(fun, loss.decision_dim, isinstance(loss, NewsvendorLoss), lo, hi,
                           f"kl(eps={eps:g})")


def build_kl_bdro_objective(loss, draws: Sequence, eps: float) -> ObjectiveOracle:
    """Average over posterior draws of the KL dual on each draw's predictive scenarios.

    ``draws`` is a sequence (or 3-d array) of per-draw scenario matrices.
    """
    blocks = [_samples(loss, D) for D in draws]
    if not blocks or any(B.shape[0] == 0 for B in blocks):
        raise ValueError("KL-BDRO needs at least one draw with at least one scenario")
    k = len(blocks)

    def fun(x):
        val, grad = 0.0, np.zeros(x.size)
        for B in blocks:
            v, _, w = kl_dual(sample_losses(loss, x, B), eps)
            val += v
            grad += weighted_subgradient(loss, x, B, w)
        return val / k, grad / k

    lo, hi = _box_for(loss, np.vstack(blocks))
    return ObjectiveOracle(fun, loss.decision_dim, isinstance(loss, NewsvendorLoss), lo, hi,
                           f"kl_bdro(eps={eps:g})")


def _xy(X, y):
    X = np.ascontiguousarray(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim != 2 or X.shape[0] != y.size:
        raise DimensionError("X must be (n, d) with one target per row")
    return X, y


def build_wasserstein_lad_objective(X, y, rho: float, sigma_y: float) -> ObjectiveOracle:
    """``mean |y - w.x - b0| + rho * ||(w, sigma_y)||_2`` over ``(w, b0)``."""
    if rho < 0 or sigma_y <= 0:
        raise ValueError("need rho >= 0 and sigma_y > 0")
    X, y = _xy(X, y)
    S = np.ascontiguousarray(np.column_stack([X, y]))
    w_unif = np.full(y.size, 1.0 / y.size)
    loss = LADLoss(X.shape[1])

    def fun(theta):
        val = float(np.mean(sample_losses(loss, theta, S)))
        g = weighted_subgradient(loss, theta, S, w_unif)
        if rho > 0:
            w = theta[:-1]
            nrm = math.sqrt(float(w @ w) + sigma_y * sigma_y)
            val += rho * nrm
            g[:-1] += rho * w / nrm
        return val, g

    lo, hi = _regression_box(X, y)
    return ObjectiveOracle(fun, X.shape[1] + 1, False, lo, hi, f"wasserstein_lad(rho={rho:g})")


def ridge_solve(X, y, lam: float) -> np.ndarray:
    """Minimiser ``(w, b0)`` of ``mean (y - w.x - b0)^2 + lam * ||w||^2``."""
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    X, y = _xy(X, y)
    xm, ym = X.mean(axis=0), y.mean()
    Xc = X - xm
    n, d = X.shape
    H = Xc.T @ Xc / n + lam * np.eye(d)
    if np.linalg.matrix_rank(H) < d:
        raise np.linalg.LinAlgError("ridge normal equations are singular; use lam > 0")
    w = np.linalg.solve(H, Xc.T @ (y - ym) / n)
    return np.append(w, ym - xm @ w)


def build_ridge_objective(X, y, lam: float) -> ObjectiveOracle:
    """Squared-loss ridge objective; ``closed_form`` holds the exact minimiser."""
    X, y = _xy(X, y)
    sol = ridge_solve(X, y, lam)

    def fun(theta):
        r = y - X @ theta[:-1] - theta[-1]
        g = np.empty(theta.size)
        g[:-1] = -2.0 * (X.T @ r) / y.size + 2.0 * lam * theta[:-1]
        g[-1] = -2.0 * r.mean()
        return float(r @ r) / y.size + lam * float(theta[:-1] @ theta[:-1]), g

    lo, hi = _regression_box(X, y)
    return ObjectiveOracle(fun, X.shape[1] + 1, False, lo, hi, f"ridge(lam={lam:g})",
                           closed_form=sol)
