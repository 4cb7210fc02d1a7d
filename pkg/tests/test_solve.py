import math

import numpy as np
import pytest
import scipy.optimize as sopt
from hypothesis import given, strategies as st
from scipy import sparse

from bulkcredal.core import BoxBulk, EllipsoidBulk, LADLoss, NewsvendorLoss, ProductBulk
from bulkcredal.solve import (ConvexityError, ObjectiveOracle, SolveError, build_cvar_objective,
                              build_kl_bdro_objective, build_kl_dual_objective, build_lv_objective,
                              build_ridge_objective, build_saa_objective,
                              build_wasserstein_lad_objective, kl_dual, minimize, ridge_solve,
                              sample_losses)
from bulkcredal.worstcase import reverse_lv_risk, support_rows


def _abs3():
    return ObjectiveOracle(lambda x: (abs(x[0] - 3.0), np.sign(x - 3.0)), 1, name="abs")


def test_minimize_abs():
    rep = minimize(_abs3(), [0.0])
    assert abs(rep.x[0] - 3.0) <= 1e-6 and rep.certified and rep.gap >= 0
    assert rep.status == "optimal"


def test_minimize_grows_search_box():
    f = ObjectiveOracle(lambda x: (abs(x[0] - 500.0), np.sign(x - 500.0)), 1,
                        lower=np.array([-1.0]), upper=np.array([1.0]))
    assert abs(minimize(f, [0.0]).x[0] - 500.0) <= 1e-4


def test_minimize_input_errors():
    nv = build_saa_objective(NewsvendorLoss(3, 8, 1), [[1.0], [2.0]])
    with pytest.raises(SolveError):
        minimize(nv, [-1.0])
    with pytest.raises(SolveError):
        minimize(_abs3(), [np.nan])
    bad = ObjectiveOracle(lambda x: (math.inf, np.zeros(1)), 1)
    with pytest.raises(SolveError):
        minimize(bad, [0.0])
    with pytest.raises(ValueError):
        minimize(_abs3(), [0.0], method="newton")


def test_convexity_guard_rejects_concave_oracle():
    f = ObjectiveOracle(lambda x: (-x[0] ** 2, -2.0 * x), 1,
                        lower=np.array([-5.0]), upper=np.array([5.0]))
    with pytest.raises(ConvexityError, match="below cut"):
        minimize(f, [1.0])


def test_unbounded_objective_reported():
    f = ObjectiveOracle(lambda x: (-x[0], -np.ones(1)), 1)
    with pytest.raises(SolveError, match="unbounded"):
        minimize(f, [0.0])


def test_subgradient_fallback_uncertified():
    rep = minimize(_abs3(), [0.0], method="subgradient", max_iters=3000)
    assert rep.gap is None and not rep.certified
    assert rep.to_dict()["gap"] == "uncertified"
    assert abs(rep.x[0] - 3.0) < 0.05


# ---- newsvendor / LV -----------------------------------------------------------

def test_saa_newsvendor_quantile():
    S = np.arange(1.0, 12.0)[:, None]
    rep = minimize(build_saa_objective(NewsvendorLoss(3, 8, 1), S), [1.0])
    grid = np.linspace(0, 12, 12001)
    vals = np.array([NewsvendorLoss(3, 8, 1).value([g], S).mean() for g in grid])
    assert grid[np.argmin(vals)] == 8.0
    # the minimiser set is [8, 9]: slope h*8 - b*3 vanishes there
    assert 8.0 - 1e-6 <= rep.x[0] <= 9.0 + 1e-6
    assert abs(rep.value - vals.min()) <= 1e-6 * (1 + vals.min())


def test_lv_eps_one_interval_bulk():
    h, b, alpha, beta = 3.0, 8.0, 10.0, 50.0
    bulk = BoxBulk(np.array([(alpha + beta) / 2]), np.array([(beta - alpha) / 2]), 1.0)
    f = build_lv_objective(NewsvendorLoss(h, b, 1), None, bulk, 1.0)
    rep = minimize(f, [0.0], tol=1e-10)
    assert abs(rep.x[0] - (b * beta + h * alpha) / (h + b)) <= 1e-6
    assert abs(rep.value - h * b * (beta - alpha) / (h + b)) <= 1e-8


def _nv_instance(seed, n=1250, d=5, radius=2.5):
    r = np.random.default_rng(seed)
    L = np.tril(r.normal(size=(d, d)), -1) * 2 + np.diag(r.uniform(5, 12, d))
    bulk = EllipsoidBulk(np.full(d, 30.0), L, radius)
    z = r.standard_normal((4 * n, d))
    S = 30.0 + z @ L.T
    return S[bulk.contains(S)][:n], bulk


def test_lv_parts_reproduce_value():
    S, bulk = _nv_instance(0, n=300, d=3)
    f = build_lv_objective(NewsvendorLoss(3, 8, 3), S, bulk, 0.5)
    rep = minimize(f, np.full(3, 30.0))
    p = f.parts(rep.x)
    assert abs(0.5 * p["mean"] + 0.5 * p["sup"] - rep.value) <= 1e-10 * (1 + rep.value)


def test_lv_validation():
    S, bulk = _nv_instance(1, n=50, d=2)
    with pytest.raises(ValueError):
        build_lv_objective(NewsvendorLoss(3, 8, 2), S + 1e3, bulk, 0.3)
    with pytest.raises(ValueError):
        build_lv_objective(NewsvendorLoss(3, 8, 2), None, bulk, 0.3)
    with pytest.raises(ValueError):
        build_lv_objective(NewsvendorLoss(3, 8, 2), S, bulk, 1.2)


def _lv_newsvendor_lp(S, bulk, h, b, eps):
    """Exact LP of the LV newsvendor problem over (x, u, s)."""
    n, d = S.shape
    A = NewsvendorLoss(h, b, d).piece_slopes()
    sA = support_rows(bulk, A)
    nu = n * d
    c = np.concatenate([np.zeros(d), np.full(nu, (1 - eps) / n), [eps]])
    I = sparse.identity(nu, format="csr")
    X = sparse.kron(sparse.csr_matrix(np.ones((n, 1))), sparse.identity(d), format="csr")
    z = sparse.csr_matrix((nu, 1))
    # h (x - xi) - u <= 0 ; b (xi - x) - u <= 0 ; s >= sA - A x
    rows = [sparse.hstack([h * X, -I, z]), sparse.hstack([-b * X, -I, z]),
            sparse.hstack([sparse.csr_matrix(-A), sparse.csr_matrix((A.shape[0], nu)),
                           -sparse.csr_matrix(np.ones((A.shape[0], 1)))])]
    rhs = np.concatenate([h * S.ravel(), -b * S.ravel(), -sA])
    res = sopt.linprog(c, A_ub=sparse.vstack(rows, format="csr"), b_ub=rhs,
                       bounds=[(0, None)] * d + [(0, None)] * nu + [(None, None)], method="highs")
    assert res.status == 0
    return res.fun, res.x[:d]


def test_lv_newsvendor_matches_exact_lp():
    S, bulk = _nv_instance(3)
    f = build_lv_objective(NewsvendorLoss(3, 8, 5), S, bulk, 0.25)
    rep = minimize(f, np.median(S, axis=0))
    ref, _ = _lv_newsvendor_lp(S, bulk, 3.0, 8.0, 0.25)
    assert abs(rep.value - ref) <= 1e-3 * abs(ref)
    assert rep.value >= ref - 1e-7 * abs(ref)


def test_lv_endpoints():
    S, bulk = _nv_instance(4, n=200, d=3)
    loss = NewsvendorLoss(3, 8, 3)
    saa = build_saa_objective(loss, S)
    lv0 = build_lv_objective(loss, S, bulk, 0.0)
    r = np.random.default_rng(0)
    for x in r.uniform(0, 80, size=(20, 3)):
        assert lv0.value(x) == saa.value(x)
    rep = minimize(build_lv_objective(loss, None, bulk, 1.0), np.full(3, 30.0), tol=1e-11)
    ref, _ = _lv_newsvendor_lp(S[:1], bulk, 3.0, 8.0, 1.0)
    assert abs(rep.value - ref) <= 1e-8 * (1 + abs(ref))


# ---- CVaR ---------------------------------------------------------------------

def _cvar_inner_min(f, x, taus):
    return min(f.value(np.append(x, t)) for t in taus)


def test_cvar_inner_minimum_examples():
    loss = NewsvendorLoss(1.0, 1.0, 1)
    S = np.array([[1.0], [2.0], [3.0], [4.0]])
    f = build_cvar_objective(loss, S, 0.5)
    assert _cvar_inner_min(f, [0.0], S.ravel()) == 3.5
    const = build_cvar_objective(loss, np.full((5, 1), 7.0), 0.3)
    assert const.value(np.array([0.0, 7.0])) == 7.0
    with pytest.raises(ValueError):
        build_cvar_objective(loss, S, 0.0)


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.99))
def test_cvar_inner_matches_reverse_lv(seed, eps):
    r = np.random.default_rng(seed)
    loss = LADLoss(2)
    S = r.normal(size=(40, 3))
    theta = r.normal(size=3)
    f = build_cvar_objective(loss, S, eps)
    l = sample_losses(loss, theta, S)
    assert abs(_cvar_inner_min(f, theta, l) - reverse_lv_risk(l, None, eps)) <= 1e-10 * (1 + l.max())


def test_cvar_near_one_tends_to_mean():
    l = np.array([[1.0], [2.0], [4.0], [9.0]])
    loss = NewsvendorLoss(1.0, 1.0, 1)
    for eps in (0.999, 1 - 1e-9):
        v = _cvar_inner_min(build_cvar_objective(loss, l, eps), [0.0], l.ravel())
        # dropping 1 - eps of the lowest atom: exact gap (1 - eps)(mean - min)/eps
        assert abs(v - l.mean() - (1 - eps) * (l.mean() - 1.0) / eps) <= 1e-12
    assert abs(v - l.mean()) <= 1e-8


# ---- KL -----------------------------------------------------------------------

def test_kl_examples():
    assert kl_dual(np.full(9, 4.2), 0.7)[0] == pytest.approx(4.2, abs=1e-12)
    assert abs(kl_dual(np.array([0.0, 10.0]), math.log(2))[0] - 10.0) <= 1e-6
    l = np.array([1.0, 2.0, 6.0])
    assert kl_dual(l, 0.0)[0] == l.mean()
    with pytest.raises(ValueError):
        kl_dual(l, -0.1)


@given(st.integers(0, 2**31 - 1), st.integers(2, 100))
def test_kl_monotone_and_saturating(seed, n):
    r = np.random.default_rng(seed)
    l = r.exponential(size=n) * 10
    vals = [kl_dual(l, e)[0] for e in np.linspace(0, math.log(n) + 1, 15)]
    assert all(a <= b + 1e-7 * (1 + l.max()) for a, b in zip(vals, vals[1:]))
    assert abs(kl_dual(l, math.log(n) + 0.5)[0] - l.max()) <= 1e-6
    assert abs(kl_dual(l, math.log(n))[0] - l.max()) <= 1e-6


def test_kl_dual_lagrangian_optimality():
    l = np.random.default_rng(2).normal(size=50) * 3
    val, lam, w = kl_dual(l, 0.2)
    grid = np.exp(np.linspace(math.log(lam) - 3, math.log(lam) + 3, 2001))
    brute = min(g * 0.2 + g * (np.log(np.mean(np.exp((l - l.max()) / g)))) + l.max() for g in grid)
    assert val <= brute + 1e-9 and abs(w.sum() - 1) <= 1e-12


def test_kl_bdro_reductions():
    r = np.random.default_rng(5)
    loss = NewsvendorLoss(3, 8, 2)
    D = r.normal(30, 10, size=(40, 2))
    single = build_kl_dual_objective(loss, D, 0.4)
    one = build_kl_bdro_objective(loss, [D], 0.4)
    same = build_kl_bdro_objective(loss, [D, D, D], 0.4)
    draws = r.normal(30, 10, size=(4, 40, 2))
    sat = build_kl_bdro_objective(loss, draws, math.log(40) + 0.1)
    for x in r.uniform(0, 60, size=(10, 2)):
        assert one.value(x) == single.value(x)
        assert abs(same.value(x) - single.value(x)) <= 1e-12 * single.value(x)
        expect = np.mean([loss.value(x, Dk).max() for Dk in draws])
        assert abs(sat.value(x) - expect) <= 1e-6 * (1 + expect)


# ---- regression objectives ------------------------------------------------------

def _reg_data(seed, n=200, d=3):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, d))
    y = X @ np.arange(1.0, d + 1) + 0.5 + r.standard_t(4, size=n)
    return X, y


def test_wasserstein_examples():
    X, y = _reg_data(0)
    plain = build_wasserstein_lad_objective(X, y, 0.0, 1.0)
    saa = build_saa_objective(LADLoss(3), np.column_stack([X, y]))
    theta = np.array([0.3, -1.0, 2.0, 0.1])
    assert plain.value(theta) == pytest.approx(saa.value(theta), abs=1e-12)
    f = build_wasserstein_lad_objective(X, y, 0.7, 2.0)
    for b0 in (-1.0, 0.0, 2.5):
        t = np.array([0.0, 0.0, 0.0, b0])
        assert f.value(t) == pytest.approx(np.mean(np.abs(y - b0)) + 0.7 * 2.0, abs=1e-12)
    med = np.median(y)
    assert all(f.value(np.array([0, 0, 0, med])) <= f.value(np.array([0, 0, 0, med + s])) for s in (-0.3, 0.2))


def test_wasserstein_path_shrinks():
    X, y = _reg_data(1, n=150)
    norms = []
    for rho in (0.0, 0.1, 0.5, 1.0, 2.0, 5.0):
        rep = minimize(build_wasserstein_lad_objective(X, y, rho, float(np.std(y))), np.zeros(4), tol=1e-8)
        norms.append(np.linalg.norm(rep.x[:-1]))
    assert all(a >= b - 1e-4 for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 0.5 * norms[0]


def test_ridge_closed_form():
    X, y = _reg_data(2)
    ols = np.linalg.lstsq(np.column_stack([X, np.ones(len(y))]), y, rcond=None)[0]
    assert np.allclose(ridge_solve(X, y, 0.0), ols, atol=1e-10)
    big = ridge_solve(X, y, 1e12)
    assert np.max(np.abs(big[:-1])) < 1e-9 and abs(big[-1] - y.mean()) < 1e-8
    yy = X @ np.array([1.0, -2.0, 0.5]) + 3.0
    t = ridge_solve(X, yy, 0.0)
    assert np.max(np.abs(yy - X @ t[:-1] - t[-1])) <= 1e-10
    with pytest.raises(np.linalg.LinAlgError):
        ridge_solve(np.column_stack([X[:, 0], X[:, 0]]), y, 0.0)


def test_ridge_matches_iterative_solver():
    X, y = _reg_data(3)
    f = build_ridge_objective(X, y, 0.3)
    res = sopt.minimize(lambda t: f(t)[0], np.zeros(4), jac=lambda t: f(t)[1], method="BFGS",
                        options={"gtol": 1e-13})
    assert np.max(np.abs(res.x - f.closed_form)) <= 1e-8


# ---- subgradient validity for every builder ----------------------------------------

def _builders():
    r = np.random.default_rng(11)
    nv = NewsvendorLoss(3, 8, 3)
    S, bulk = _nv_instance(12, n=120, d=3)
    X, y = _reg_data(13, n=120, d=2)
    XY = np.column_stack([X, y])
    prod = ProductBulk((((0, 1), EllipsoidBulk(np.zeros(2), np.eye(2) * 1.5, 2.0)),
                        ((2,), BoxBulk(np.array([0.5]), np.array([2.0]), 1.5))))
    inside = XY[prod.contains(XY)]
    joint = EllipsoidBulk(XY.mean(axis=0), np.linalg.cholesky(np.cov(XY.T)), 3.0)
    return [
        ("saa", build_saa_objective(nv, S), 3, 60.0),
        ("lv_nv", build_lv_objective(nv, S, bulk, 0.3), 3, 60.0),
        ("lv_lad_product", build_lv_objective(LADLoss(2), inside, prod, 0.4), 3, 5.0),
        ("lv_lad_joint", build_lv_objective(LADLoss(2), XY[joint.contains(XY)], joint, 0.6), 3, 5.0),
        ("cvar", build_cvar_objective(LADLoss(2), XY, 0.1), 4, 5.0),
        ("kl", build_kl_dual_objective(nv, S, 0.3), 3, 60.0),
        ("kl_bdro", build_kl_bdro_objective(nv, [S[:40], S[40:80], S[80:]], 1.1), 3, 60.0),
        ("wasserstein", build_wasserstein_lad_objective(X, y, 0.4, 1.5), 3, 5.0),
        ("ridge", build_ridge_objective(X, y, 0.2), 3, 5.0),
    ]


@pytest.mark.parametrize("name, f, dim, scale", _builders(), ids=lambda v: v if isinstance(v, str) else "")
def test_subgradient_inequality(name, f, dim, scale):
    r = np.random.default_rng(abs(hash(name)) % 2**32)
    lo = 0.0 if f.nonneg else -scale
    pts = r.uniform(lo, scale, size=(500, 2, dim))
    if name == "lv_lad_product":
        pts[:50, 0, :2] = 0.0  # kink of the norm term at w = 0
    for x, yv in pts:
        fx, gx = f(x)
        fy = f.value(yv)
        assert fy >= fx + gx @ (yv - x) - 1e-8 * (1 + abs(fx)), name
