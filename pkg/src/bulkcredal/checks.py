"""Randomised cross-checks of the closed forms against brute-force solutions.

Every check draws small discrete instances and compares a closed-form value
with an independent computation (LP over the ambiguity set, subset
enumeration or vertex enumeration). Used by ``bulkcredal oracle``.
"""
from __future__ import annotations

import itertools

import numpy as np
from scipy.optimize import linprog

from .calibrate import lv_distortion_bruteforce, lv_distortion_discrete
from .core import BoxBulk, DiscreteDistribution, PiecewiseAffineLoss
from .worstcase import (lv_risk, reverse_lv_risk, sup_over_bulk, tv_risk, tv_risk_oracle_discrete,
                        worst_case_distribution_lv)


def _lp_max(losses, A_ub=None, b_ub=None, bounds=None):
    n = losses.size
    res = linprog(-losses, A_ub=A_ub, b_ub=b_ub, A_eq=np.ones((1, n)), b_eq=[1.0],
                  bounds=bounds or [(0, None)] * n, method="highs")
    if res.status != 0:
        raise RuntimeError(f"reference LP failed: {res.message}")
    return -res.fun


def tv_ball_lp(losses, p, eps) -> float:
    """``max q @ l`` over ``{q : 0.5 * |q - p|_1 <= eps}`` on the atoms of ``p``.

    Variables ``(q, s)`` with ``s >= |q - p|``.
    """
    n = losses.size
    c = np.concatenate([-losses, np.zeros(n)])
    eye = np.eye(n)
    A = np.block([[eye, -eye], [-eye, -eye], [np.zeros((1, n)), 0.5 * np.ones((1, n))]])
    b = np.concatenate([p, -p, [eps]])
    A_eq = np.concatenate([np.ones(n), np.zeros(n)])[None, :]
    res = linprog(c, A_ub=A, b_ub=b, A_eq=A_eq, b_eq=[1.0],
                  bounds=[(0, None)] * n + [(None, None)] * n, method="highs")
    if res.status != 0:
        raise RuntimeError(f"reference LP failed: {res.message}")
    return -res.fun


def _random_law(rng, max_atoms):
    n = int(rng.integers(1, max_atoms + 1))
    losses = np.round(rng.normal(size=n) * 3, 1)     # rounding creates ties
    p = rng.dirichlet(np.full(n, 0.7))
    p = p / p.sum()
    return losses, p


def run_discrete_checks(trials: int = 1000, seed: int = 0, max_atoms: int = 12,
                        rtol: float = 1e-7) -> tuple[list[str], bool]:
    """Run all cross-checks; return report lines and the overall verdict."""
    rng = np.random.default_rng(seed)
    errs = {k: 0.0 for k in ("tv_vs_greedy", "tv_vs_lp", "reverse_lv_vs_lp", "lv_vs_lp",
                             "lv_worst_case_law", "lv_distortion_vs_subsets", "box_sup_vs_vertices")}
    for _ in range(trials):
        l, p = _random_law(rng, max_atoms)
        eps = float(rng.choice([0.0, 1.0, rng.uniform()]))
        P = DiscreteDistribution(l, p)
        scale = 1.0 + np.abs(l).max()

        tv = tv_risk(l, p, eps)
        errs["tv_vs_greedy"] = max(errs["tv_vs_greedy"], abs(tv - tv_risk_oracle_discrete(P, eps)) / scale)
        errs["tv_vs_lp"] = max(errs["tv_vs_lp"], abs(tv - tv_ball_lp(l, p, eps)) / scale)

        tail = max(eps, 1e-3)
        ref = _lp_max(l, bounds=[(0, pi / tail) for pi in p])
        errs["reverse_lv_vs_lp"] = max(errs["reverse_lv_vs_lp"], abs(reverse_lv_risk(l, p, tail) - ref) / scale)

        # forward ball on the centre's support: q >= (1 - eps) p
        ref = _lp_max(l, bounds=[((1 - eps) * pi, None) for pi in p])
        lv = lv_risk(eps, float(p @ l), float(l.max()))
        errs["lv_vs_lp"] = max(errs["lv_vs_lp"], abs(lv - ref) / scale)
        Q = worst_case_distribution_lv(P, l, eps)
        errs["lv_worst_case_law"] = max(errs["lv_worst_case_law"], abs(Q.expect(l) - lv) / scale)

        if l.size <= 10:
            q = rng.dirichlet(np.ones(l.size))
            # distinct atoms keep the alignment one-to-one
            Pd = DiscreteDistribution(np.arange(l.size, dtype=float), p)
            Qd = DiscreteDistribution(np.arange(l.size, dtype=float), q / q.sum())
            e = abs(lv_distortion_discrete(Qd, Pd) - lv_distortion_bruteforce(Qd, Pd))
            errs["lv_distortion_vs_subsets"] = max(errs["lv_distortion_vs_subsets"], e)

        d = int(rng.integers(1, 5))
        J = int(rng.integers(1, 4))
        loss = PiecewiseAffineLoss(rng.normal(size=(J, d)), rng.normal(size=J))
        box = BoxBulk(rng.normal(size=d), rng.uniform(0.2, 2.0, size=d), float(rng.uniform(0, 2)))
        verts = np.array(list(itertools.product((-1.0, 1.0), repeat=d)))
        verts = box.center + box.radius * box.halfwidths * verts
        ref = float(np.max(loss(verts)))
        val, _ = sup_over_bulk(loss, box)
        errs["box_sup_vs_vertices"] = max(errs["box_sup_vs_vertices"], abs(val - ref) / (1 + abs(ref)))

    lines, ok = [], True
    for name, e in errs.items():
        good = e <= rtol
        ok &= good
        lines.append(f"{'PASS' if good else 'FAIL'} {name} trials={trials} max_rel_err={e:.3e}")
    lines.append(f"{'PASS' if ok else 'FAIL'} all")
    return lines, ok
