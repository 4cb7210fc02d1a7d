"""Worst-case risks over contamination neighbourhoods of a centre law.

Forward LV (Huber) balls add adversarial mass inside the bulk, reverse LV
balls trim low-loss mass (CVaR), and total-variation balls do both.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (BoxBulk, DiscreteDistribution, EllipsoidBulk, PiecewiseAffineLoss,
                   ProductBulk, DimensionError)


def support_rows(bulk, A: np.ndarray) -> np.ndarray:
    """Support function of ``bulk`` evaluated at every row of ``A``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[1] != bulk.dim:
        raise DimensionError(f"slope dimension {A.shape[1]} != bulk dimension {bulk.dim}")
    if isinstance(bulk, EllipsoidBulk):
        return A @ bulk.center + bulk.radius * np.linalg.norm(A @ bulk.chol, axis=1)
    if isinstance(bulk, BoxBulk):
        return A @ bulk.center + bulk.radius * (np.abs(A) @ bulk.halfwidths)
    if isinstance(bulk, ProductBulk):
        out = np.zeros(A.shape[0])
        for idx, sub in bulk.blocks:
            out += support_rows(sub, A[:, list(idx)])
        return out
    raise TypeError(f"unsupported bulk type {type(bulk).__name__}")


def bulk_center(bulk) -> np.ndarray:
    """Centre of symmetry of a bulk set (product blocks reassembled in index order)."""
    if isinstance(bulk, ProductBulk):
        c = np.empty(bulk.dim)
        for idx, sub in bulk.blocks:
            c[list(idx)] = bulk_center(sub)
        return c
    return np.asarray(bulk.center, dtype=float)


def support_grad(bulk, a) -> np.ndarray:
    """A subgradient of the support function at ``a`` (zero norm-part at ``a = 0``)."""
    a = np.asarray(a, dtype=float)
    if isinstance(bulk, EllipsoidBulk):
        v = bulk.chol.T @ a
        nv = np.linalg.norm(v)
        g = np.array(bulk.center, dtype=float)
        if nv > 0:
            g += bulk.radius * (bulk.chol @ v) / nv
        return g
    if isinstance(bulk, BoxBulk):
        return bulk.center + bulk.radius * bulk.halfwidths * np.sign(a)
    if isinstance(bulk, ProductBulk):
        g = np.empty(bulk.dim)
        for idx, sub in bulk.blocks:
            g[list(idx)] = support_grad(sub, a[list(idx)])
        return g
    raise TypeError(f"unsupported bulk type {type(bulk).__name__}")


def sup_over_bulk(loss: PiecewiseAffineLoss, bulk) -> tuple[float, int]:
    """Closed-form ``sup_{xi in bulk} max_j a_j @ xi + b_j``.

    Returns the value and the attaining piece (smallest index on ties).
    """
    vals = loss.offsets + support_rows(bulk, loss.slopes)
    j = int(np.argmax(vals))
    return float(vals[j]), j


def lv_risk(eps: float, in_bulk_mean: float, in_bulk_sup: float) -> float:
    """``(1 - eps) * mean + eps * sup``."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    return (1.0 - eps) * in_bulk_mean + eps * in_bulk_sup


def _check_weights(losses, weights):
    losses = np.asarray(losses, dtype=float).ravel()
    if weights is None:
        weights = np.full(losses.size, 1.0 / losses.size)
    weights = np.asarray(weights, dtype=float).ravel()
    if weights.shape != losses.shape:
        raise ValueError("losses and weights differ in length")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be a probability vector")
    return losses, weights


def _upper_tail_sum(losses, weights, mass):
    """Sum of ``loss * weight`` over the top ``mass`` of probability."""
    order = np.argsort(-losses, kind="stable")
    l, w = losses[order], weights[order]
    before = np.concatenate(([0.0], np.cumsum(w)[:-1]))
    take = np.clip(mass - before, 0.0, w)
    return float(np.dot(take, l))


def reverse_lv_risk(losses, weights=None, eps: float = 0.05) -> float:
    """Average of the worst ``eps`` fraction of the loss law (CVaR at tail mass ``eps``).

    The boundary atom enters with a fractional weight. ``eps = 1`` gives the mean.
    """
    losses, weights = _check_weights(losses, weights)
    if not 0.0 < eps <= 1.0:
        raise ValueError("tail mass must lie in (0, 1]; use the maximum for eps = 0")
    if eps == 1.0:
        return float(np.dot(weights, losses))
    return _upper_tail_sum(losses, weights, eps) / eps


cvar = reverse_lv_risk


def tv_risk(losses, weights=None, eps: float = 0.05, sup_value: float | None = None) -> float:
    """Worst case over the TV ball of radius ``eps``.

    Equals ``(1 - eps) * CVaR + eps * sup`` where the CVaR averages the top
    ``1 - eps`` of the mass: the adversary deletes ``eps`` of the lowest-loss
    mass and re-places it at the supremum.
    """
    losses, weights = _check_weights(losses, weights)
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    if sup_value is None:
        sup_value = float(losses.max())
    if sup_value < losses.max():
        raise ValueError("sup_value is below the largest loss atom")
    if eps == 1.0:
        return float(sup_value)
    return _upper_tail_sum(losses, weights, 1.0 - eps) + eps * sup_value


def tv_risk_oracle_discrete(P: DiscreteDistribution, eps: float) -> float:
    """Primal greedy worst case over ``{Q : TV(Q, P) <= eps}`` on P's support.

    Mass is removed from the lowest-loss atoms first and piled on the
    largest-loss atom.
    """
    vals = np.asarray(P.atoms, dtype=float).ravel()
    q = np.array(P.probs, dtype=float)
    top = int(np.argmax(vals))
    budget = min(max(eps, 0.0), 1.0 - q[top])
    moved = 0.0
    for i in np.argsort(vals, kind="stable"):
        if i == top or moved >= budget:
            continue
        take = min(q[i], budget - moved)
        q[i] -= take
        moved += take
    q[top] += moved
    return float(np.dot(q, vals))


def worst_case_distribution_lv(centre: DiscreteDistribution, losses, eps: float) -> DiscreteDistribution:
    """``(1 - eps) * centre + eps * Dirac(argmax loss)``, first maximiser on ties."""
    losses = np.asarray(losses, dtype=float).ravel()
    if losses.size != centre.size:
        raise ValueError("one loss per centre atom required")
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    probs = (1.0 - eps) * np.asarray(centre.probs)
    probs[int(np.argmax(losses))] += eps
    return DiscreteDistribution(centre.atoms, probs)


def effective_tolerance(eps_c: float, eps_star: float, rho: float) -> float:
    """In-bulk distortion from centre mismatch plus in-bulk deployment contamination."""
    val = eps_c + eps_star * rho - eps_star * eps_c * rho
    return float(min(max(val, 0.0), 1.0))


@dataclass(frozen=True)
class CertificateInputs:
    eps_c: float
    eps_star: float
    rho: float                 # R~(bulk) / P~(bulk)
    gamma: float
    r_tilde_bulk_mass: float   # R~(bulk)
    p: float
    m_p: float                 # (E_{P~} |f|^p)^(1/p)
    in_bulk_mean: float
    in_bulk_sup: float

    def __post_init__(self):
        if not (0 <= self.eps_c < 1 and 0 <= self.eps_star < 1):
            raise ValueError("eps_c and eps_star must lie in [0, 1)")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0 <= self.r_tilde_bulk_mass <= 1:
            raise ValueError("R~(bulk) must lie in [0, 1]")
        if self.p <= 1:
            raise ValueError("moment order p must exceed 1")
        if self.rho < 0 or self.m_p < 0:
            raise ValueError("rho and M_p must be nonnegative")

    @property
    def q(self) -> float:
        return self.p / (self.p - 1.0)


def certificate_bound(c: CertificateInputs) -> float:
    """Upper bound on the deployment risk: LV risk at the effective tolerance
    plus a Hoelder tail term for mass outside the bulk."""
    eff = effective_tolerance(c.eps_c, c.eps_star, c.rho)
    tail_mass = (1.0 - c.eps_star) * c.gamma + c.eps_star * (1.0 - c.r_tilde_bulk_mass)
    return lv_risk(eff, c.in_bulk_mean, c.in_bulk_sup) + c.m_p * tail_mass ** (1.0 / c.q)
