"""Shared domain types: outcome matrices, bulk sets, losses, finite laws."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import TOL


class DimensionError(ValueError):
    """Raised when a vector does not match the dimension of a loss or set."""


def _frozen(a, dtype=float, ndim=None):
    arr = np.array(a, dtype=dtype, copy=True)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def as_outcomes(data) -> np.ndarray:
    """Validate an outcome matrix (rows are i.i.d. outcomes) and return a float64 copy."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"outcome matrix must be 2-d with n, d >= 1, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("outcome matrix contains non-finite entries")
    return arr


def _rows(xi, dim: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(xi, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != dim:
        raise DimensionError(f"expected dimension {dim}, got {arr.shape[1]}")
    return arr, single


# --------------------------------------------------------------------------
# Bulk sets
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EllipsoidBulk:
    """``{xi : ||L^{-1}(xi - center)||_2 <= radius}`` with ``chol`` lower triangular."""

    center: np.ndarray
    chol: np.ndarray
    radius: float

    def __post_init__(self):
        center = _frozen(self.center, ndim=1)
        chol = _frozen(self.chol, ndim=2)
        if chol.shape != (center.size, center.size):
            raise ValueError("factor shape does not match center")
        if not np.allclose(chol, np.tril(chol)):
            raise ValueError("factor must be lower triangular")
        if np.any(np.diag(chol) <= 0):
            raise ValueError("factor must have a positive diagonal")
        if not self.radius >= 0:
            raise ValueError("radius must be nonnegative")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "chol", chol)
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self) -> int:
        return self.center.size

    def scores(self, xi) -> np.ndarray:
        from scipy.linalg import solve_triangular

        rows, _ = _rows(xi, self.dim)
        z = solve_triangular(self.chol, (rows - self.center).T, lower=True)
        return np.sqrt(np.sum(z * z, axis=0))

    def contains(self, xi):
        inside = self.scores(xi) <= self.radius
        return bool(inside[0]) if np.ndim(xi) == 1 else inside

    def support(self, a) -> float:
        """``sup_{xi in set} a @ xi``."""
        a = np.asarray(a, dtype=float)
        return float(a @ self.center + self.radius * np.linalg.norm(self.chol.T @ a))

    def with_radius(self, radius: float) -> "EllipsoidBulk":
        return EllipsoidBulk(self.center, self.chol, radius)


@dataclass(frozen=True)
class BoxBulk:
    """``{xi : max_i |xi_i - center_i| / halfwidths_i <= radius}``."""

    center: np.ndarray
    halfwidths: np.ndarray
    radius: float

    def __post_init__(self):
        center = _frozen(self.center, ndim=1)
        w = _frozen(self.halfwidths, ndim=1)
        if w.shape != center.shape:
            raise ValueError("halfwidths shape does not match center")
        if np.any(w <= 0):
            raise ValueError("halfwidths must be positive")
        if not self.radius >= 0:
            raise ValueError("radius must be nonnegative")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "halfwidths", w)
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self) -> int:
        return self.center.size

    def scores(self, xi) -> np.ndarray:
        rows, _ = _rows(xi, self.dim)
        return np.max(np.abs(rows - self.center) / self.halfwidths, axis=1)

    def contains(self, xi):
        inside = self.scores(xi) <= self.radius
        return bool(inside[0]) if np.ndim(xi) == 1 else inside

    def support(self, a) -> float:
        a = np.asarray(a, dtype=float)
        return float(a @ self.center + self.radius * np.sum(self.halfwidths * np.abs(a)))

    def with_radius(self, radius: float) -> "BoxBulk":
        return BoxBulk(self.center, self.halfwidths, radius)


@dataclass(frozen=True)
class ProductBulk:
    """Cartesian product of non-product bulk sets on disjoint coordinate blocks."""

    blocks: tuple

    def __post_init__(self):
        blocks = []
        seen: list[int] = []
        for idx, bulk in self.blocks:
            if isinstance(bulk, ProductBulk):
                raise ValueError("product blocks must not be nested")
            idx = tuple(int(i) for i in idx)
            if len(idx) != bulk.dim:
                raise ValueError("block index set does not match block dimension")
            blocks.append((idx, bulk))
            seen.extend(idx)
        if sorted(seen) != list(range(len(seen))):
            raise ValueError("block index sets must partition 0..d-1 exactly once")
        object.__setattr__(self, "blocks", tuple(blocks))

    @property
    def dim(self) -> int:
        return sum(len(idx) for idx, _ in self.blocks)

    def contains(self, xi):
        rows, single = _rows(xi, self.dim)
        inside = np.ones(rows.shape[0], dtype=bool)
        for idx, bulk in self.blocks:
            inside &= np.atleast_1d(bulk.contains(rows[:, list(idx)]))
        return bool(inside[0]) if single else inside

    def support(self, a) -> float:
        a = np.asarray(a, dtype=float)
        return float(sum(bulk.support(a[list(idx)]) for idx, bulk in self.blocks))


BulkSet = EllipsoidBulk | BoxBulk | ProductBulk


def bulk_contains(bulk, xi):
    """Membership test; accepts a single vector or a matrix of rows."""
    return bulk.contains(xi)


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PiecewiseAffineLoss:
    """``f(xi) = max_j slopes[j] @ xi + offsets[j]``."""

    slopes: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        slopes = _frozen(self.slopes, ndim=2)
        offsets = _frozen(self.offsets, ndim=1)
        if slopes.shape[0] < 1 or slopes.shape[0] != offsets.size:
            raise ValueError("need J >= 1 pieces with matching offsets")
        if not (np.all(np.isfinite(slopes)) and np.all(np.isfinite(offsets))):
            raise ValueError("loss coefficients must be finite")
        object.__setattr__(self, "slopes", slopes)
        object.__setattr__(self, "offsets", offsets)

    @property
    def dim(self) -> int:
        return self.slopes.shape[1]

    @property
    def n_pieces(self) -> int:
        return self.slopes.shape[0]

    def __call__(self, xi):
        rows, single = _rows(xi, self.dim)
        vals = np.max(rows @ self.slopes.T + self.offsets, axis=1)
        return float(vals[0]) if single else vals


def evaluate_loss(loss: PiecewiseAffineLoss, xi) -> float:
    xi = np.asarray(xi, dtype=float)
    if xi.ndim != 1:
        raise DimensionError("evaluate_loss takes a single outcome vector")
    return loss(xi)


@dataclass(frozen=True)
class NewsvendorLoss:
    """Holding/backorder cost ``sum_j h[x_j - xi_j]_+ + b[xi_j - x_j]_+``."""

    h: float
    b: float
    d: int

    def __post_init__(self):
        if self.h <= 0 or self.b <= 0:
            raise ValueError("costs must be positive")
        if not 1 <= self.d <= TOL.max_newsvendor_dim:
            raise ValueError(
                f"newsvendor piece enumeration supports 1 <= d <= {TOL.max_newsvendor_dim}, got {self.d}"
            )

    @property
    def decision_dim(self) -> int:
        return self.d

    @property
    def outcome_dim(self) -> int:
        return self.d

    def piece_slopes(self) -> np.ndarray:
        """All ``2**d`` slope vectors in ``{-h, b}^d`` (lexicographic, -h first)."""
        return np.array(list(itertools.product((-self.h, self.b), repeat=self.d)), dtype=float)

    def pieces(self, x) -> PiecewiseAffineLoss:
        x = np.asarray(x, dtype=float)
        A = self.piece_slopes()
        return PiecewiseAffineLoss(A, -A @ x)

    def value(self, x, xi):
        x = np.asarray(x, dtype=float)
        rows, single = _rows(xi, self.d)
        diff = x - rows
        vals = np.sum(self.h * np.maximum(diff, 0.0) + self.b * np.maximum(-diff, 0.0), axis=1)
        return float(vals[0]) if single else vals

    def subgradient(self, x, xi) -> np.ndarray:
        """Subgradient in ``x``; zero on kinks."""
        x = np.asarray(x, dtype=float)
        rows, single = _rows(xi, self.d)
        diff = x - rows
        g = np.where(diff > 0, self.h, 0.0) - np.where(diff < 0, self.b, 0.0)
        return g[0] if single else g


@dataclass(frozen=True)
class LADLoss:
    """Absolute residual ``|y - w @ x - b0|`` on outcomes ``xi = (x, y)``.

    Decisions are ``theta = (w, b0)`` of length ``d + 1``.
    """

    d: int

    @property
    def decision_dim(self) -> int:
        return self.d + 1

    @property
    def outcome_dim(self) -> int:
        return self.d + 1

    def pieces(self, theta) -> PiecewiseAffineLoss:
        theta = np.asarray(theta, dtype=float)
        w, b0 = theta[:-1], theta[-1]
        a = np.append(-w, 1.0)
        return PiecewiseAffineLoss(np.vstack([a, -a]), np.array([-b0, b0]))

    def residuals(self, theta, xi) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        rows, _ = _rows(xi, self.d + 1)
        return rows[:, -1] - rows[:, :-1] @ theta[:-1] - theta[-1]

    def value(self, theta, xi):
        vals = np.abs(self.residuals(theta, xi))
        return float(vals[0]) if np.ndim(xi) == 1 else vals

    def subgradient(self, theta, xi) -> np.ndarray:
        rows, single = _rows(xi, self.d + 1)
        s = np.sign(self.residuals(theta, rows))
        g = -s[:, None] * np.hstack([rows[:, :-1], np.ones((rows.shape[0], 1))])
        return g[0] if single else g


DecisionLoss = NewsvendorLoss | LADLoss


# --------------------------------------------------------------------------
# Finite laws and metrics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscreteDistribution:
    """Finite-support law; ``atoms`` may be scalars or outcome vectors."""

    atoms: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        atoms = _frozen(self.atoms)
        probs = _frozen(self.probs, ndim=1)
        if atoms.shape[0] != probs.size:
            raise ValueError("atoms and probs lengths differ")
        if np.any(probs < 0):
            raise ValueError("probabilities must be nonnegative")
        if abs(probs.sum() - 1.0) > TOL.prob_sum:
            raise ValueError(f"probabilities sum to {probs.sum()!r}, not 1")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, atoms) -> "DiscreteDistribution":
        atoms = np.asarray(atoms, dtype=float)
        n = atoms.shape[0]
        return cls(atoms, np.full(n, 1.0 / n))

    @property
    def size(self) -> int:
        return self.probs.size

    def expect(self, values: Sequence[float] | None = None) -> float:
        vals = self.atoms if values is None else np.asarray(values, dtype=float)
        return float(np.dot(self.probs, vals))


@dataclass(frozen=True)
class FrontierPoint:
    tolerance: float
    oos_mean: float
    oos_sd: float
    msd: float
    solve_seconds: float = field(default=0.0, compare=False)

    @classmethod
    def from_stats(cls, tolerance, oos_mean, oos_sd, solve_seconds=0.0):
        oos_mean, oos_sd = float(oos_mean), float(oos_sd)
        return cls(float(tolerance), oos_mean, oos_sd, (oos_mean + oos_sd) / 2, float(solve_seconds))
