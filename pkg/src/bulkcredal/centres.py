"""Centre laws for the contamination sets and how to draw scenarios from them.

Three constructions are provided: the empirical law, a Gaussian copula with
empirical marginals and a linear head for the response, and the posterior
predictive of a multivariate Student-t model fitted by Gibbs sampling.
Samplers are immutable after fitting and round-trip through JSON.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import stats

from .config import TOL
from .core import as_outcomes, bulk_contains


class CentreError(RuntimeError):
    """Fitting or sampling failure (singular covariance, acceptance shortfall, ...)."""


class AcceptanceShortfall(CentreError):
    def __init__(self, accepted: int, drawn: int, target: int):
        self.accepted, self.drawn, self.target = accepted, drawn, target
        self.rate = accepted / drawn if drawn else 0.0
        super().__init__(f"only {accepted} of {target} requested rows accepted after "
                         f"{drawn} draws (acceptance rate {self.rate:.4f})")


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _chol(S: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        lam = np.linalg.eigvalsh(0.5 * (S + S.T)).min()
        raise CentreError(f"{what} is not positive definite (smallest eigenvalue {lam:.3g})") from exc


# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EmpiricalSampler:
    data: np.ndarray

    def __post_init__(self):
        arr = as_outcomes(self.data)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def sample(self, k: int, seed=None) -> np.ndarray:
        idx = _rng(seed).integers(0, self.data.shape[0], size=k)
        return self.data[idx].copy()

    def to_dict(self) -> dict:
        return {"kind": "empirical", "data": self.data.tolist()}


@dataclass(frozen=True)
class GaussianCopulaSampler:
    """Latent Gaussian copula over X with empirical marginals, then
    ``Y = w.X + b0 + sigma_y * N(0, 1)``.

    ``values[j]`` holds the distinct fitting values of coordinate j and
    ``levels[j]`` the empirical CDF at each of them.
    """
    values: tuple
    levels: tuple
    chol: np.ndarray
    jitter: float
    w: np.ndarray
    b0: float
    sigma_y: float

    def __post_init__(self):
        vals = tuple(np.asarray(v, dtype=float) for v in self.values)
        levs = tuple(np.asarray(p, dtype=float) for p in self.levels)
        if len(vals) != len(levs) or len(vals) != self.chol.shape[0]:
            raise ValueError("marginal tables and latent factor disagree on dimension")
        for v, p in zip(vals, levs):
            if v.size == 0 or v.shape != p.shape or np.any(np.diff(v) <= 0) or np.any(np.diff(p) <= 0):
                raise ValueError("marginal tables must be nonempty and strictly increasing")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "levels", levs)
        object.__setattr__(self, "chol", np.asarray(self.chol, dtype=float))
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float))

    @property
    def dim(self) -> int:
        return len(self.values) + 1

    def inverse_cdf(self, j: int, u: np.ndarray) -> np.ndarray:
        """Left-continuous generalised inverse ``inf{x : F_j(x) >= u}``."""
        idx = np.searchsorted(self.levels[j], u, side="left")
        return self.values[j][np.minimum(idx, self.values[j].size - 1)]

    def sample_x(self, k: int, rng) -> np.ndarray:
        Z = rng.standard_normal((k, len(self.values))) @ self.chol.T
        U = stats.norm.cdf(Z)
        return np.column_stack([self.inverse_cdf(j, U[:, j]) for j in range(U.shape[1])])

    def sample(self, k: int, seed=None) -> np.ndarray:
        rng = _rng(seed)
        X = self.sample_x(k, rng)
        y = X @ self.w + self.b0 + self.sigma_y * rng.standard_normal(k)
        return np.column_stack([X, y])

    def to_dict(self) -> dict:
        return {"kind": "copula", "values": [v.tolist() for v in self.values],
                "levels": [p.tolist() for p in self.levels], "chol": self.chol.tolist(),
                "jitter": self.jitter, "w": self.w.tolist(), "b0": self.b0,
                "sigma_y": self.sigma_y}


@dataclass(frozen=True)
class StudentTPredictive:
    """Posterior predictive of a Student-t model, stored as retained chain states."""
    nu: float
    mu0: np.ndarray
    kappa0: float
    psi0: np.ndarray
    nu0: float
    burn_in: int
    ridge: float
    mus: np.ndarray        # (S, d)
    chols: np.ndarray      # (S, d, d) Cholesky factors of the scale matrices

    @property
    def dim(self) -> int:
        return self.mus.shape[1]

    @property
    def n_states(self) -> int:
        return self.mus.shape[0]

    def _draw(self, states: np.ndarray, rng) -> np.ndarray:
        z = rng.standard_normal((states.size, self.dim))
        g = rng.chisquare(self.nu, size=states.size) / self.nu
        return self.mus[states] + np.einsum("kij,kj->ki", self.chols[states], z) / np.sqrt(g)[:, None]

    def sample(self, k: int, seed=None) -> np.ndarray:
        """One predictive draw per retained state, cycling through the chain in order."""
        return self._draw(np.arange(k) % self.n_states, _rng(seed))

    def sample_nested(self, m_post: int, m_pred: int, seed=None) -> np.ndarray:
        """``(m_post, m_pred, d)`` array: ``m_pred`` predictive draws for each of
        ``m_post`` chain states spread evenly over the retained chain."""
        if m_post < 1 or m_pred < 1:
            raise ValueError("m_post and m_pred must be positive")
        states = np.linspace(0, self.n_states - 1, m_post).round().astype(int)
        out = self._draw(np.repeat(states, m_pred), _rng(seed))
        return out.reshape(m_post, m_pred, self.dim)

    def to_dict(self) -> dict:
        return {"kind": "student-t", "nu": self.nu, "mu0": self.mu0.tolist(),
                "kappa0": self.kappa0, "psi0": self.psi0.tolist(), "nu0": self.nu0,
                "burn_in": self.burn_in, "ridge": self.ridge, "mus": self.mus.tolist(),
                "chols": self.chols.tolist()}


CentreSampler = Union[EmpiricalSampler, GaussianCopulaSampler, StudentTPredictive]


def sample_centre(sampler: CentreSampler, k: int, seed=None) -> np.ndarray:
    if k < 1:
        raise ValueError("k must be at least 1")
    if sampler is None:
        raise CentreError("sampler has not been fitted")
    return sampler.sample(k, seed)


# ---------------------------------------------------------------------------
# fitting

def _ecdf_tables(col: np.ndarray):
    vals, counts = np.unique(col, return_counts=True)
    return vals, np.cumsum(counts) / col.size


def fit_copula_centre(X, y, jitter: float = TOL.copula_jitter) -> GaussianCopulaSampler:
    X = as_outcomes(X)
    y = np.asarray(y, dtype=float).ravel()
    n, d = X.shape
    if y.size != n:
        raise ValueError("one response per row of X required")
    if n < d + 2:
        raise ValueError(f"copula fit needs n >= d + 2 rows, got n={n}, d={d}")
    if jitter < 0:
        raise ValueError("jitter must be nonnegative")
    values, levels, Z = [], [], np.empty_like(X)
    for j in range(d):
        v, p = _ecdf_tables(X[:, j])
        values.append(v)
        levels.append(p)
        U = p[np.searchsorted(v, X[:, j])]
        Z[:, j] = stats.norm.ppf(np.clip(U, 1.0 / (n + 1), n / (n + 1.0)))
    cov = np.atleast_2d(np.cov(Z, rowvar=False)) + jitter * np.eye(d)
    eig = np.linalg.eigvalsh(cov)
    if eig.min() <= 1e-12 * max(eig.max(), 1.0):
        raise CentreError(f"latent covariance is singular after jitter (smallest eigenvalue {eig.min():.3g})")
    L = _chol(cov, "latent covariance")
    A = np.column_stack([X, np.ones(n)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return GaussianCopulaSampler(tuple(values), tuple(levels), L, float(jitter),
                                 coef[:-1], float(coef[-1]), float(np.sqrt(np.mean(resid ** 2))))


@dataclass(frozen=True)
class NIWPrior:
    mu0: np.ndarray
    kappa0: float
    psi0: np.ndarray
    nu0: float

    @classmethod
    def weak(cls, data: np.ndarray, floor: float = TOL.gibbs_ridge) -> "NIWPrior":
        """Sample mean, unit prior count, sample covariance, ``nu0 = d + 2``.

        ``floor * I`` is added to the covariance so constant data still give
        a positive definite prior scale.
        """
        d = data.shape[1]
        psi0 = np.atleast_2d(np.cov(data, rowvar=False)) + floor * np.eye(d)
        return cls(data.mean(axis=0), 1.0, psi0, d + 2.0)


def fit_student_t_gibbs(data, nu: float = 3.0, prior: NIWPrior | None = None,
                        iters: int = 2700, burn_in: int = 200,
                        ridge: float = TOL.gibbs_ridge, seed=None) -> StudentTPredictive:
    """Gibbs sampler for a multivariate t likelihood under a NIW prior.

    The t law is written as a Gaussian scale mixture: each row carries a
    latent weight ``w_i ~ Gamma((nu + d)/2, rate=(nu + m_i)/2)`` and given the
    weights ``(mu, Sigma)`` has a weighted NIW posterior. ``iters - burn_in``
    states are kept (no thinning).
    """
    X = as_outcomes(data)
    n, d = X.shape
    if not iters > burn_in >= 0:
        raise ValueError("need iters > burn_in >= 0")
    if nu <= 0:
        raise ValueError("nu must be positive")
    if n <= d:
        raise ValueError(f"Gibbs fit needs n > d rows, got n={n}, d={d}")
    prior = prior or NIWPrior.weak(X, ridge)
    rng = _rng(seed)
    mu0, k0, psi0, nu0 = (np.asarray(prior.mu0, float), float(prior.kappa0),
                          np.asarray(prior.psi0, float), float(prior.nu0))
    eye = np.eye(d)
    mu = X.mean(axis=0)
    L = _chol(np.atleast_2d(np.cov(X, rowvar=False)) + ridge * eye, "initial scale matrix")
    keep = iters - burn_in
    mus, chols = np.empty((keep, d)), np.empty((keep, d, d))
    nu_n = nu0 + n
    for it in range(iters):
        R = np.linalg.solve(L, (X - mu).T)
        m = np.sum(R * R, axis=0)
        w = rng.gamma(0.5 * (nu + d), 2.0 / (nu + m))
        W = w.sum()
        xbar = (w @ X) / W
        kn = k0 + W
        mun = (k0 * mu0 + W * xbar) / kn
        D = X - xbar
        dm = xbar - mu0
        psin = psi0 + (D * w[:, None]).T @ D + (k0 * W / kn) * np.outer(dm, dm)
        psin = 0.5 * (psin + psin.T)
        Sigma = np.atleast_2d(stats.invwishart.rvs(df=nu_n, scale=psin, random_state=rng))
        Sigma = 0.5 * (Sigma + Sigma.T) + ridge * eye
        L = _chol(Sigma, f"scale matrix at Gibbs iteration {it}")
        mu = mun + (L @ rng.standard_normal(d)) / np.sqrt(kn)
        if it >= burn_in:
            mus[it - burn_in] = mu
            chols[it - burn_in] = L
    return StudentTPredictive(float(nu), mu0, k0, psi0, nu0, int(burn_in), float(ridge), mus, chols)


def rejection_sample_bulk(sampler: CentreSampler, bulk, target_k: int,
                          max_draw_factor: float = 20.0, seed=None,
                          batch: int | None = None) -> tuple[np.ndarray, float]:
    """Draw from ``sampler`` and keep the first ``target_k`` rows inside ``bulk``.

    Returns ``(rows, acceptance_rate)``. Draws happen in batches of
    ``batch`` rows (default ``2 * target_k``) from one generator, so the
    output only depends on the seed.
    """
    if target_k < 1 or max_draw_factor < 1:
        raise ValueError("need target_k >= 1 and max_draw_factor >= 1")
    rng = _rng(seed)
    budget = int(np.ceil(max_draw_factor * target_k))
    batch = batch or 2 * target_k
    kept, n_kept, drawn = [], 0, 0
    while n_kept < target_k and drawn < budget:
        k = min(batch, budget - drawn)
        rows = sampler.sample(k, rng) if not isinstance(sampler, StudentTPredictive) \
            else sampler._draw((np.arange(drawn, drawn + k)) % sampler.n_states, rng)
        drawn += k
        inside = np.asarray(bulk_contains(bulk, rows), dtype=bool)
        good = rows[inside]
        if n_kept + good.shape[0] >= target_k:
            need = target_k - n_kept
            # count draws up to the last accepted row actually used
            drawn -= k - (np.flatnonzero(inside)[need - 1] + 1)
            good = good[:need]
        kept.append(good)
        n_kept += good.shape[0]
    if n_kept < target_k:
        raise AcceptanceShortfall(n_kept, drawn, target_k)
    return np.vstack(kept), target_k / drawn


# ---------------------------------------------------------------------------
# persistence

def sampler_to_json(sampler: CentreSampler, path) -> None:
    with open(path, "w") as fh:
        json.dump(sampler.to_dict(), fh, sort_keys=True)


def sampler_from_dict(d: dict) -> CentreSampler:
    kind = d.get("kind")
    if kind == "empirical":
        return EmpiricalSampler(np.asarray(d["data"], dtype=float))
    if kind == "copula":
        return GaussianCopulaSampler(tuple(d["values"]), tuple(d["levels"]), np.asarray(d["chol"]),
                                     float(d["jitter"]), np.asarray(d["w"]), float(d["b0"]),
                                     float(d["sigma_y"]))
    if kind == "student-t":
        return StudentTPredictive(float(d["nu"]), np.asarray(d["mu0"]), float(d["kappa0"]),
                                  np.asarray(d["psi0"]), float(d["nu0"]), int(d["burn_in"]),
                                  float(d["ridge"]), np.asarray(d["mus"], dtype=float),
                                  np.asarray(d["chols"], dtype=float))
    raise ValueError(f"unknown sampler kind {kind!r}")


def sampler_from_json(path) -> CentreSampler:
    with open(path) as fh:
        return sampler_from_dict(json.load(fh))
