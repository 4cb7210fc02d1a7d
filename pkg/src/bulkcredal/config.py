"""Numerical tolerances and defaults shared across the package."""
from dataclasses import dataclass


@dataclass(frozen=True)
class Tolerances:
    prob_sum: float = 1e-12          # DiscreteDistribution normalisation
    cut_validity: float = 1e-8       # subgradient inequality slack (relative to 1+|f|)
    solve_rel_gap: float = 1e-6      # cutting-plane stopping gap
    solve_max_iters: int = 5000
    calib_ridge: float = 1e-8        # covariance ridge for score fitting
    gibbs_ridge: float = 1e-6        # ridge on the Student-t scale matrix
    copula_jitter: float = 1e-6
    max_newsvendor_dim: int = 20
    max_bruteforce_atoms: int = 20


TOL = Tolerances()
