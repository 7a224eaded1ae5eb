"""Augmented-Lagrangian distributed OPF driver and its coupling QP.

Iterates: parallel-solvable local NLPs with the augmented objective
f(x) + lambda^T A x + (rho/2)||x - y||^2_Sigma, sensitivity extraction at
the local solutions, an equality-constrained coupling QP solved as one
sparse symmetric KKT system, and a geometric penalty update in place of a
line search (all step sizes fixed to 1).
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from opfbench import nlp, opfcore
from opfbench.nlp import NlpResult, NlpSpec
from opfbench.opfcore import KktMultipliers, OpfProblem

CONVERGED = "converged"
ITERATION_LIMIT = "iteration-limit"


@dataclass
class AladinParams:
    """Penalty parameters, update factors, tolerances and step caps."""

    rho0: float = 500.0
    mu0: float = 500.0
    rho_factor: float = 1.05
    mu_factor: float = 2.0
    rho_max: float = 1e8
    mu_max: float = 1e8
    eps: float = 1e-3
    max_iter: int = 500
    active_tol: float = 1e-6
    nlp_tol: float = 1e-8
    sigma: list[np.ndarray] | None = None   # per-block diagonal weights
    workers: int = 1

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if min(self.rho0, self.mu0) <= 0 or min(self.rho_factor, self.mu_factor) < 1:
            raise ValueError("penalties must be positive with factors >= 1")


@dataclass
class AladinState:
    y: np.ndarray
    lam: np.ndarray
    rho: float
    mu: float
    iteration: int = 0


@dataclass
class SensitivityData:
    """Per block: objective gradient, Lagrangian Hessian, active rows."""

    gradients: list[np.ndarray]
    hessians: list[sp.csr_matrix]
    active_jacobians: list[sp.csr_matrix]


@dataclass
class IterationRecord:
    iteration: int
    consensus_residual: float
    primal_change: float
    rho: float
    mu: float
    degraded: bool = False


@dataclass
class SolveReport:
    status: str
    iterations: int
    consensus_residual: float
    primal_change: float
    objective: float
    x: np.ndarray                    # final coupled-layout iterate
    trace: list[IterationRecord]
    wall_time: float


# ---------------------------------------------------------------------------
# NLP spec assembly
# ---------------------------------------------------------------------------

def opf_spec(problem: OpfProblem, linear: np.ndarray | None = None,
             rho: float = 0.0, sigma: np.ndarray | None = None,
             y: np.ndarray | None = None) -> NlpSpec:
    """NlpSpec for one OPF, optionally with the augmented-Lagrangian terms
    lambda^T A x (as a linear cost) and (rho/2)||x - y||^2_Sigma."""
    weight = None
    if rho and y is not None:
        weight = rho * (sigma if sigma is not None else np.ones(problem.n_var))

    def objective(x):
        value, grad = opfcore.eval_objective(problem, x)
        if linear is not None:
            value += float(linear @ x)
            grad = grad + linear
        if weight is not None:
            d = x - y
            value += 0.5 * float(d @ (weight * d))
            grad = grad + weight * d
        return value, grad

    def constraints(x):
        return opfcore.eval_power_flow(problem, x)

    def lagrangian_hessian(x, row_mult):
        mult = KktMultipliers(eq=row_mult, lower=np.zeros(problem.n_var),
                              upper=np.zeros(problem.n_var))
        H = opfcore.eval_lagrangian_hessian(problem, x, mult)
        if weight is not None:
            H = H + sp.diags(weight)
        return H

    return NlpSpec(n=problem.n_var, objective=objective, constraints=constraints,
                   lagrangian_hessian=lagrangian_hessian, lb=problem.lb, ub=problem.ub,
                   is_eq=np.ones(2 * problem.n_buses, dtype=bool))


def solve_centralized(problem: OpfProblem, tol: float = 1e-8,
                      x0: np.ndarray | None = None) -> NlpResult:
    """Shared centralized oracle: plain interior-point solve of one OPF."""
    if x0 is None:
        x0 = opfcore.flat_start(problem)
    return nlp.solve_nlp(opf_spec(problem), x0, tol)
