"""Interior-point solver for smooth bound/equality/inequality constrained NLPs.

Primal-dual log-barrier method: inequality rows receive slack variables,
fixed variables (equal bounds) become linear equality rows, the barrier
parameter shrinks geometrically from 1.0 by a factor 0.2, steps obey a
0.995 fraction-to-boundary rule, and the symmetric KKT systems are solved
by a dense LDL factorization with inertia correction (a tau*I shift on the
Hessian block escalated tenfold from 1e-8 until the inertia is right).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from opfbench.opfcore import KktMultipliers

OPTIMAL = "optimal"
MAX_ITER = "max-iter"
INFEASIBLE = "infeasible-detected"

_FRACTION_TO_BOUNDARY = 0.995
_BARRIER_SHRINK = 0.2
_MAX_ITERATIONS = 200
_FIXED_TOL = 1e-12


@dataclass
class NlpSpec:
    """Evaluator bundle for one NLP.

    ``objective(x) -> (value, gradient)``;
    ``constraints(x) -> (residual, jacobian)`` over all rows, equality rows
    flagged by ``is_eq`` (inequality rows mean residual <= 0);
    ``lagrangian_hessian(x, row_multipliers) -> matrix`` is the Hessian of
    objective plus multiplier-weighted constraint rows.  All evaluators must
    be pure.
    """

    n: int
    objective: Callable[[np.ndarray], tuple[float, np.ndarray]]
    lagrangian_hessian: Callable[[np.ndarray, np.ndarray], sp.spmatrix]
    lb: np.ndarray
    ub: np.ndarray
    constraints: Callable[[np.ndarray], tuple[np.ndarray, sp.spmatrix]] | None = None
    is_eq: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def n_rows(self) -> int:
        return len(self.is_eq)


@dataclass
class NlpResult:
    x: np.ndarray
    multipliers: KktMultipliers
    status: str
    kkt_residual: float
    iterations: int
    objective: float


def kkt_errors(spec: NlpSpec, x: np.ndarray, mult: KktMultipliers) -> float:
    """Infinity-norm KKT error (stationarity, feasibility, complementarity)
    recomputed from the evaluators alone."""
    _, grad = spec.objective(x)
    stat = grad - mult.lower + mult.upper
    feas = 0.0
    compl = 0.0
    if spec.n_rows:
        c, jac = spec.constraints(x)
        jac = sp.csr_matrix(jac)
        row_mult = np.zeros(spec.n_rows)
        row_mult[spec.is_eq] = mult.eq
        row_mult[~spec.is_eq] = mult.ineq
        stat = stat + jac.T @ row_mult
        feas = max(feas, float(np.max(np.abs(c[spec.is_eq]), initial=0.0)))
        ineq = ~spec.is_eq
        if ineq.any():
            feas = max(feas, float(np.max(c[ineq], initial=0.0)))
            compl = max(compl, float(np.max(np.abs(mult.ineq * c[ineq]), initial=0.0)))
    lo_gap = np.where(np.isfinite(spec.lb), x - spec.lb, np.inf)
    up_gap = np.where(np.isfinite(spec.ub), spec.ub - x, np.inf)
    feas = max(feas, float(np.max(-lo_gap, initial=0.0)), float(np.max(-up_gap, initial=0.0)))
    finite_lo = np.isfinite(spec.lb)
    finite_up = np.isfinite(spec.ub)
    if finite_lo.any():
        compl = max(compl, float(np.max(np.abs(mult.lower[finite_lo] * lo_gap[finite_lo]),
                                        initial=0.0)))
    if finite_up.any():
        compl = max(compl, float(np.max(np.abs(mult.upper[finite_up] * up_gap[finite_up]),
                                        initial=0.0)))
    return max(float(np.max(np.abs(stat))), feas, compl)


# ---------------------------------------------------------------------------
# dense symmetric indefinite factorization with inertia
# ---------------------------------------------------------------------------

class _LdlFactor:
    """LDL^T factorization of a dense symmetric matrix exposing its inertia."""

    def __init__(self, K: np.ndarray):
        lu, d, perm = scipy.linalg.ldl(K, lower=True)
        self._L = lu[perm]
        self._perm = perm
        self._d = d
        scale = max(np.abs(K).max(), 1.0)
        pos = neg = zero = 0
        i, n = 0, K.shape[0]
        while i < n:
            if i + 1 < n and d[i + 1, i] != 0.0:
                a, b, c = d[i, i], d[i + 1, i], d[i + 1, i + 1]
                det = a * c - b * b
                if det < 0.0:
                    pos += 1
                    neg += 1
                elif det > 0.0:
                    if a + c > 0:
                        pos += 2
                    else:
                        neg += 2
                else:
                    zero += 2
                i += 2
            else:
                v = d[i, i]
                if v > 1e-14 * scale:
                    pos += 1
                elif v < -1e-14 * scale:
                    neg += 1
                else:
                    zero += 1
                i += 1
        self.inertia = (pos, neg, zero)

    def solve(self, b: np.ndarray) -> np.ndarray:
        t = scipy.linalg.solve_triangular(self._L, b[self._perm], lower=True,
                                          unit_diagonal=True)
        s = self._block_diag_solve(t)
        y = scipy.linalg.solve_triangular(self._L.T, s, lower=False,
                                          unit_diagonal=True)
        out = np.empty_like(y)
        out[self._perm] = y
        return out

    def _block_diag_solve(self, t: np.ndarray) -> np.ndarray:
        d = self._d
        s = np.empty_like(t)
        i, n = 0, len(t)
        while i < n:
            if i + 1 < n and d[i + 1, i] != 0.0:
                a, b, c = d[i, i], d[i + 1, i], d[i + 1, i + 1]
                det = a * c - b * b
                s[i] = (c * t[i] - b * t[i + 1]) / det
                s[i + 1] = (a * t[i + 1] - b * t[i]) / det
                i += 2
            else:
                s[i] = t[i] / d[i, i]
                i += 1
        return s


def solve_kkt_with_inertia(H: np.ndarray, J: np.ndarray, rhs: np.ndarray,
                           tau0: float = 1e-8, escalate: float = 10.0,
                           dual_reg: float = 0.0,
                           max_tries: int = 24) -> tuple[np.ndarray, float]:
    """Solve [[H + tau*I, J^T], [J, -dual_reg*I]] sys = rhs with the inertia
    of an optimization saddle point (n positive, m negative eigenvalues).

    Returns (solution, tau_used).  Raises RuntimeError when no shift in the
    escalation range produces the required inertia.
    """
    n = H.shape[0]
    m = J.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = H
    K[n:, :n] = J
    K[:n, n:] = J.T
    if dual_reg:
        K[n:, n:] = -dual_reg * np.eye(m)
    tau = 0.0
    for _ in range(max_tries):
        Kt = K.copy()
        if tau:
            Kt[:n, :n] += tau * np.eye(n)
        try:
            factor = _LdlFactor(Kt)
        except np.linalg.LinAlgError:
            factor = None
        if factor is not None and factor.inertia == (n, m, 0):
            sol = factor.solve(rhs)
            if np.all(np.isfinite(sol)):
                return sol, tau
        if factor is not None and factor.inertia[2] > 0 and dual_reg == 0.0:
            # Singular block, usually a rank-deficient Jacobian: add a tiny
            # dual shift and keep escalating.
            dual_reg = 1e-10
            K[n:, n:] = -dual_reg * np.eye(m)
        tau = tau0 if tau == 0.0 else tau * escalate
    raise RuntimeError("KKT system remained singular or of wrong inertia "
                       f"after regularization limit (tau={tau:.1e})")


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

def solve_nlp(spec: NlpSpec, x0: np.ndarray, tol: float = 1e-8,
              mult0: np.ndarray | None = None) -> NlpResult:
    """Solve to local KKT optimality.

    ``x0`` need not be feasible.  ``mult0`` optionally warm-starts the
    bound multipliers (defaults to ones).  Returns status ``max-iter`` with
    the best iterate after 200 Newton steps.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (spec.n,) or not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be a finite vector matching the spec dimension")
    f0, g0 = spec.objective(x0)
    if not np.isfinite(f0) or not np.all(np.isfinite(g0)):
        raise ValueError("objective returns non-finite values at x0")
    if spec.n_rows:
        c0, _ = spec.constraints(x0)
        if not np.all(np.isfinite(c0)):
            raise ValueError("constraints return non-finite values at x0")

    work = _Work(spec, x0, mult0)
    status = MAX_ITER
    mu = 1.0
    iterations = 0
    stall = 0
    while iterations < _MAX_ITERATIONS:
        err0 = work.kkt_error(0.0)
        if err0 <= tol:
            status = OPTIMAL
            break
        if work.kkt_error(mu) <= max(10.0 * mu, tol / 10.0):
            mu = max(mu * _BARRIER_SHRINK, min(tol / 10.0, 1e-9))
            continue
        progressed = work.newton_step(mu)
        iterations += 1
        stall = 0 if progressed else stall + 1
        if stall >= 12:
            status = INFEASIBLE if work.primal_infeasibility() > 1e3 * tol else MAX_ITER
            break

    x, mult = work.result_multipliers()
    resid = kkt_errors(spec, x, mult)
    if status == OPTIMAL and resid > tol:
        status = MAX_ITER
    value, _ = spec.objective(x)
    return NlpResult(x=x, multipliers=mult, status=status,
                     kkt_residual=resid, iterations=iterations, objective=value)


class _Work:
    """Mutable solver state on the slack-extended problem."""

    def __init__(self, spec: NlpSpec, x0: np.ndarray, mult0: np.ndarray | None):
        self.spec = spec
        n = spec.n
        self.ineq_rows = ~spec.is_eq
        n_slack = int(self.ineq_rows.sum())
        self.nx = n + n_slack

        lb = np.concatenate([spec.lb, np.zeros(n_slack)])
        ub = np.concatenate([spec.ub, np.full(n_slack, np.inf)])
        self.fixed = np.isfinite(lb) & np.isfinite(ub) & (ub - lb <= _FIXED_TOL)
        self.fixed_val = np.zeros(self.nx)
        self.fixed_val[self.fixed] = 0.5 * (lb[self.fixed] + ub[self.fixed])
        self.lb = np.where(self.fixed, -np.inf, lb)
        self.ub = np.where(self.fixed, np.inf, ub)
        self.has_lb = np.isfinite(self.lb)
        self.has_ub = np.isfinite(self.ub)

        x = np.empty(self.nx)
        x[:n] = x0
        if n_slack:
            c0, _ = spec.constraints(x0)
            x[n:] = np.maximum(-c0[self.ineq_rows], 1e-2)
        x[self.fixed] = self.fixed_val[self.fixed]
        span = np.where(np.isfinite(self.ub - self.lb), self.ub - self.lb, np.inf)
        margin = np.minimum(1e-2 * span, 1e-2 * (1.0 + np.abs(x)))
        x = np.where(self.has_lb, np.maximum(x, self.lb + margin), x)
        x = np.where(self.has_ub, np.minimum(x, self.ub - margin), x)
        self.x = x

        self.m = spec.n_rows + int(self.fixed.sum())
        self.nu = np.zeros(self.m)
        z0 = np.ones(self.nx)
        if mult0 is not None:
            z0[:n] = np.maximum(np.asarray(mult0, dtype=float), 1e-8)
        self.z_lo = np.where(self.has_lb, z0, 0.0)
        self.z_up = np.where(self.has_ub, z0, 0.0)
        self.penalty = 1.0
        self._evaluate()

    # -- evaluation ---------------------------------------------------------

    def _evaluate(self):
        spec = self.spec
        n = spec.n
        self.f, grad = spec.objective(self.x[:n])
        self.grad = np.concatenate([grad, np.zeros(self.nx - n)])
        rows, jacs = [], []
        if spec.n_rows:
            c, J = spec.constraints(self.x[:n])
            J = sp.csr_matrix(J)
            slack_block = sp.csr_matrix(
                (np.ones(int(self.ineq_rows.sum())),
                 (np.flatnonzero(self.ineq_rows), np.arange(int(self.ineq_rows.sum())))),
                shape=(spec.n_rows, self.nx - n))
            c = c.copy()
            c[self.ineq_rows] += self.x[n:]
            rows.append(c)
            jacs.append(sp.hstack([J, slack_block], format="csr"))
        if self.fixed.any():
            idx = np.flatnonzero(self.fixed)
            rows.append(self.x[idx] - self.fixed_val[idx])
            jacs.append(sp.csr_matrix((np.ones(len(idx)), (np.arange(len(idx)), idx)),
                                      shape=(len(idx), self.nx)))
        self.c = np.concatenate(rows) if rows else np.zeros(0)
        self.J = sp.vstack(jacs, format="csr") if jacs else sp.csr_matrix((0, self.nx))

    def _constraint_value(self, x: np.ndarray) -> np.ndarray:
        spec = self.spec
        n = spec.n
        parts = []
        if spec.n_rows:
            c, _ = spec.constraints(x[:n])
            c = c.copy()
            c[self.ineq_rows] += x[n:]
            parts.append(c)
        if self.fixed.any():
            idx = np.flatnonzero(self.fixed)
            parts.append(x[idx] - self.fixed_val[idx])
        return np.concatenate(parts) if parts else np.zeros(0)

    def _hessian(self) -> np.ndarray:
        spec = self.spec
        n = spec.n
        row_mult = self.nu[:spec.n_rows]
        H = sp.csr_matrix(spec.lagrangian_hessian(self.x[:n], row_mult))
        W = np.zeros((self.nx, self.nx))
        W[:n, :n] = H.toarray()
        return W

    # -- diagnostics --------------------------------------------------------

    def primal_infeasibility(self) -> float:
        return float(np.max(np.abs(self.c), initial=0.0))

    def kkt_error(self, mu: float) -> float:
        r_d = self.grad + self.J.T @ self.nu - self.z_lo + self.z_up
        err = float(np.max(np.abs(r_d)))
        err = max(err, self.primal_infeasibility())
        gap_lo = (self.x - self.lb)[self.has_lb]
        gap_up = (self.ub - self.x)[self.has_ub]
        if gap_lo.size:
            err = max(err, float(np.max(np.abs(gap_lo * self.z_lo[self.has_lb] - mu))))
        if gap_up.size:
            err = max(err, float(np.max(np.abs(gap_up * self.z_up[self.has_ub] - mu))))
        scale = max(1.0, (np.sum(np.abs(self.nu)) + np.sum(self.z_lo) + np.sum(self.z_up))
                    / max(1, self.m + self.nx) / 100.0)
        return err / scale

    # -- Newton step --------------------------------------------------------

    def newton_step(self, mu: float) -> bool:
        gap_lo = np.where(self.has_lb, self.x - self.lb, 1.0)
        gap_up = np.where(self.has_ub, self.ub - self.x, 1.0)
        sigma = (np.where(self.has_lb, self.z_lo / gap_lo, 0.0)
                 + np.where(self.has_ub, self.z_up / gap_up, 0.0))
        barrier_grad = (self.grad
                        - np.where(self.has_lb, mu / gap_lo, 0.0)
                        + np.where(self.has_ub, mu / gap_up, 0.0))

        W = self._hessian()
        W[np.diag_indices_from(W)] += sigma
        rhs = np.concatenate([-(barrier_grad + self.J.T @ self.nu), -self.c])
        sol, _ = solve_kkt_with_inertia(W, self.J.toarray(), rhs)
        dx = sol[:self.nx]
        dnu = sol[self.nx:]

        dz_lo = np.where(self.has_lb, (mu - gap_lo * self.z_lo - self.z_lo * dx) / gap_lo, 0.0)
        dz_up = np.where(self.has_ub, (mu - gap_up * self.z_up + self.z_up * dx) / gap_up, 0.0)

        alpha_p = self._fraction_to_boundary(self.x, dx)
        alpha_d = min(self._positivity_step(self.z_lo, dz_lo, self.has_lb),
                      self._positivity_step(self.z_up, dz_up, self.has_ub))

        self.penalty = max(self.penalty, 2.0 * float(np.max(np.abs(self.nu + dnu), initial=0.0)))
        merit0 = self._merit(self.x, mu)
        slope = float(barrier_grad @ dx) - self.penalty * float(np.sum(np.abs(self.c)))
        alpha = alpha_p
        accepted = False
        for _ in range(25):
            trial = self.x + alpha * dx
            m_trial = self._merit(trial, mu)
            if np.isfinite(m_trial) and m_trial <= merit0 + 1e-4 * alpha * min(slope, 0.0):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            alpha = min(alpha_p, 1e-8)

        self.x = self.x + alpha * dx
        self.nu = self.nu + alpha * dnu
        self.z_lo = np.maximum(self.z_lo + alpha_d * dz_lo, 0.0)
        self.z_up = np.maximum(self.z_up + alpha_d * dz_up, 0.0)
        # keep multipliers compatible with the barrier (IPOPT's k-sigma box)
        k_sig = 1e10
        gl = np.where(self.has_lb, self.x - self.lb, 1.0)
        gu = np.where(self.has_ub, self.ub - self.x, 1.0)
        self.z_lo = np.where(self.has_lb,
                             np.clip(self.z_lo, mu / (k_sig * gl), k_sig * mu / gl), 0.0)
        self.z_up = np.where(self.has_ub,
                             np.clip(self.z_up, mu / (k_sig * gu), k_sig * mu / gu), 0.0)
        self._evaluate()
        return accepted and alpha > 1e-10

    def _fraction_to_boundary(self, x: np.ndarray, dx: np.ndarray) -> float:
        alpha = 1.0
        lo_mask = self.has_lb & (dx < 0)
        if lo_mask.any():
            alpha = min(alpha, _FRACTION_TO_BOUNDARY *
                        float(np.min((x - self.lb)[lo_mask] / -dx[lo_mask])))
        up_mask = self.has_ub & (dx > 0)
        if up_mask.any():
            alpha = min(alpha, _FRACTION_TO_BOUNDARY *
                        float(np.min((self.ub - x)[up_mask] / dx[up_mask])))
        return max(alpha, 0.0)

    @staticmethod
    def _positivity_step(z: np.ndarray, dz: np.ndarray, mask: np.ndarray) -> float:
        shrink = mask & (dz < 0)
        if not shrink.any():
            return 1.0
        return min(1.0, _FRACTION_TO_BOUNDARY * float(np.min(z[shrink] / -dz[shrink])))

    def _merit(self, x: np.ndarray, mu: float) -> float:
        n = self.spec.n
        f, _ = self.spec.objective(x[:n])
        gap_lo = (x - self.lb)[self.has_lb]
        gap_up = (self.ub - x)[self.has_ub]
        if np.any(gap_lo <= 0) or np.any(gap_up <= 0):
            return np.inf
        barrier = -mu * (np.sum(np.log(gap_lo)) + np.sum(np.log(gap_up)))
        c = self._constraint_value(x)
        return f + barrier + self.penalty * float(np.sum(np.abs(c)))

    # -- reporting ----------------------------------------------------------

    def result_multipliers(self) -> tuple[np.ndarray, KktMultipliers]:
        spec = self.spec
        n = spec.n
        x = self.x[:n].copy()
        z_lo = self.z_lo[:n].copy()
        z_up = self.z_up[:n].copy()
        # fold fixed-variable row multipliers back into bound multipliers
        fixed_rows = np.flatnonzero(self.fixed)
        for r, var in enumerate(fixed_rows):
            if var < n:
                nu_fix = self.nu[spec.n_rows + r]
                z_up[var] += max(nu_fix, 0.0)
                z_lo[var] += max(-nu_fix, 0.0)
                x[var] = self.fixed_val[var]
        eq = self.nu[:spec.n_rows][spec.is_eq] if spec.n_rows else np.zeros(0)
        ineq = self.nu[:spec.n_rows][self.ineq_rows] if spec.n_rows else np.zeros(0)
        mult = KktMultipliers(eq=eq, lower=z_lo, upper=z_up,
                              ineq=np.maximum(ineq, 0.0))
        return x, mult
