"""Centralized AC optimal power flow assembly and derivative evaluators.

The decision vector packs, bus by bus, the voltage angle and magnitude
followed by one active/reactive injection pair per generator at that bus.
Generation cost is evaluated on the MW scale (per-unit power times the
system base) to match MATPOWER cost coefficients.  The reference bus is
kept in the layout with pinched bounds (angle 0, magnitude at the slack
generator's set-point) rather than eliminated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from opfbench import netmodel
from opfbench.netmodel import AdmittanceMatrix, Network

EvalPoint = np.ndarray


@dataclass
class KktMultipliers:
    """Multipliers for the power-flow equalities and the bounds/inequalities.

    ``eq`` has one entry per power-flow equation (all active rows, then all
    reactive rows).  ``lower``/``upper`` are per-variable bound multipliers,
    nonnegative; ``ineq`` covers general inequality rows when present.
    """

    eq: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    ineq: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class OpfProblem:
    """Variable layout, bounds and evaluator context over a network slice."""

    net: Network
    ybus: AdmittanceMatrix
    n_var: int
    theta_idx: np.ndarray        # layout position of each bus angle
    vm_idx: np.ndarray           # layout position of each bus magnitude
    p_idx: np.ndarray            # layout position of each generator p
    q_idx: np.ndarray            # layout position of each generator q
    gen_bus: np.ndarray          # internal bus index of each generator
    lb: np.ndarray
    ub: np.ndarray
    slack: int | None            # internal bus index of the reference bus
    slack_v: float | None

    @property
    def n_buses(self) -> int:
        return self.net.n_buses

    @property
    def n_gens(self) -> int:
        return len(self.net.generators)

    def bus_variable_indices(self, bus: int) -> np.ndarray:
        """All layout positions belonging to one bus (angle, magnitude, injections)."""
        own = [self.theta_idx[bus], self.vm_idx[bus]]
        for g in np.flatnonzero(self.gen_bus == bus):
            own += [self.p_idx[g], self.q_idx[g]]
        return np.asarray(own, dtype=int)

    def split_point(self, x: EvalPoint) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return x[self.theta_idx], x[self.vm_idx], x[self.p_idx], x[self.q_idx]


def _induced_subnetwork(net: Network, bus_subset) -> Network:
    keep = {net.buses[i].id for i in sorted(bus_subset)}
    buses = [bus for bus in net.buses if bus.id in keep]
    gens = [g for g in net.generators if g.bus_id in keep]
    branches = [br for br in net.branches if br.from_bus in keep and br.to_bus in keep]
    return Network(base_mva=net.base_mva, buses=buses, generators=gens,
                   branches=branches, name=net.name)


def build_opf(net: Network, bus_subset=None, ybus: AdmittanceMatrix | None = None) -> OpfProblem:
    """Assemble the OPF over the full network or a connected bus subset.

    Raises ValueError("disconnected ...") when the subset does not induce a
    connected subgraph.
    """
    if bus_subset is not None:
        net = _induced_subnetwork(net, bus_subset)
        ybus = None
        if net.n_buses and len(netmodel._connected_components(net)) > 1:
            raise ValueError("disconnected bus subset")
    if ybus is None:
        ybus = netmodel.build_ybus(net)

    nb = net.n_buses
    gens_of_bus: list[list[int]] = [[] for _ in range(nb)]
    for g, gen in enumerate(net.generators):
        gens_of_bus[net.bus_index[gen.bus_id]].append(g)

    theta_idx = np.zeros(nb, dtype=int)
    vm_idx = np.zeros(nb, dtype=int)
    ng = len(net.generators)
    p_idx = np.zeros(ng, dtype=int)
    q_idx = np.zeros(ng, dtype=int)
    gen_bus = np.zeros(ng, dtype=int)
    pos = 0
    for i in range(nb):
        theta_idx[i] = pos
        vm_idx[i] = pos + 1
        pos += 2
        for g in gens_of_bus[i]:
            p_idx[g] = pos
            q_idx[g] = pos + 1
            gen_bus[g] = i
            pos += 2
    n_var = pos

    lb = np.full(n_var, -np.inf)
    ub = np.full(n_var, np.inf)
    for i, bus in enumerate(net.buses):
        lb[vm_idx[i]] = bus.v_min
        ub[vm_idx[i]] = bus.v_max
    for g, gen in enumerate(net.generators):
        lb[p_idx[g]] = gen.p_min
        ub[p_idx[g]] = gen.p_max
        lb[q_idx[g]] = gen.q_min
        ub[q_idx[g]] = gen.q_max

    slack = net.slack_index()
    slack_v = None
    if slack is not None:
        lb[theta_idx[slack]] = ub[theta_idx[slack]] = 0.0
        slack_gens = gens_of_bus[slack]
        slack_v = net.generators[slack_gens[0]].v_setpoint if slack_gens else 1.0
        lb[vm_idx[slack]] = ub[vm_idx[slack]] = slack_v

    return OpfProblem(net=net, ybus=ybus, n_var=n_var, theta_idx=theta_idx,
                      vm_idx=vm_idx, p_idx=p_idx, q_idx=q_idx, gen_bus=gen_bus,
                      lb=lb, ub=ub, slack=slack, slack_v=slack_v)


def flat_start(problem: OpfProblem) -> EvalPoint:
    """Flat initial point: v = 1 (slack at set-point), angles 0, injections
    at bound midpoints (0 where a bound is infinite), clipped into the box."""
    x = np.zeros(problem.n_var)
    x[problem.vm_idx] = 1.0
    if problem.slack is not None:
        x[problem.vm_idx[problem.slack]] = problem.slack_v
    for idx in np.concatenate([problem.p_idx, problem.q_idx]):
        lo, hi = problem.lb[idx], problem.ub[idx]
        if np.isfinite(lo) and np.isfinite(hi):
            x[idx] = 0.5 * (lo + hi)
        else:
            x[idx] = float(np.clip(0.0, lo, hi))
    return np.clip(x, problem.lb, problem.ub)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def eval_objective(problem: OpfProblem, x: EvalPoint) -> tuple[float, np.ndarray]:
    """Total generation cost and its gradient; cost acts on MW-scale power."""
    base = problem.net.base_mva
    grad = np.zeros(problem.n_var)
    value = 0.0
    for g, gen in enumerate(problem.net.generators):
        p_mw = x[problem.p_idx[g]] * base
        value += gen.cost_a * p_mw * p_mw + gen.cost_b * p_mw + gen.cost_c
        grad[problem.p_idx[g]] = (2.0 * gen.cost_a * p_mw + gen.cost_b) * base
    return value, grad


def objective_hessian(problem: OpfProblem) -> sp.csr_matrix:
    base = problem.net.base_mva
    diag = np.zeros(problem.n_var)
    for g, gen in enumerate(problem.net.generators):
        diag[problem.p_idx[g]] = 2.0 * gen.cost_a * base * base
    return sp.diags(diag, format="csr")


# ---------------------------------------------------------------------------
# power flow residual, Jacobian, Hessian
# ---------------------------------------------------------------------------

def _complex_voltage(problem: OpfProblem, x: EvalPoint) -> np.ndarray:
    theta, vm, _, _ = problem.split_point(x)
    return vm * np.exp(1j * theta)


def _injections(problem: OpfProblem, x: EvalPoint) -> tuple[np.ndarray, np.ndarray]:
    nb = problem.n_buses
    p = np.bincount(problem.gen_bus, weights=x[problem.p_idx], minlength=nb)
    q = np.bincount(problem.gen_bus, weights=x[problem.q_idx], minlength=nb)
    return p, q


def eval_power_flow(problem: OpfProblem, x: EvalPoint) -> tuple[np.ndarray, sp.csr_matrix]:
    """Power-flow mismatch and its Jacobian.

    Rows are all active balances then all reactive balances; the mismatch at
    bus i is the computed net flow into the network minus injection plus
    demand, so a feasible operating point gives a zero vector.
    """
    net = problem.net
    nb = problem.n_buses
    Y = problem.ybus.matrix
    V = _complex_voltage(problem, x)
    Ibus = Y @ V
    S = V * np.conj(Ibus)
    p_inj, q_inj = _injections(problem, x)
    p_d = np.array([bus.p_demand for bus in net.buses])
    q_d = np.array([bus.q_demand for bus in net.buses])
    residual = np.concatenate([S.real - p_inj + p_d, S.imag - q_inj + q_d])

    # dS/dtheta and dS/dvm in complex form (standard polar identities)
    diagV = sp.diags(V)
    diagI = sp.diags(Ibus)
    diagVnorm = sp.diags(np.exp(1j * x[problem.theta_idx]))
    dS_dth = 1j * diagV @ np.conj(diagI - Y @ diagV)
    dS_dvm = diagV @ np.conj(Y @ diagVnorm) + sp.diags(np.conj(Ibus)) @ diagVnorm

    rows, cols, vals = [], [], []

    def scatter(block: sp.spmatrix, row_off: int, col_map: np.ndarray, take):
        coo = block.tocoo()
        rows.extend(coo.row + row_off)
        cols.extend(col_map[coo.col])
        vals.extend(take(coo.data))

    scatter(dS_dth.tocsr(), 0, problem.theta_idx, np.real)
    scatter(dS_dvm.tocsr(), 0, problem.vm_idx, np.real)
    scatter(dS_dth.tocsr(), nb, problem.theta_idx, np.imag)
    scatter(dS_dvm.tocsr(), nb, problem.vm_idx, np.imag)
    for g in range(problem.n_gens):
        rows.append(problem.gen_bus[g])
        cols.append(problem.p_idx[g])
        vals.append(-1.0)
        rows.append(nb + problem.gen_bus[g])
        cols.append(problem.q_idx[g])
        vals.append(-1.0)
    jac = sp.csr_matrix((vals, (rows, cols)), shape=(2 * nb, problem.n_var))
    return residual, jac


def eval_lagrangian_hessian(problem: OpfProblem, x: EvalPoint,
                            mult: KktMultipliers) -> sp.csr_matrix:
    """Hessian of objective plus multiplier-weighted power-flow residuals.

    Bound rows are linear and contribute nothing.  The result is symmetrized
    exactly (average with its transpose) so downstream factorizations can
    rely on it.
    """
    nb = problem.n_buses
    Y = problem.ybus.matrix
    V = _complex_voltage(problem, x)
    Ibus = Y @ V
    lam = mult.eq[:nb] - 1j * mult.eq[nb:2 * nb]

    # Hessian blocks of Re[lam^T S(V)] in polar coordinates.
    diagV = sp.diags(V)
    A = sp.diags(lam * V)
    B = Y @ diagV
    C = A @ B.conj()
    D = Y.conj().T @ diagV
    E = diagV.conj() @ (D @ sp.diags(lam) - sp.diags(D @ lam))
    F = C - A @ sp.diags(np.conj(Ibus))
    G = sp.diags(1.0 / np.abs(V))
    Gaa = E + F
    Gva = 1j * G @ (E - F)
    Gav = Gva.T
    Gvv = G @ (C + C.T) @ G

    rows, cols, vals = [], [], []

    def scatter(block, row_map, col_map):
        coo = sp.coo_matrix(block)
        rows.extend(row_map[coo.row])
        cols.extend(col_map[coo.col])
        vals.extend(np.real(coo.data))

    scatter(Gaa, problem.theta_idx, problem.theta_idx)
    scatter(Gav, problem.theta_idx, problem.vm_idx)
    scatter(Gva, problem.vm_idx, problem.theta_idx)
    scatter(Gvv, problem.vm_idx, problem.vm_idx)
    H = sp.csr_matrix((vals, (rows, cols)), shape=(problem.n_var, problem.n_var))
    H = H + objective_hessian(problem)
    return ((H + H.T) * 0.5).tocsr()
