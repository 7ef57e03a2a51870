"""Direct optimal control via FESD: multiple-shooting transcription.

The continuous problem

    min  int_0^T L_int(x, u) dt + L_end(x(T))
    s.t. xdot in Filippov convexification,  G_ineq(x, u) >= 0,
         G_end(x(T)) >= 0,  box bounds on u and the boundary states

is transcribed into a mathematical program with complementarity constraints
(MPCC): the horizon is split into N_ctrl intervals with one constant control
each, every interval carries a full FESD discretization (adaptive step sizes,
cross complementarity, step equilibration), and the interval boundary states
are chained by continuity equalities.  The integral cost is quadratured with
the tableau's b-weights on the stage states, scaled by the element step
sizes.  The MPCC is solved by the sigma-homotopy of :mod:`fesd.solver` in
relaxation mode.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .dcs_stewart import algebraic_point
from .fesd_core import (_element_cross_pairs, boundary_lp_extension,
                        step_equilibration)
from .pss_model import PssModel
from .rk_core import (ButcherTableau, DcsSymbolics, StandardSystem,
                      _element_rows, _Layout, make_tableau)
from .sim import integrate
from .solver import (HomotopyOptions, NlpProblem, SolveReport,
                     homotopy_newton_solve, homotopy_solve, ip_solve_nlp)
from .symbolics import Expr, ResidualSystem, as_expr, esum, substitute

__all__ = ["OcpSpec", "OcpSolution", "OcpSwitch", "transcribe", "cold_start",
           "simulation_start", "polish_ocp", "solve_ocp",
           "evaluate_objective_curve"]


@dataclass
class OcpSpec:
    """Optimal control problem over a piecewise-smooth model.

    `L_int` and `L_end` are expressions in the model's state (and, for
    `L_int`, control) variables; `G_ineq` / `G_end` list expressions that
    must be nonnegative at every stage state / at the terminal state.  A
    `x0` of None leaves the initial state free (then `x0_guess` seeds the
    cold start and `x0_lb` / `x0_ub` optionally bound it).
    """

    model: PssModel
    T_ctrl: float
    N_ctrl: int
    N_FE: int
    tableau: Optional[ButcherTableau] = None
    L_int: Optional[Expr] = None
    L_end: Optional[Expr] = None
    G_ineq: Sequence[Expr] = ()
    G_end: Sequence[Expr] = ()
    u_lb: Optional[Sequence[float]] = None
    u_ub: Optional[Sequence[float]] = None
    x_lb: Optional[Sequence[float]] = None
    x_ub: Optional[Sequence[float]] = None
    x0: Optional[Sequence[float]] = None
    x0_guess: Optional[Sequence[float]] = None
    x0_lb: Optional[Sequence[float]] = None
    x0_ub: Optional[Sequence[float]] = None
    h_min: float = 0.0
    h_max: Optional[float] = None        # default 2 T / N_FE per interval
    step_mode: str = "tanh"              # "tanh" | "equality" | "off"
    discretization: str = "fesd"         # "fesd" | "standard"

    def __post_init__(self):
        if self.discretization not in ("fesd", "standard"):
            raise ValueError(f"unknown discretization "
                             f"{self.discretization!r}")
        if self.T_ctrl <= 0:
            raise ValueError("T_ctrl must be positive")
        if self.N_ctrl < 1 or self.N_FE < 1:
            raise ValueError("N_ctrl and N_FE must be >= 1")
        if self.tableau is None:
            self.tableau = make_tableau("radau-iia", 2)
        T = self.T_ctrl / self.N_ctrl
        h_max = 2.0 * T / self.N_FE if self.h_max is None else self.h_max
        if self.h_min > h_max:
            raise ValueError("infeasible step bounds: h_min > h_max")
        if self.step_mode not in ("tanh", "equality", "off"):
            raise ValueError(f"unknown step equilibration mode "
                             f"{self.step_mode!r}")
        if self.x0 is None and self.x0_guess is None:
            raise ValueError("free initial state needs an x0_guess")
        n_x, n_u = self.model.n_x, len(self.model.u_vars)
        for name in ("x0", "x0_guess", "x0_lb", "x0_ub", "x_lb", "x_ub"):
            val = getattr(self, name)
            if val is not None and len(np.ravel(val)) != n_x:
                raise ValueError(f"{name} must have length n_x = {n_x}")
        for name in ("u_lb", "u_ub"):
            val = getattr(self, name)
            if val is not None and len(np.ravel(val)) != n_u:
                raise ValueError(f"{name} must have length n_u = {n_u}")

    @property
    def T_interval(self) -> float:
        return self.T_ctrl / self.N_ctrl

    @property
    def h_max_effective(self) -> float:
        return (2.0 * self.T_interval / self.N_FE if self.h_max is None
                else self.h_max)


@dataclass
class OcpSwitch:
    """Active-set change at an element boundary of one control interval."""

    time: float
    interval: int
    boundary: int                         # element index after the change
    support_before: Tuple[frozenset, ...]
    support_after: Tuple[frozenset, ...]


@dataclass
class OcpSolution:
    controls: np.ndarray                  # N_ctrl x n_u
    states: np.ndarray                    # N_ctrl + 1 boundary states
    element_states: List[np.ndarray]      # per interval, (N_FE + 1) x n_x
    h: np.ndarray                         # N_ctrl x N_FE
    times: np.ndarray                     # element boundary times, flat
    objective: float
    report: SolveReport
    switches: List[OcpSwitch]
    supports: List[List[Tuple[frozenset, ...]]]
    w: np.ndarray                         # raw MPCC solution vector


class _Transcription:
    """Layout metadata attached to the transcribed NlpProblem."""

    def __init__(self, spec, sym, lay, objective_sys):
        self.spec = spec
        self.sym = sym
        self.layout = lay
        self.objective_sys = objective_sys


def _subs(sym: DcsSymbolics, expr, x_exprs, u_exprs=None):
    mapping = {v: e for v, e in zip(sym.x_vars, x_exprs)}
    for v, e in zip(sym.u_vars, u_exprs or []):
        mapping[v] = e
    return substitute([as_expr(expr)], mapping)[0]


def transcribe(spec: OcpSpec) -> NlpProblem:
    """Assemble the multiple-shooting FESD MPCC for `spec`.

    Variables per interval k: the control q_k, the interval start state s_k,
    boundary LP multipliers (lam0, mu0) at s_k, the FESD element unknowns,
    and the step sizes h_k.  Complementarity pairs (stage, boundary and
    cross products) are registered on the returned problem for the solver
    homotopy; step equilibration rows are registered as complementarity-type
    rows and relaxed along the same homotopy.

    With ``discretization="standard"`` the cross complementarities and step
    equilibration are dropped and the steps are pinned to the equidistant
    grid, leaving only the per-stage complementarities of a plain implicit
    RK discretization of the dynamic complementarity system.
    """
    sym = DcsSymbolics(spec.model)
    tab = spec.tableau
    n_s, n_x, n_u = tab.n_s, sym.n_x, len(sym.u_vars)
    N_FE, T = spec.N_FE, spec.T_interval
    boundary_triples = not tab.c_ns_is_one

    lay = _Layout()
    eq: List[Expr] = []
    ineq: List[Expr] = []
    step_rows: List[Expr] = []
    pairs: List[Tuple[Expr, Expr]] = []
    obj_terms: List[Expr] = []
    nonneg_tags: List[str] = []
    x_prev_end = None
    x_final = None

    for k in range(spec.N_ctrl):
        qk = lay.add(f"q{k}", n_u)
        s_k = lay.add(f"s{k}", n_x)
        if k == 0:
            if spec.x0 is not None:
                x0 = np.asarray(spec.x0, dtype=float).ravel()
                eq.extend(s_k[r] - float(x0[r]) for r in range(n_x))
        else:
            eq.extend(s_k[r] - x_prev_end[r] for r in range(n_x))

        # boundary LP multipliers at the interval start: unknowns tied to
        # s_k by stationarity; complementarity with the first element's
        # theta enters through the cross products below.  Without cross
        # complementarity these multipliers sit on an unbounded feasible
        # ray (lam0 + t e, mu0 - t), so standard mode omits them
        if spec.discretization == "fesd":
            lam0 = [lay.add(f"lam0_{k}_{kk}", sym.n_f[kk])
                    for kk in range(sym.n_sub)]
            mu0 = lay.add(f"mu0_{k}", sym.n_sub)
            nonneg_tags.extend(f"lam0_{k}_{kk}" for kk in range(sym.n_sub))
            g0 = sym.g_at(s_k)
            for kk in range(sym.n_sub):
                eq.extend(g0[kk][j] - lam0[kk][j] - mu0[kk]
                          for j in range(sym.n_f[kk]))
            left = [l for lk in lam0 for l in lk]
        else:
            left = []

        hk = lay.add(f"h{k}", N_FE)
        theta_stages, lam_values = [], []
        x_left = s_k
        for n in range(N_FE):
            V = [lay.add(f"V{k}_{n}_{i}", n_x) for i in range(n_s)]
            Th = [[lay.add(f"Th{k}_{n}_{i}_{kk}", sym.n_f[kk])
                   for i in range(n_s)] for kk in range(sym.n_sub)]
            La = [[lay.add(f"La{k}_{n}_{i}_{kk}", sym.n_f[kk])
                   for i in range(n_s)] for kk in range(sym.n_sub)]
            Mu = [lay.add(f"Mu{k}_{n}_{i}", sym.n_sub) for i in range(n_s)]
            x_next = lay.add(f"x{k}_{n + 1}", n_x)
            nonneg_tags.extend(f"Th{k}_{n}_{i}_{kk}" for i in range(n_s)
                               for kk in range(sym.n_sub))
            nonneg_tags.extend(f"La{k}_{n}_{i}_{kk}" for i in range(n_s)
                               for kk in range(sym.n_sub))
            er = _element_rows(sym, tab, x_left, V, Th, La, Mu,
                               hk[n], x_next, qk)
            eq.extend(er.dyn)
            eq.extend(er.lp_lin)
            eq.extend(er.step)
            pairs.extend(er.comp_pairs)
            for i, ss in enumerate(er.stage_states):
                for gexp in spec.G_ineq:
                    ineq.append(_subs(sym, gexp, ss, qk))
                if spec.L_int is not None:
                    obj_terms.append(
                        hk[n] * tab.b[i] * _subs(sym, spec.L_int, ss, qk))
            theta_stages.append([
                [t for kk in range(sym.n_sub) for t in Th[kk][i]]
                for i in range(n_s)])
            lams = [left] + [
                [l for kk in range(sym.n_sub) for l in La[kk][i]]
                for i in range(n_s)]
            if boundary_triples and n < N_FE - 1 \
                    and spec.discretization == "fesd":
                thb = [lay.add(f"Thb{k}_{n}_{kk}", sym.n_f[kk])
                       for kk in range(sym.n_sub)]
                lab = [lay.add(f"Lab{k}_{n}_{kk}", sym.n_f[kk])
                       for kk in range(sym.n_sub)]
                mub = lay.add(f"Mub{k}_{n}", sym.n_sub)
                for kk in range(sym.n_sub):
                    nonneg_tags.extend([f"Thb{k}_{n}_{kk}",
                                        f"Lab{k}_{n}_{kk}"])
                brow, bpairs = boundary_lp_extension(sym, tab, x_next,
                                                     thb, lab, mub, None)
                eq.extend(brow)
                pairs.extend(bpairs)
                flat_lab = [l for lk in lab for l in lk]
                lams.append(flat_lab)
                left = flat_lab
            else:
                left = lams[-1]
            lam_values.append(lams)
            x_left = x_next

        if spec.discretization == "fesd":
            pairs.extend(
                p for n in range(N_FE)
                for p in _element_cross_pairs(
                    theta_stages[n], lam_values[n],
                    skip_left=(n == 0 and boundary_triples)))
        if spec.discretization == "fesd" and spec.step_mode != "off":
            # complementarity-type rows: relaxed alongside the pair
            # products, else h would be pinned equidistant at every
            # sigma > 0 and switches could not leave the uniform grid
            step_rows.extend(step_equilibration(
                list(hk), theta_stages, lam_values, mode=spec.step_mode))
        if spec.discretization == "fesd":
            eq.append(esum(list(hk)) - T)
        x_prev_end = x_left
        x_final = x_left

    if spec.L_end is not None:
        obj_terms.append(_subs(sym, spec.L_end, x_final))
    for gexp in spec.G_end:
        ineq.append(_subs(sym, gexp, x_final))
    objective = esum(obj_terms) if obj_terms else as_expr(0.0)

    n = lay.n
    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    for tag in nonneg_tags:
        lb[lay.slices[tag]] = 0.0
    for k in range(spec.N_ctrl):
        if spec.discretization == "standard":
            # fixed equidistant grid: the steps are pinned, switch times
            # cannot be tracked and the integration order drops to one
            lb[lay.slices[f"h{k}"]] = T / N_FE
            ub[lay.slices[f"h{k}"]] = T / N_FE
        else:
            lb[lay.slices[f"h{k}"]] = spec.h_min
            ub[lay.slices[f"h{k}"]] = spec.h_max_effective
        if spec.u_lb is not None:
            lb[lay.slices[f"q{k}"]] = np.asarray(spec.u_lb, dtype=float)
        if spec.u_ub is not None:
            ub[lay.slices[f"q{k}"]] = np.asarray(spec.u_ub, dtype=float)
        state_tags = [f"s{k}"] + [f"x{k}_{n_ + 1}" for n_ in range(N_FE)]
        for tag in state_tags:
            if spec.x_lb is not None:
                lb[lay.slices[tag]] = np.asarray(spec.x_lb, dtype=float)
            if spec.x_ub is not None:
                ub[lay.slices[tag]] = np.asarray(spec.x_ub, dtype=float)
    if spec.x0 is None:
        if spec.x0_lb is not None:
            lb[lay.slices["s0"]] = np.asarray(spec.x0_lb, dtype=float)
        if spec.x0_ub is not None:
            ub[lay.slices["s0"]] = np.asarray(spec.x0_ub, dtype=float)

    # a zero-width box has no barrier interior; pin such variables by an
    # equality constraint instead
    pinned = np.isfinite(lb) & (lb == ub)
    for i in np.flatnonzero(pinned):
        eq.append(lay.names[i] - float(lb[i]))
    lb[pinned], ub[pinned] = -np.inf, np.inf

    nlp = NlpProblem(list(lay.names), (), objective, eq, ineq, pairs, lb, ub,
                     comp_rows=step_rows)
    nlp.info = _Transcription(
        spec, sym, lay, ResidualSystem(list(lay.names), (), [objective]))
    return nlp


def cold_start(nlp: NlpProblem) -> np.ndarray:
    """Cold start for the transcribed MPCC: states replicated from the
    initial value, controls zero, multipliers from the LP at the initial
    value (pushed slightly into the simplex interior), uniform steps."""
    info = nlp.info
    spec, sym, lay = info.spec, info.sym, info.layout
    tab, N_FE = spec.tableau, spec.N_FE
    x0 = np.asarray(spec.x0 if spec.x0 is not None else spec.x0_guess,
                    dtype=float).ravel()
    pt = algebraic_point(sym.dcs, x0)
    push = 1e-2
    theta0 = [(1.0 - push) * pt.theta[kk] + push / sym.n_f[kk]
              for kk in range(sym.n_sub)]
    lam0 = [lk + push for lk in pt.lam]
    v0 = sym.dcs.rhs(x0, theta0, np.zeros(len(sym.u_vars)))
    w = np.zeros(lay.n)
    sl = lay.slices
    for k in range(spec.N_ctrl):
        w[sl[f"s{k}"]] = x0
        if f"lam0_{k}_0" in sl:
            for kk in range(sym.n_sub):
                w[sl[f"lam0_{k}_{kk}"]] = lam0[kk]
            w[sl[f"mu0_{k}"]] = np.array(pt.mu)
        w[sl[f"h{k}"]] = spec.T_interval / N_FE
        for n in range(N_FE):
            for i in range(tab.n_s):
                w[sl[f"V{k}_{n}_{i}"]] = v0
                for kk in range(sym.n_sub):
                    w[sl[f"Th{k}_{n}_{i}_{kk}"]] = theta0[kk]
                    w[sl[f"La{k}_{n}_{i}_{kk}"]] = lam0[kk]
                w[sl[f"Mu{k}_{n}_{i}"]] = np.array(pt.mu)
            w[sl[f"x{k}_{n + 1}"]] = x0
            if f"Thb{k}_{n}_0" in sl:
                for kk in range(sym.n_sub):
                    w[sl[f"Thb{k}_{n}_{kk}"]] = theta0[kk]
                    w[sl[f"Lab{k}_{n}_{kk}"]] = lam0[kk]
                w[sl[f"Mub{k}_{n}"]] = np.array(pt.mu)
    return w


def simulation_start(nlp: NlpProblem, x0=None, u=None,
                     sigma: float = 1e-6) -> np.ndarray:
    """Warm start from a fixed-grid forward simulation.

    Starting from `x0` (default: the spec's initial state or guess) the
    dynamics are integrated on the equidistant element grid with the
    constant control `u` (default zero), and every transcription unknown is
    filled from the simulated stages.  Unlike `cold_start` this point is
    nearly feasible, so the solver descends into the local minimum nearest
    to the initialization instead of first wandering during the feasibility
    restoration.
    """
    info = nlp.info
    spec, sym, lay = info.spec, info.sym, info.layout
    tab, N_FE = spec.tableau, spec.N_FE
    x0 = np.asarray(
        spec.x0 if x0 is None and spec.x0 is not None
        else (spec.x0_guess if x0 is None else x0), dtype=float).ravel()
    u = np.zeros(len(sym.u_vars)) if u is None else np.asarray(
        u, dtype=float).ravel()
    std = StandardSystem(spec.model, N_FE, tab)
    h_unif = spec.T_interval / N_FE
    w = cold_start(nlp)
    sl = lay.slices
    x_cur = x0
    ws_opts = HomotopyOptions(sigma0=1.0, kappa=0.1,
                              sigma_end=max(sigma, 1e-10))
    for k in range(spec.N_ctrl):
        params = std.pack_params(sigma, x_cur, u, h_unif)
        zk, rep = homotopy_newton_solve(std.system, std.initial_guess(
            x_cur, u), params, ws_opts)
        w[sl[f"s{k}"]] = x_cur
        w[sl[f"q{k}"]] = u
        w[sl[f"h{k}"]] = h_unif
        if f"lam0_{k}_0" in sl:
            pt = algebraic_point(sym.dcs, x_cur)
            for kk in range(sym.n_sub):
                w[sl[f"lam0_{k}_{kk}"]] = pt.lam[kk] + 1e-2
            w[sl[f"mu0_{k}"]] = np.array(pt.mu)
        ssl = std.layout.slices
        for n in range(N_FE):
            for i in range(tab.n_s):
                w[sl[f"V{k}_{n}_{i}"]] = zk[ssl[f"V{n}_{i}"]]
                for kk in range(sym.n_sub):
                    w[sl[f"Th{k}_{n}_{i}_{kk}"]] = np.maximum(
                        zk[ssl[f"Th{n}_{i}_{kk}"]], 1e-8)
                    w[sl[f"La{k}_{n}_{i}_{kk}"]] = np.maximum(
                        zk[ssl[f"La{n}_{i}_{kk}"]], 1e-8)
                w[sl[f"Mu{k}_{n}_{i}"]] = zk[ssl[f"Mu{n}_{i}"]]
            w[sl[f"x{k}_{n + 1}"]] = zk[ssl[f"x{n + 1}"]]
            if f"Thb{k}_{n}_0" in sl:
                pt = algebraic_point(sym.dcs, zk[ssl[f"x{n + 1}"]])
                for kk in range(sym.n_sub):
                    w[sl[f"Thb{k}_{n}_{kk}"]] = np.maximum(
                        pt.theta[kk], 1e-8)
                    w[sl[f"Lab{k}_{n}_{kk}"]] = pt.lam[kk] + 1e-2
                w[sl[f"Mub{k}_{n}"]] = np.array(pt.mu)
        x_cur = std.x_end(zk)
    return w


def _interval_supports(nlp: NlpProblem, w, k) -> List[Tuple[frozenset, ...]]:
    info = nlp.info
    spec, sym, sl = info.spec, info.sym, info.layout.slices
    out = []
    for n in range(spec.N_FE):
        row = []
        for kk in range(sym.n_sub):
            th = np.array([w[sl[f"Th{k}_{n}_{i}_{kk}"]]
                           for i in range(spec.tableau.n_s)])
            la = np.array([w[sl[f"La{k}_{n}_{i}_{kk}"]]
                           for i in range(spec.tableau.n_s)])
            row.append(frozenset(
                int(j) for j in range(sym.n_f[kk])
                if th[:, j].max() > la[:, j].max()))
        out.append(tuple(row))
    return out


def polish_ocp(nlp: NlpProblem, w, tol: float = 1e-9,
               max_iter: int = 300):
    """Active-set polish of a (near-)converged MPCC iterate.

    The theta supports detected at `w` are frozen: inactive thetas and
    active-side lambdas are pinned to zero by equalities, step
    equilibration becomes the exact equality h_n = h_{n-1} across
    boundaries without a support change, and the resulting smooth NLP is
    solved warm-started from `w`.  Returns (w_polished, IpReport) or
    (w, None) when the structure does not support polishing (boundary LP
    triples of non-stiffly-accurate tableaus are not handled).
    """
    info = nlp.info
    spec, sym, lay = info.spec, info.sym, info.layout
    if not spec.tableau.c_ns_is_one:
        return w, None
    sl = lay.slices
    w = np.asarray(w, dtype=float)
    eq = list(nlp.eq)
    lb = nlp.lb.copy()
    ub = nlp.ub.copy()
    names = list(lay.names)

    def pin(tag, j):
        s = sl[tag]
        idx = s.start + j
        eq.append(names[idx])
        lb[idx], ub[idx] = -np.inf, np.inf

    for k in range(spec.N_ctrl):
        sup = _interval_supports(nlp, w, k)
        for n in range(spec.N_FE):
            for kk in range(sym.n_sub):
                for j in range(sym.n_f[kk]):
                    active = j in sup[n][kk]
                    for i in range(spec.tableau.n_s):
                        pin(f"La{k}_{n}_{i}_{kk}" if active
                            else f"Th{k}_{n}_{i}_{kk}", j)
        # an index entering the support at a boundary requires the shared
        # boundary lambda to vanish there; that equality is what pins the
        # switch time (and thereby the free step sizes) in the reduced NLP
        for n in range(spec.N_FE - 1):
            for kk in range(sym.n_sub):
                for j in sup[n + 1][kk] - sup[n][kk]:
                    pin(f"La{k}_{n}_{spec.tableau.n_s - 1}_{kk}", j)
        if f"lam0_{k}_0" in sl:
            for kk in range(sym.n_sub):
                for j in sup[0][kk]:
                    pin(f"lam0_{k}_{kk}", j)
        if spec.discretization == "fesd" and spec.step_mode != "off":
            h_sl = sl[f"h{k}"]
            for n in range(1, spec.N_FE):
                if sup[n] == sup[n - 1]:
                    eq.append(names[h_sl.start + n]
                              - names[h_sl.start + n - 1])

    reduced = NlpProblem(nlp.variables, nlp.params, nlp.objective,
                         eq, nlp.ineq, (), lb, ub)
    # start strictly inside the remaining bounds
    w0 = w.copy()
    free_lo = np.isfinite(lb)
    w0[free_lo] = np.maximum(w0[free_lo], lb[free_lo] + 1e-10)
    w_p, rep = ip_solve_nlp(reduced, w0, (), tol=tol, max_iter=max_iter)
    return (w_p, rep) if rep.converged else (w, rep)


def extract_solution(nlp: NlpProblem, w, report: SolveReport) -> OcpSolution:
    """Pull controls, states, step grids and the switch structure out of a
    raw MPCC solution vector."""
    info = nlp.info
    spec, sl = info.spec, info.layout.slices
    w = np.asarray(w, dtype=float)
    N_ctrl, N_FE = spec.N_ctrl, spec.N_FE
    controls = np.array([w[sl[f"q{k}"]] for k in range(N_ctrl)])
    states = [np.array(w[sl["s0"]])]
    element_states, h_all, times, supports = [], [], [0.0], []
    switches: List[OcpSwitch] = []
    for k in range(N_ctrl):
        xs = [np.array(w[sl[f"s{k}"]])]
        xs.extend(np.array(w[sl[f"x{k}_{n + 1}"]]) for n in range(N_FE))
        element_states.append(np.array(xs))
        hk = np.array(w[sl[f"h{k}"]])
        h_all.append(hk)
        t0 = k * spec.T_interval
        times.extend(t0 + np.cumsum(hk))
        states.append(xs[-1])
        supports.append(_interval_supports(nlp, w, k))
        for n in range(1, N_FE):
            before, after = supports[k][n - 1], supports[k][n]
            if before != after:
                switches.append(OcpSwitch(
                    float(t0 + np.cumsum(hk)[n - 1]), k, n, before, after))
    objective = float(info.objective_sys.residual(w)[0])
    return OcpSolution(controls, np.array(states), element_states,
                       np.array(h_all), np.array(times), objective, report,
                       switches, supports, w)


def solve_ocp(spec: OcpSpec,
              opts: Optional[HomotopyOptions] = None,
              w0: Optional[np.ndarray] = None,
              polish: bool = True) -> OcpSolution:
    """Transcribe and solve the OCP by the relaxation homotopy, then
    (by default) polish the detected switch structure to exact
    complementarity.

    A `w0` (same layout as `cold_start` of the transcribed problem)
    overrides the default cold start, e.g. for sweeps over initial guesses
    or warm starts from a coarser solve.
    """
    nlp = transcribe(spec)
    if w0 is None:
        w0 = cold_start(nlp)
    if opts is None:
        # the relaxation multipliers scale like 1/sigma: below ~1e-7 the
        # inner NLPs become ill-conditioned while the solution no longer
        # moves, so the default stops there
        opts = HomotopyOptions(sigma_end=1e-7, comp_tol=1e-6,
                               max_inner=3000)
    w, report = homotopy_solve(nlp, opts, w0)
    if polish and (report.converged or report.comp_residual <= 1e-2):
        w_p, rep_p = polish_ocp(nlp, w)
        if rep_p is not None and rep_p.converged:
            comp = float(np.max(np.abs(nlp._pair_sys.residual(w_p)),
                                initial=0.0)) if hasattr(nlp, "_pair_sys")                 else 0.0
            if comp <= max(opts.comp_tol, report.comp_residual):
                w = w_p
                report.comp_residual = comp
                if not report.converged:
                    report.converged = True
                    report.message = (report.message + "; " if report.message
                                      else "") + "recovered by polish"
    return extract_solution(nlp, w, report)


# ---------------------------------------------------------------------------
# Objective curves V(x0) by forward simulation
# ---------------------------------------------------------------------------

def _cost_evaluators(spec: OcpSpec, sym: DcsSymbolics):
    l_int = None
    if spec.L_int is not None:
        l_int = ResidualSystem(sym.x_vars + sym.u_vars, (),
                               [as_expr(spec.L_int)]).residual
    l_end = None
    if spec.L_end is not None:
        l_end = ResidualSystem(sym.x_vars, (),
                               [as_expr(spec.L_end)]).residual
    return l_int, l_end


def _fesd_cost(spec, traj, l_int, l_end, u):
    A, b = spec.tableau.A, spec.tableau.b
    total = 0.0
    if l_int is not None:
        for el in traj.elements:
            stages = el.x_start[None, :] + el.h * (A @ el.v)
            total += el.h * sum(
                b[i] * float(l_int(np.concatenate([stages[i], u]))[0])
                for i in range(spec.tableau.n_s))
    if l_end is not None:
        total += float(l_end(traj.states[-1])[0])
    return total


def _standard_cost(spec, std, w, h, l_int, l_end, u):
    A, b = spec.tableau.A, spec.tableau.b
    sl = std.layout.slices
    total = 0.0
    if l_int is not None:
        x_left = np.array(w[sl["x0"]])
        for n in range(std.N_FE):
            v = np.array([w[sl[f"V{n}_{i}"]]
                          for i in range(spec.tableau.n_s)])
            stages = x_left[None, :] + h * (A @ v)
            total += h * sum(
                b[i] * float(l_int(np.concatenate([stages[i], u]))[0])
                for i in range(spec.tableau.n_s))
            x_left = np.array(w[sl[f"x{n + 1}"]])
    if l_end is not None:
        total += float(l_end(std.x_end(w))[0])
    return total


def evaluate_objective_curve(spec: OcpSpec, x0_values,
                             modes=("fesd", "standard"),
                             opts: Optional[HomotopyOptions] = None
                             ) -> List[dict]:
    """Objective value of the (uncontrolled) trajectory from each x0.

    For every x0 the dynamics are forward-simulated over the horizon with
    the FESD discretization (adaptive element boundaries) and with the
    standard fixed-step discretization at the same nominal step size, and
    the cost is integrated by the tableau's quadrature.  Returns one record
    per x0 with the objective per requested mode.
    """
    from .rk_core import StandardSystem
    from .solver import homotopy_newton_solve

    sym = DcsSymbolics(spec.model)
    if sym.u_vars:
        raise ValueError("objective curves require an uncontrolled model")
    for mode in modes:
        if mode not in ("fesd", "standard"):
            raise ValueError(f"unknown discretization mode {mode!r}")
    l_int, l_end = _cost_evaluators(spec, sym)
    u = np.zeros(0)
    N_total = spec.N_ctrl * spec.N_FE
    h_std = spec.T_ctrl / N_total
    std = StandardSystem(spec.model, N_total, spec.tableau) \
        if "standard" in modes else None
    records = []
    for x0 in x0_values:
        x0v = np.atleast_1d(np.asarray(x0, dtype=float))
        rec = {"x0": float(x0v[0]) if x0v.size == 1 else x0v.tolist()}
        if "fesd" in modes:
            traj = integrate(spec.model, x0v, T_sim=spec.T_ctrl,
                             N_sim=spec.N_ctrl, N_FE=spec.N_FE,
                             tableau=spec.tableau, fesd_options=None)
            rec["fesd_ok"] = bool(traj.success)
            rec["V_fesd"] = (_fesd_cost(spec, traj, l_int, l_end, u)
                             if traj.success else float("nan"))
        if "standard" in modes:
            params = std.pack_params(0.0, x0v, None, h_std)
            w0 = std.initial_guess(x0v)
            w, rep = homotopy_newton_solve(std.system, w0, params, opts)
            rec["standard_ok"] = bool(rep.converged)
            rec["V_standard"] = (_standard_cost(spec, std, w, h_std,
                                                l_int, l_end, u)
                                 if rep.converged else float("nan"))
        records.append(rec)
    return records
