"""The FESD integrator: sequential solution of FESD problems over a
simulation horizon, dense output, switch-time extraction and forward
sensitivities with the discrete jump conditions.

Each integrator step solves one FESD problem (default two finite elements)
by the smoothed-Newton homotopy and then polishes the result on the reduced
binding system of the detected active sets, which removes the smoothing
error entirely.  The terminal state is chained into the next step.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp

from .dcs_stewart import StewartDcs
from .fesd_core import FesdOptions, FesdProblem
from .pss_model import PssModel
from .rk_core import ButcherTableau, StandardSystem, make_tableau
from .solver import (HomotopyOptions, SolveReport, homotopy_newton_solve,
                     newton_solve_square)
from .symbolics import ResidualSystem, as_expr

__all__ = ["ElementSolution", "SwitchEvent", "Trajectory",
           "SensitivityBundle", "StandardTrajectory", "integrate",
           "integrate_standard", "standard_terminal_sensitivity",
           "dense_output", "extract_switches", "forward_sensitivities"]

SUPPORT_TOL = 1e-8
TRANSVERSALITY_TOL = 1e-8


# ---------------------------------------------------------------------------
# Result containers
# ---------------------------------------------------------------------------

@dataclass
class ElementSolution:
    """Converged data of one finite element on the global time axis."""

    t_start: float
    t_end: float
    h: float
    x_start: np.ndarray
    x_end: np.ndarray
    v: np.ndarray                  # (n_s, n_x) stage derivatives
    theta: List[np.ndarray]        # per subsystem, (n_s, n_f[k])
    lam: List[np.ndarray]          # per subsystem, (n_s, n_f[k])
    mu: np.ndarray                 # (n_s, n_sub)
    support: List[frozenset]       # per subsystem: {j : max_i theta_ij > tol}
    step_index: int


@dataclass
class SwitchEvent:
    """A detected active-set change at an element boundary."""

    time: float
    subsystem: int
    components: Tuple[int, int]    # (i, j): representative before / after
    support_before: frozenset
    support_after: frozenset
    psi_residual: float            # g_i - g_j at the boundary state


@dataclass
class Trajectory:
    model: PssModel
    tableau: ButcherTableau
    times: np.ndarray              # element-boundary grid, strictly increasing
    states: np.ndarray             # (len(times), n_x)
    elements: List[ElementSolution]
    reports: List[SolveReport]
    switches: List[SwitchEvent]
    T_sim: float
    success: bool
    message: str = ""
    controls: Optional[np.ndarray] = None    # per step, or None
    _problem: Optional[FesdProblem] = field(default=None, repr=False)
    _step_data: List[dict] = field(default_factory=list, repr=False)

    def state_at(self, t: float) -> np.ndarray:
        return dense_output(self, t)


@dataclass
class SensitivityBundle:
    """Forward sensitivities d x(t_n) / d x0 along the trajectory grid."""

    times: np.ndarray
    matrices: List[np.ndarray]     # n_x x n_x at every grid point
    jumps: List[Tuple[float, np.ndarray]]
    method: str


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------

def _per_step_controls(model: PssModel, u, N_sim: int) -> List:
    if model.n_u == 0:
        return [None] * N_sim
    if u is None:
        raise ValueError("model has controls; a constant or per-step control "
                         "sequence u is required")
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        if u.shape != (model.n_u,):
            raise ValueError("constant control has wrong dimension")
        return [u] * N_sim
    if u.shape != (N_sim, model.n_u):
        raise ValueError("piecewise-constant control must have shape "
                         "(N_sim, n_u)")
    return [u[k] for k in range(N_sim)]


def _reduced_for(prob: FesdProblem, supports) -> ResidualSystem:
    cache = getattr(prob, "_reduced_cache", None)
    if cache is None:
        cache = prob._reduced_cache = {}
    key = tuple(tuple(sorted(s)) for el in supports for s in el)
    sys_ = cache.get(key)
    if sys_ is None:
        sys_ = cache[key] = prob.reduced_system(supports)
    return sys_


def _polish(system: ResidualSystem, w0: np.ndarray, params,
            tol: float = 1e-12, max_iter: int = 30
            ) -> Tuple[np.ndarray, bool]:
    """Gauss-Newton (least-squares) polish on the over-determined reduced
    binding system; returns the improved iterate and a success flag."""
    w = np.asarray(w0, dtype=float).copy()
    norm = float(np.max(np.abs(system.residual(w, params))))
    for _ in range(max_iter):
        if norm <= tol:
            return w, True
        J = system.jacobian(w, params)
        r = system.residual(w, params)
        dw = np.linalg.lstsq(J, -r, rcond=None)[0]
        alpha, improved = 1.0, False
        for _ in range(30):
            w_new = w + alpha * dw
            norm_new = float(np.max(np.abs(system.residual(w_new, params))))
            if norm_new < norm:
                w, norm, improved = w_new, norm_new, True
                break
            alpha *= 0.5
        if not improved:
            return w, norm <= 1e-9
    return w, norm <= tol


def integrate(model: PssModel, x0, u=None, T_sim: float = 1.0,
              N_sim: int = 1, N_FE: int = 2,
              tableau: Optional[ButcherTableau] = None,
              opts: Optional[HomotopyOptions] = None,
              fesd_options: Optional[FesdOptions] = None,
              polish: bool = True) -> Trajectory:
    """Integrate the piecewise-smooth ODE over [0, T_sim] with N_sim
    sequential FESD problems of N_FE elements each.

    On solver failure a partial trajectory is returned with success=False.
    """
    if T_sim <= 0.0:
        raise ValueError("T_sim must be positive")
    if N_sim < 1:
        raise ValueError("N_sim must be >= 1")
    tableau = tableau or make_tableau("radau-iia", 2)
    controls = _per_step_controls(model, u, N_sim)
    prob = FesdProblem(model, N_FE, tableau, fesd_options)
    sym = prob.sym
    n_s = tableau.n_s

    T_step = T_sim / N_sim
    x = np.asarray(x0, dtype=float).ravel()
    times = [0.0]
    states = [x.copy()]
    elements: List[ElementSolution] = []
    reports: List[SolveReport] = []
    step_data: List[dict] = []
    success, message = True, ""

    t_base = 0.0
    # keep the step lengths inside their box along the Newton iterations;
    # the remaining unknowns are left free (the C-functions control them)
    n_w = len(prob.variables)
    lb_h = np.full(n_w, -np.inf)
    ub_h = np.full(n_w, np.inf)
    lb_h[prob.h_slice] = 1e-10 * T_step
    ub_h[prob.h_slice] = 2.0 * T_step / N_FE

    base_opts = opts or HomotopyOptions()
    for k in range(N_sim):
        qk = controls[k]
        params = prob.pack_params(0.0, x, qk, T_step)
        w0 = prob.initial_guess(x, qk, T_step)
        # fast path first: away from a switch the LP-seeded guess is on the
        # right branch and the system solves directly at the target sigma;
        # the homotopy ladder is only needed when that fails (near switches:
        # a large first sigma can overshoot -> reduce sigma0, an aggressive
        # reduction can lose the solution branch -> soften kappa)
        kappa_soft = max(0.5, base_opts.kappa)
        ladder = [None,
                  (base_opts.sigma0, base_opts.kappa),
                  (base_opts.sigma0, kappa_soft),
                  (base_opts.sigma0 * 0.1, base_opts.kappa),
                  (base_opts.sigma0 * 0.1, kappa_soft),
                  (base_opts.sigma0 * 0.01, kappa_soft)]
        for rung in ladder:
            if rung is None:
                params_fast = params.copy()
                params_fast[0] = base_opts.sigma_end
                w, nrep = newton_solve_square(prob.newton_system, w0,
                                              params_fast, tol=1e-12,
                                              max_iter=30, lb=lb_h, ub=ub_h)
                if not nrep.converged:
                    continue
                rep = SolveReport(True, base_opts.sigma_end,
                                  [nrep.residual_norm],
                                  iterations=nrep.iterations)
            else:
                sigma0, kappa = rung
                # the soft rungs take many more stages to reach sigma_end,
                # so the outer budget is sized per rung (with headroom for
                # bisection retries)
                need = math.log(base_opts.sigma_end / sigma0) \
                    / math.log(kappa)
                stage_opts = replace(
                    base_opts, sigma0=sigma0, kappa=kappa,
                    max_outer=max(base_opts.max_outer, int(2 * need) + 10))
                w, rep = homotopy_newton_solve(prob.newton_system, w0, params,
                                               stage_opts, lb=lb_h, ub=ub_h)
                if not rep.converged:
                    continue
            supports = prob.detect_supports(w)
            if polish:
                w, ok = _polish(_reduced_for(prob, supports), w, params)
                if not ok:
                    rep.message = (rep.message + "; " if rep.message
                                   else "") + \
                        "active-set polish did not fully converge"
            # the merged boundary rows can trade residual cross-product
            # mass against a step difference, and the smoothed square
            # system admits roots with negative convex multipliers that
            # run the flow backwards through the surface; reject both
            # kinds of spurious root (unpolished iterates sit at the
            # sqrt(sigma) smoothing floor, hence the looser tolerances)
            cross = np.max(np.abs(prob.cross_system.residual(w, params)),
                           initial=0.0)
            floor = math.sqrt(max(rep.sigma_final, 0.0))
            cross_tol = 1e-6 if polish else max(1e-6, 100.0 * floor)
            neg_tol = 1e-8 if polish else max(1e-8, 10.0 * floor)
            alg_min = min((float(np.min(
                               w[prob.layout.slices[f"{tag}{n}_{i}_{kk}"]]))
                           for tag in ("Th", "La")
                           for n in range(N_FE) for i in range(n_s)
                           for kk in range(sym.n_sub)),
                          default=0.0)
            if cross <= cross_tol and alg_min >= -neg_tol:
                break
            rep.converged = False
            rep.message = (f"spurious root rejected (cross={cross:.1e}, "
                           f"min theta/lambda={alg_min:.1e})")
        if not rep.converged:
            supports = prob.detect_supports(w)
        reports.append(rep)
        if not rep.converged:
            success = False
            message = f"step {k}: {rep.message or 'solver failure'}"
            break
        xs = prob.states(w)
        h = prob.steps(w)
        for n in range(N_FE):
            theta = [np.array([prob.stage_values(w, "Th", n, i, kk)
                               for i in range(n_s)])
                     for kk in range(sym.n_sub)]
            lam = [np.array([prob.stage_values(w, "La", n, i, kk)
                             for i in range(n_s)])
                   for kk in range(sym.n_sub)]
            mu = np.array([w[prob.layout.slices[f"Mu{n}_{i}"]]
                           for i in range(n_s)])
            v = np.array([w[prob.layout.slices[f"V{n}_{i}"]]
                          for i in range(n_s)])
            support = [frozenset(int(j) for j in range(sym.n_f[kk])
                                 if float(np.max(theta[kk][:, j]))
                                 > SUPPORT_TOL)
                       for kk in range(sym.n_sub)]
            el = ElementSolution(
                t_start=t_base + float(np.sum(h[:n])),
                t_end=t_base + float(np.sum(h[:n + 1])),
                h=float(h[n]), x_start=xs[n].copy(),
                x_end=xs[n + 1].copy(), v=v, theta=theta, lam=lam,
                mu=np.array(mu), support=support, step_index=k)
            elements.append(el)
            times.append(el.t_end)
            states.append(el.x_end.copy())
        step_data.append(dict(w=w.copy(), params=params.copy(),
                              supports=supports, x_in=x.copy(), q=qk,
                              sigma_final=rep.sigma_final))
        x = prob.x_end(w)
        t_base += T_step

    traj = Trajectory(
        model=model, tableau=tableau, times=np.asarray(times),
        states=np.asarray(states), elements=elements, reports=reports,
        switches=[], T_sim=T_sim, success=success, message=message,
        controls=(None if model.n_u == 0
                  else np.asarray([c for c in controls])),
        _problem=prob, _step_data=step_data)
    traj.switches = extract_switches(traj)
    return traj


# ---------------------------------------------------------------------------
# Dense output
# ---------------------------------------------------------------------------

def _lagrange_integrals(c: np.ndarray) -> List[np.poly1d]:
    """Antiderivatives of the Lagrange basis polynomials on the nodes c."""
    polys = []
    for j, cj in enumerate(c):
        others = np.delete(c, j)
        num = np.poly1d(np.poly(others)) if len(others) else np.poly1d([1.0])
        denom = float(np.prod(cj - others)) if len(others) else 1.0
        polys.append((num / denom).integ())
    return polys


def dense_output(traj: Trajectory, t: float) -> np.ndarray:
    """Evaluate the continuous-time solution approximation at time t.

    Collocation-type tableaus use the interpolation polynomial of the stage
    derivatives; explicit tableaus fall back to a Hermite (or linear)
    interpolant.  Grid points return the stored states exactly.
    """
    eps = 1e-12 * max(1.0, traj.T_sim)
    if t < -eps or t > traj.T_sim + eps:
        raise ValueError("t outside the simulated horizon")
    t = min(max(t, 0.0), traj.T_sim)
    idx = bisect.bisect_right(traj.times, t) - 1
    if idx >= len(traj.elements):
        idx = len(traj.elements) - 1
    for j in (idx, idx + 1):
        if j < len(traj.times) and abs(t - traj.times[j]) <= eps:
            return traj.states[j].copy()
    el = traj.elements[idx]
    if el.h <= 1e-14:
        return el.x_start.copy()
    tau = (t - el.t_start) / el.h

    tab = traj.tableau
    if tab.nodes_distinct and not tab.is_explicit:
        cache = getattr(traj, "_basis_cache", None)
        if cache is None:
            cache = traj._basis_cache = _lagrange_integrals(tab.c)
        weights = np.array([p(tau) for p in cache])
        return el.x_start + el.h * (weights @ el.v)
    # explicit tableaus: Hermite if both endpoint slopes are available
    if abs(tab.c[0]) < 1e-12 and abs(tab.c[-1] - 1.0) < 1e-12:
        m0, m1 = el.h * el.v[0], el.h * el.v[-1]
        t2, t3 = tau * tau, tau ** 3
        return ((2 * t3 - 3 * t2 + 1) * el.x_start + (t3 - 2 * t2 + tau) * m0
                + (-2 * t3 + 3 * t2) * el.x_end + (t3 - t2) * m1)
    return el.x_start + tau * (el.x_end - el.x_start)


# ---------------------------------------------------------------------------
# Switch extraction
# ---------------------------------------------------------------------------

def extract_switches(traj: Trajectory,
                     tol: float = SUPPORT_TOL) -> List[SwitchEvent]:
    """Scan consecutive elements for theta-support changes and report the
    boundaries where they occur."""
    dcs = StewartDcs(traj.model)
    events: List[SwitchEvent] = []
    for left, right in zip(traj.elements, traj.elements[1:]):
        for k in range(len(traj.model.subsystems)):
            before = frozenset(
                j for j in range(dcs.n_f[k])
                if float(np.max(left.theta[k][:, j])) > tol)
            after = frozenset(
                j for j in range(dcs.n_f[k])
                if float(np.max(right.theta[k][:, j])) > tol)
            if before == after:
                continue
            gone = sorted(before - after)
            new = sorted(after - before)
            i = gone[0] if gone else min(before)
            j = new[0] if new else min(after)
            g = dcs.g_values(left.x_end)[k]
            events.append(SwitchEvent(
                time=right.t_start, subsystem=k, components=(i, j),
                support_before=before, support_after=after,
                psi_residual=float(g[i] - g[j])))
    return events


# ---------------------------------------------------------------------------
# Forward sensitivities
# ---------------------------------------------------------------------------

def _mu00_chain(dcs: StewartDcs, s0: np.ndarray) -> List[np.ndarray]:
    """d mu00_k / d s0 = gradient of the active (minimal) g component."""
    g = dcs.g_values(s0)
    Jg = dcs.g_jacobians(s0)
    return [Jg[k][int(np.argmin(g[k]))] for k in range(dcs.n_sub)]


def _param_chain_matrix(prob: FesdProblem, s0: np.ndarray) -> np.ndarray:
    """d params / d s0 for the per-step parameter vector
    [sigma, s0, q, T, mu00, K]."""
    dcs = prob.sym.dcs
    n_x, n_u, n_sub = dcs.n_x, dcs.n_u, dcs.n_sub
    n_p = len(prob.param_names)
    P = np.zeros((n_p, n_x))
    P[1:1 + n_x] = np.eye(n_x)
    base = 2 + n_x + n_u
    for k, grad in enumerate(_mu00_chain(dcs, s0)):
        P[base + k] = grad
    return P


def _step_state_sensitivities(traj: Trajectory, data: dict) -> np.ndarray:
    """d x_n / d s0 for all element boundaries of one step, stacked as an
    (N_FE + 1, n_x, n_x) array, via the implicit function theorem on the
    converged reduced binding system."""
    prob = traj._problem
    system = _reduced_for(prob, data["supports"])
    w, params = data["w"], data["params"]
    J = system.jacobian(w, params)
    Jp = system.jacobian_params(w, params)
    P = _param_chain_matrix(prob, data["x_in"])
    dw = np.linalg.lstsq(J, -(Jp @ P), rcond=None)[0]
    out = []
    for n in range(prob.N_FE + 1):
        sl = prob.layout.slices["x0" if n == 0 else f"x{n}"]
        out.append(dw[sl])
    return np.asarray(out)


def _element_slope(el: ElementSolution, tab: ButcherTableau,
                   side: str) -> np.ndarray:
    """xdot at the left (tau=0) or right (tau=1) end of an element from the
    stage-derivative interpolation polynomial."""
    if tab.nodes_distinct:
        tau = 0.0 if side == "left" else 1.0
        weights = []
        for j, cj in enumerate(tab.c):
            others = np.delete(tab.c, j)
            num = np.prod(tau - others) if len(others) else 1.0
            den = np.prod(cj - others) if len(others) else 1.0
            weights.append(num / den)
        return np.asarray(weights) @ el.v
    return el.v[0] if side == "left" else el.v[-1]


def _jump_matrix(traj: Trajectory, ev: SwitchEvent, dcs: StewartDcs,
                 xdot_minus: np.ndarray, xdot_plus: np.ndarray,
                 strict: bool) -> np.ndarray:
    x_s = dense_output(traj, ev.time)
    Jg = dcs.g_jacobians(x_s)[ev.subsystem]
    grad_psi = Jg[ev.components[0]] - Jg[ev.components[1]]
    denom = float(grad_psi @ xdot_minus)
    if abs(denom) < TRANSVERSALITY_TOL:
        if strict:
            raise ValueError(
                "switch is not transversal: grad(psi)^T f below threshold")
        return np.eye(dcs.n_x)
    return np.eye(dcs.n_x) + np.outer(xdot_plus - xdot_minus,
                                      grad_psi) / denom


def _boundary_elements(traj: Trajectory, t: float
                       ) -> Tuple[ElementSolution, ElementSolution]:
    idx = int(np.argmin(np.abs(traj.times - t)))
    return traj.elements[idx - 1], traj.elements[idx]


def _ift_sensitivities(traj: Trajectory) -> SensitivityBundle:
    n_x = traj.model.n_x
    X = np.eye(n_x)
    matrices = [X.copy()]
    for data in traj._step_data:
        local = _step_state_sensitivities(traj, data)
        for n in range(1, len(local)):
            matrices.append(local[n] @ X)
        X = local[-1] @ X
    dcs = StewartDcs(traj.model)
    jumps = []
    for ev in traj.switches:
        left, right = _boundary_elements(traj, ev.time)
        xm = _element_slope(left, traj.tableau, "right")
        xp = _element_slope(right, traj.tableau, "left")
        jumps.append((ev.time, _jump_matrix(traj, ev, dcs, xm, xp,
                                            strict=False)))
    return SensitivityBundle(traj.times.copy(), matrices, jumps,
                             "solver-IFT")


def _phase_field(traj: Trajectory, support: List[frozenset], q
                 ) -> ResidualSystem:
    """Smooth vector field (and thus its Jacobian) of a single-region
    phase, as a ResidualSystem over the state variables."""
    sym = traj._problem.sym
    key = ("field", tuple(tuple(sorted(s)) for s in support),
           None if q is None else tuple(np.asarray(q, dtype=float)))
    cache = getattr(traj, "_field_cache", None)
    if cache is None:
        cache = traj._field_cache = {}
    if key in cache:
        return cache[key]
    for s in support:
        if len(s) != 1:
            raise ValueError("the analytic sensitivity oracle supports "
                             "single-region phases only")
    theta = [np.eye(sym.n_f[k])[next(iter(support[k]))]
             for k in range(sym.n_sub)]
    rows = sym.f_theta_at(list(sym.x_vars),
                          None if q is None else
                          [as_expr(float(v))
                           for v in np.asarray(q, dtype=float)],
                          [[float(t) for t in tk] for tk in theta])
    sys_ = ResidualSystem(list(sym.x_vars), (), rows)
    cache[key] = sys_
    return sys_


def _oracle_sensitivities(traj: Trajectory) -> SensitivityBundle:
    model = traj.model
    n_x = model.n_x
    dcs = StewartDcs(model)
    if traj.controls is not None and len(traj._step_data) > 1:
        q0 = traj._step_data[0]["q"]
        for data in traj._step_data[1:]:
            if not np.allclose(data["q"], q0):
                raise ValueError("the analytic oracle requires a constant "
                                 "control")
    switch_times = [ev.time for ev in traj.switches]
    boundaries = [0.0] + switch_times + [traj.T_sim]
    grid = traj.times
    matrices: List[Optional[np.ndarray]] = [None] * len(grid)
    jumps: List[Tuple[float, np.ndarray]] = []
    X = np.eye(n_x)
    x = traj.states[0].copy()
    for ph in range(len(boundaries) - 1):
        t0, t1 = boundaries[ph], boundaries[ph + 1]
        el = next(e for e in traj.elements
                  if e.t_start >= t0 - 1e-12 and e.t_end <= t1 + 1e-12)
        q = traj._step_data[el.step_index]["q"]
        fld = _phase_field(traj, el.support, q)

        def rhs(_t, yv):
            xx = yv[:n_x]
            Xm = yv[n_x:].reshape(n_x, n_x)
            fx = fld.residual(xx)
            Jx = fld.jacobian(xx)
            return np.concatenate([fx, (Jx @ Xm).ravel()])

        t_eval = {min(max(float(tg), t0), t1) for tg in grid
                  if t0 - 1e-12 < tg <= t1 + 1e-12}
        sol = solve_ivp(rhs, (t0, t1), np.concatenate([x, X.ravel()]),
                        t_eval=sorted(t_eval | {t1}),
                        rtol=1e-12, atol=1e-12, dense_output=False)
        for tt, col in zip(sol.t, sol.y.T):
            hits = np.nonzero(np.abs(grid - tt) <= 1e-9)[0]
            for gi in hits:
                matrices[gi] = col[n_x:].reshape(n_x, n_x).copy()
        x = sol.y[:n_x, -1].copy()
        X = sol.y[n_x:, -1].reshape(n_x, n_x).copy()
        if ph < len(boundaries) - 2:
            ev = traj.switches[ph]
            f_bef = fld.residual(x)
            left, right = _boundary_elements(traj, ev.time)
            el_after = right
            q_a = traj._step_data[el_after.step_index]["q"]
            fld_after = _phase_field(traj, el_after.support, q_a)
            f_aft = fld_after.residual(x)
            J = _jump_matrix(traj, ev, dcs, f_bef, f_aft, strict=True)
            jumps.append((ev.time, J))
            X = J @ X
            gi = np.nonzero(np.abs(grid - ev.time) <= 1e-9)[0]
            for g_idx in gi:
                matrices[g_idx] = X.copy()
    for i, m in enumerate(matrices):
        if m is None:
            matrices[i] = np.full((n_x, n_x), np.nan)
    return SensitivityBundle(grid.copy(), matrices, jumps,
                             "analytic-jump-oracle")


def forward_sensitivities(traj: Trajectory, method: str = "solver-ift"
                          ) -> SensitivityBundle:
    """Forward sensitivities X(t_n) = d x(t_n) / d x0 along the grid.

    method "solver-ift" differentiates each converged FESD step through the
    implicit function theorem and chains the per-step matrices; method
    "analytic-jump-oracle" propagates the smooth variational equations per
    phase and applies the sensitivity jump matrix at each detected switch.
    """
    if not traj.success:
        raise ValueError("cannot compute sensitivities of a failed "
                         "trajectory")
    key = method.lower()
    if key in ("solver-ift", "ift"):
        return _ift_sensitivities(traj)
    if key in ("analytic-jump-oracle", "oracle"):
        return _oracle_sensitivities(traj)
    raise ValueError(f"unknown sensitivity method {method!r}")


# ---------------------------------------------------------------------------
# Fixed-grid (standard) integration, for comparison studies
# ---------------------------------------------------------------------------

@dataclass
class StandardTrajectory:
    """Result of a fixed-step discretization run (no switch detection)."""

    model: PssModel
    tableau: ButcherTableau
    times: np.ndarray              # step-boundary grid
    states: np.ndarray             # (N_sim + 1, n_x)
    reports: List[SolveReport]
    T_sim: float
    success: bool
    sigma: float
    _steps: List[dict] = field(default_factory=list, repr=False)


def integrate_standard(model: PssModel, x0, u=None, T_sim: float = 1.0,
                       N_sim: int = 1, N_FE: int = 2,
                       tableau: Optional[ButcherTableau] = None,
                       sigma: float = 1e-8,
                       opts: Optional[HomotopyOptions] = None
                       ) -> StandardTrajectory:
    """Integrate on a fixed equidistant grid with smoothed stage
    complementarities (no cross complementarity, no adaptive steps).

    This is the baseline FESD is compared against: switching times are not
    resolved, so the method is first-order accurate whenever a switch falls
    into an element interior.  `sigma` is the terminal smoothing parameter
    of the per-step homotopy.
    """
    if T_sim <= 0:
        raise ValueError("T_sim must be positive")
    if N_sim < 1:
        raise ValueError("N_sim must be >= 1")
    tableau = tableau or make_tableau("radau-iia", 2)
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.shape != (model.n_x,):
        raise ValueError("x0 has wrong dimension")
    controls = _per_step_controls(model, u, N_sim)
    std = StandardSystem(model, N_FE, tableau)
    T_step = T_sim / N_sim
    h = T_step / N_FE
    base_opts = opts or HomotopyOptions(sigma0=1.0, kappa=0.1,
                                        sigma_end=max(sigma, 1e-12))
    times = [0.0]
    states = [x0.copy()]
    reports: List[SolveReport] = []
    steps: List[dict] = []
    x_cur = x0
    success = True
    for k in range(N_sim):
        params = std.pack_params(sigma, x_cur,
                                 controls[k] if controls[k] is not None
                                 else None, h)
        w0 = std.initial_guess(x_cur, controls[k])
        w, rep = homotopy_newton_solve(std.system, w0, params, base_opts)
        reports.append(rep)
        if not rep.converged:
            success = False
        steps.append(dict(w=w, params=params, x_in=x_cur.copy()))
        x_cur = std.x_end(w)
        times.append((k + 1) * T_step)
        states.append(x_cur.copy())
        if not success:
            break
    traj = StandardTrajectory(model, tableau, np.asarray(times),
                              np.asarray(states), reports, T_sim, success,
                              sigma, steps)
    traj._system = std
    return traj


def standard_terminal_sensitivity(traj: StandardTrajectory) -> np.ndarray:
    """d x(T) / d x0 of the fixed-grid discretization, by the implicit
    function theorem per step through the smoothed square system.

    On problems with switches this exhibits the wrong-derivative pathology
    of fixed-grid discretizations: the returned matrix does not converge to
    the Filippov jump-condition sensitivity as the grid is refined.
    """
    if not traj.success:
        raise ValueError("cannot compute sensitivities of a failed "
                         "trajectory")
    std = traj._system
    n_x = traj.model.n_x
    # params = [sigma, s0, q, h]: the chain rule only passes through s0
    P = np.zeros((len(std.param_names), n_x))
    P[1:1 + n_x] = np.eye(n_x)
    X = np.eye(n_x)
    for data in traj._steps:
        J = std.system.jacobian(data["w"], data["params"])
        Jp = std.system.jacobian_params(data["w"], data["params"])
        dw = np.linalg.solve(J, -(Jp @ P))
        X = dw[std.layout.slices[f"x{std.N_FE}"]] @ X
    return X
