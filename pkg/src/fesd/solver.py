"""Numerical solvers: damped Newton for square smoothed systems, a
primal-dual interior-point method for smooth NLPs, and the homotopy driver
that steers the complementarity parameter sigma.

Simulation uses the square path: the smoothed residual system is solved by
Newton while sigma is reduced geometrically.  Optimal control uses the MPCC
path: complementarity pairs are relaxed (aggregated product inequality),
smoothed (Fischer-Burmeister equalities) or penalized, and the resulting
smooth NLP is solved by the interior-point method, warm-started along the
homotopy.
"""

from __future__ import annotations

import json
import math
import sys
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .rk_core import smoothed_fb
from .symbolics import (EvaluationError, Expr, ResidualSystem, as_expr,
                        compile_evaluator, esum, hessian_entries, var)

__all__ = ["NlpProblem", "HomotopyOptions", "SolveReport", "NewtonReport",
           "IpReport", "relax_complementarities", "newton_solve_square",
           "ip_solve_nlp", "homotopy_solve", "homotopy_newton_solve"]


# ---------------------------------------------------------------------------
# Problem and report containers
# ---------------------------------------------------------------------------

@dataclass
class NlpProblem:
    """A (possibly complementarity-constrained) NLP.

    min objective(w; p)  s.t.  eq = 0,  ineq >= 0,  lb <= w <= ub,
    and 0 <= a  perp  b >= 0 for every pair (a, b) in comp_pairs.

    `comp_rows` lists complementarity-type residuals (products that vanish
    at exact solutions, e.g. step equilibration rows): the homotopy treats
    them like the pair products, enforcing |r| <= sigma instead of r = 0 at
    each relaxation stage.
    """

    variables: Sequence[Expr]
    params: Sequence[Expr]
    objective: Expr
    eq: Sequence[Expr] = ()
    ineq: Sequence[Expr] = ()
    comp_pairs: Sequence[Tuple[Expr, Expr]] = ()
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    comp_rows: Sequence[Expr] = ()

    def __post_init__(self):
        n = len(self.variables)
        self.objective = as_expr(self.objective)
        self.lb = (np.full(n, -np.inf) if self.lb is None
                   else np.asarray(self.lb, dtype=float))
        self.ub = (np.full(n, np.inf) if self.ub is None
                   else np.asarray(self.ub, dtype=float))
        if self.lb.shape != (n,) or self.ub.shape != (n,):
            raise ValueError("bounds must match the variable count")
        index = {id(v): i for i, v in enumerate(self.variables)}
        for a, b in self.comp_pairs:
            for side in (a, b):
                i = index.get(id(side))
                if i is not None and self.lb[i] < 0.0:
                    raise ValueError(
                        "complementarity pair references a variable without "
                        "a nonnegativity bound")


@dataclass
class HomotopyOptions:
    sigma0: float = 1.0
    kappa: float = 0.1
    sigma_end: float = 1e-12
    comp_tol: float = 1e-10
    mode: str = "relaxation"          # relaxation | smoothing | penalty
    max_outer: int = 30
    max_inner: int = 300
    fixed_sigma: Optional[float] = None
    verbose: bool = False
    log: Optional[object] = None      # writable stream for JSON lines

    def __post_init__(self):
        if not 0.0 < self.kappa < 1.0:
            raise ValueError("reduction factor kappa must lie in (0, 1)")
        if self.sigma_end >= self.sigma0:
            raise ValueError("sigma_end must be smaller than sigma0")
        if self.mode not in ("relaxation", "smoothing", "penalty"):
            raise ValueError(f"unknown homotopy mode {self.mode!r}")


@dataclass
class NewtonReport:
    converged: bool
    iterations: int
    residual_norm: float
    history: List[float] = field(default_factory=list)
    message: str = ""


@dataclass
class IpReport:
    converged: bool
    iterations: int
    kkt_residual: float
    mu: float
    y: np.ndarray = None
    z: np.ndarray = None
    message: str = ""


@dataclass
class SolveReport:
    converged: bool
    sigma_final: float
    residual_norms: List[float] = field(default_factory=list)
    comp_residual: float = np.inf
    iterations: int = 0
    wall_time: float = 0.0
    trace: List[dict] = field(default_factory=list)
    message: str = ""


def _emit(opts: HomotopyOptions, record: dict):
    if opts.verbose:
        stream = opts.log if opts.log is not None else sys.stderr
        stream.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------------------
# Complementarity handling
# ---------------------------------------------------------------------------

def relax_complementarities(p: NlpProblem, sigma, mode: str) -> NlpProblem:
    """Replace the complementarity pairs of `p` by a smooth surrogate.

    relaxation: one aggregated inequality sigma - sum_i a_i b_i >= 0;
    smoothing:  equalities Psi_sigma(a_i, b_i) = 0;
    penalty:    (1/sigma) sum_i a_i b_i added to the objective.
    `sigma` may be a number or a parameter expression.
    """
    if mode not in ("relaxation", "smoothing", "penalty"):
        raise ValueError(f"unknown homotopy mode {mode!r}")
    sigma = as_expr(sigma)
    eq = list(p.eq)
    ineq = list(p.ineq)
    objective = p.objective
    index = {id(v) for v in p.variables}
    # sides that are general expressions need explicit sign constraints
    seen = set()
    for a, b in p.comp_pairs:
        for side in (a, b):
            if id(side) not in index and id(side) not in seen \
                    and not (side.kind == "const"):
                seen.add(id(side))
                if mode in ("relaxation", "penalty"):
                    ineq.append(side)
    products = [a * b for a, b in p.comp_pairs]
    if products:
        if mode == "relaxation":
            ineq.append(sigma - esum(products))
        elif mode == "smoothing":
            eq.extend(smoothed_fb(a, b, sigma) for a, b in p.comp_pairs)
        else:
            objective = objective + esum(products) / sigma
    for r in p.comp_rows:
        if mode == "penalty":
            objective = objective + r * r / sigma
        else:
            ineq.extend([sigma - r, sigma + r])
    return NlpProblem(p.variables, p.params, objective, eq, ineq, (),
                      p.lb.copy(), p.ub.copy())


# ---------------------------------------------------------------------------
# Damped Newton for square systems
# ---------------------------------------------------------------------------

def newton_solve_square(system: ResidualSystem, w0, params=(),
                        tol: float = 1e-12, max_iter: int = 80,
                        reg: float = 1e-9, lb=None,
                        ub=None) -> Tuple[np.ndarray, NewtonReport]:
    """Damped Newton with backtracking on the residual norm.  Singular
    Jacobians are retried with an increasing diagonal regularization.
    Optional box bounds are enforced by a fraction-to-boundary step cap
    (components already at a bound are clipped after the step)."""
    if system.n_res != system.n:
        raise ValueError("newton_solve_square needs a square system")
    w = np.asarray(w0, dtype=float).copy()
    params = np.asarray(params, dtype=float)
    lb = None if lb is None else np.asarray(lb, dtype=float)
    ub = None if ub is None else np.asarray(ub, dtype=float)
    if lb is not None:
        w = np.clip(w, lb, ub if ub is not None else np.inf)
    elif ub is not None:
        w = np.minimum(w, ub)

    def boundary_cap(x, dw):
        cap = 1.0
        for bound, sign in ((lb, 1.0), (ub, -1.0)):
            if bound is None:
                continue
            dist = sign * (x - bound)
            move = -sign * dw
            mask = np.isfinite(bound) & (move > 0) & (dist > 0)
            if np.any(mask):
                cap = min(cap, float(np.min(
                    0.995 * dist[mask] / move[mask])))
        return max(cap, 1e-16)

    def clip_bounds(x):
        if lb is not None:
            x = np.maximum(x, lb)
        if ub is not None:
            x = np.minimum(x, ub)
        return x

    def norm_at(x):
        try:
            r = system.residual(x, params)
        except EvaluationError:
            return None, np.inf
        if not np.all(np.isfinite(r)):
            return r, np.inf
        return r, float(np.max(np.abs(r)))

    r, norm = norm_at(w)
    history = [norm]
    best = norm
    best2 = float(np.linalg.norm(r)) if r is not None else np.inf
    last_gain = 0

    def try_direction(dw, norm2):
        """Backtracking line search accepting a sufficient decrease of the
        residual in either norm; returns the accepted point or None."""
        alpha = boundary_cap(w, dw)
        for _ in range(40):
            w_try = clip_bounds(w + alpha * dw)
            r_new, norm_new = norm_at(w_try)
            if norm_new <= tol or (
                    np.isfinite(norm_new)
                    and (float(np.linalg.norm(r_new))
                         < norm2 * (1.0 - 1e-4 * alpha)
                         or norm_new < norm * (1.0 - 1e-4 * alpha))):
                return w_try, r_new, norm_new
            alpha *= 0.5
        return None

    for it in range(max_iter):
        if norm <= tol:
            return w, NewtonReport(True, it, norm, history)
        J = system.jacobian(w, params)
        norm2 = float(np.linalg.norm(r))
        result = None
        try:
            dw = np.linalg.solve(J, -r)
            if np.all(np.isfinite(dw)):
                result = try_direction(dw, norm2)
        except np.linalg.LinAlgError:
            pass
        if result is None:
            # Levenberg-Marquardt fallback: pure Newton stalled or the
            # Jacobian is singular; damped least-squares steps are descent
            # directions for the residual norm
            JtJ = J.T @ J
            Jtr = J.T @ r
            scale = max(float(np.trace(JtJ)) / system.n, 1.0)
            delta = max(reg, 1e-8 * scale)
            for _ in range(10):
                try:
                    dw = np.linalg.solve(
                        JtJ + delta * np.eye(system.n), -Jtr)
                except np.linalg.LinAlgError:
                    delta *= 100.0
                    continue
                if np.all(np.isfinite(dw)):
                    result = try_direction(dw, norm2)
                    if result is not None:
                        break
                delta *= 100.0
        if result is None:
            return w, NewtonReport(False, it + 1, norm, history,
                                   "line search failure")
        w, r, norm = result
        history.append(norm)
        # near a residual floor the damped steps keep being "accepted" with
        # vanishing progress; stop once neither norm has improved materially
        # for a while instead of crawling to max_iter (the line search may
        # trade one norm for the other, so both are tracked)
        norm2 = float(np.linalg.norm(r))
        if norm < 0.999 * best or norm2 < 0.999 * best2:
            last_gain = it
        best = min(best, norm)
        best2 = min(best2, norm2)
        if it - last_gain >= 20:
            return w, NewtonReport(False, it + 1, norm, history, "stalled")
    return w, NewtonReport(norm <= tol, max_iter, norm, history,
                           "" if norm <= tol else "iteration limit")


def homotopy_newton_solve(system: ResidualSystem, w0, params,
                          opts: Optional[HomotopyOptions] = None,
                          sigma_index: int = 0, lb=None, ub=None
                          ) -> Tuple[np.ndarray, SolveReport]:
    """Simulation-mode homotopy: solve the square smoothed system while the
    sigma entry of the parameter vector is reduced geometrically."""
    opts = opts or HomotopyOptions()
    t0 = time.perf_counter()
    params = np.asarray(params, dtype=float).copy()
    w = np.asarray(w0, dtype=float).copy()
    report = SolveReport(False, np.nan)
    sigma = opts.fixed_sigma if opts.fixed_sigma is not None else opts.sigma0
    outer = 0
    sigma_prev = None
    retries = 0
    slow_cycles = 0
    while True:
        params[sigma_index] = sigma
        tol = max(1e-12, sigma * 1e-2)
        w_new, nrep = newton_solve_square(system, w, params, tol=tol,
                                          max_iter=200, lb=lb, ub=ub)
        # near a switch the smoothed square system has a structural
        # residual floor of order sqrt(sigma); accept such stages, the
        # active-set polish recovers exactness afterwards
        stage_ok = nrep.converged or \
            nrep.residual_norm <= 10.0 * math.sqrt(sigma)
        report.iterations += nrep.iterations
        report.residual_norms.append(nrep.residual_norm)
        record = dict(stage=outer, sigma=sigma, tol=tol,
                      residual=nrep.residual_norm,
                      iterations=nrep.iterations, converged=stage_ok)
        report.trace.append(record)
        _emit(opts, record)
        if not stage_ok:
            if sigma_prev is not None and retries < 8 \
                    and sigma_prev > sigma * 1.0001 \
                    and opts.fixed_sigma is None:
                # the default sigma reduction was too aggressive for this
                # stage: bisect (in log sigma) towards the last success
                retries += 1
                sigma = math.sqrt(sigma * sigma_prev)
                continue
            report.sigma_final = sigma
            report.message = f"inner Newton failed at sigma={sigma:g}: " \
                             f"{nrep.message}"
            report.wall_time = time.perf_counter() - t0
            return w, report
        w = w_new
        retries = 0
        # a ladder whose bisection retries only inch sigma downward has
        # lost the solution branch; give up instead of sawing to max_outer
        if sigma_prev is not None and sigma > 0.5 * sigma_prev:
            slow_cycles += 1
            if slow_cycles >= 3:
                report.sigma_final = sigma
                report.message = "stagnating sigma reduction"
                report.wall_time = time.perf_counter() - t0
                return w, report
        else:
            slow_cycles = 0
        sigma_prev = sigma
        outer += 1
        if opts.fixed_sigma is not None or sigma <= opts.sigma_end:
            report.converged = True
            break
        if outer >= opts.max_outer:
            report.sigma_final = sigma
            report.message = "outer iteration limit"
            report.wall_time = time.perf_counter() - t0
            return w, report
        sigma = max(sigma * opts.kappa, opts.sigma_end)
    report.sigma_final = sigma
    report.wall_time = time.perf_counter() - t0
    return w, report


# ---------------------------------------------------------------------------
# Primal-dual interior-point solver
# ---------------------------------------------------------------------------

class _IpWork:
    """Compiled evaluation workspace for one NlpProblem structure."""

    def __init__(self, p: NlpProblem):
        self.p = p
        n = len(p.variables)
        self.n = n
        self.obj = ResidualSystem(p.variables, p.params, [p.objective])
        self.eq = ResidualSystem(p.variables, p.params, list(p.eq)) \
            if p.eq else None
        self.ineq = ResidualSystem(p.variables, p.params, list(p.ineq)) \
            if p.ineq else None
        self.mE = len(p.eq)
        self.mI = len(p.ineq)
        yv = [var(f"_y_{i}") for i in range(self.mE)]
        zv = [var(f"_z_{i}") for i in range(self.mI)]
        lag = p.objective
        if p.eq:
            lag = lag - esum([yv[i] * as_expr(p.eq[i])
                              for i in range(self.mE)])
        if p.ineq:
            lag = lag - esum([zv[i] * as_expr(p.ineq[i])
                              for i in range(self.mI)])
        entries = list(hessian_entries(lag, list(p.variables)))
        self.h_rows = np.array([e[0] for e in entries], dtype=int)
        self.h_cols = np.array([e[1] for e in entries], dtype=int)
        self.h_nnz = len(entries)
        self.h_fn = compile_evaluator(
            list(p.variables), list(p.params) + yv + zv,
            [e[2] for e in entries]) if entries else None
        self.lower = np.isfinite(p.lb)
        self.upper = np.isfinite(p.ub)

    def hessian(self, w, params, y, z) -> sp.csc_matrix:
        if self.h_fn is None:
            return sp.csc_matrix((self.n, self.n))
        pfull = np.concatenate([params, y, z])
        vals = self.h_fn(w, pfull, np.empty(self.h_nnz))
        n = self.n
        H = sp.coo_matrix((vals, (self.h_rows, self.h_cols)), shape=(n, n))
        strict = self.h_rows != self.h_cols
        H = H + sp.coo_matrix((vals[strict],
                               (self.h_cols[strict], self.h_rows[strict])),
                              shape=(n, n))
        return H.tocsc()


def _ip_work(p: NlpProblem) -> _IpWork:
    work = getattr(p, "_ip_work", None)
    if work is None:
        work = _IpWork(p)
        p._ip_work = work
    return work


def ip_solve_nlp(p: NlpProblem, w0, params=(), tol: float = 1e-8,
                 max_iter: int = 300, mu0: float = 1e-1,
                 y0=None, z0=None, trace=None) -> Tuple[np.ndarray, IpReport]:
    """Primal-dual interior-point method with log barrier, fraction-to-
    boundary step rule and merit-function backtracking.

    `trace`, if given, is called once per iteration with a dict of solver
    internals (iteration, KKT error, barrier parameter, step size,
    regularization); intended for diagnostics.
    """
    if p.comp_pairs:
        raise ValueError("ip_solve_nlp expects a smooth problem; relax the "
                         "complementarity pairs first")
    work = _ip_work(p)
    n, mE, mI = work.n, work.mE, work.mI
    params = np.asarray(params, dtype=float)
    lb, ub = p.lb, p.ub
    lo, up = work.lower, work.upper
    push = 1e-8

    w = np.clip(np.asarray(w0, dtype=float).copy(),
                np.where(lo, lb + push, -np.inf),
                np.where(up, ub - push, np.inf))
    mu = mu0
    cI = work.ineq.residual(w, params) if mI else np.zeros(0)
    s = np.maximum(cI, 1e-4)
    y = np.zeros(mE) if y0 is None else np.asarray(y0, dtype=float).copy()
    z = mu / s if z0 is None else np.maximum(
        np.asarray(z0, dtype=float).copy(), 1e-10)
    zL = np.where(lo, mu / np.maximum(w - lb, push), 0.0)
    zU = np.where(up, mu / np.maximum(ub - w, push), 0.0)
    nu = 1.0
    delta0 = 0.0

    def eval_all(wv):
        f = work.obj.residual(wv, params)[0]
        g = work.obj.jacobian(wv, params)[0]
        cE = work.eq.residual(wv, params) if mE else np.zeros(0)
        JE = work.eq.jacobian(wv, params) if mE else np.zeros((0, n))
        cIv = work.ineq.residual(wv, params) if mI else np.zeros(0)
        JI = work.ineq.jacobian(wv, params) if mI else np.zeros((0, n))
        return f, g, cE, JE, cIv, JI

    def kkt_error(g, cE, cIv, JE, JI, sv, yv, zv, zLv, zUv, mu_ref):
        rd = g.copy()
        if mE:
            rd -= JE.T @ yv
        if mI:
            rd -= JI.T @ zv
        rd -= zLv
        rd += zUv
        parts = [np.max(np.abs(rd)) if n else 0.0]
        if mE:
            parts.append(np.max(np.abs(cE)))
        if mI:
            parts.append(np.max(np.abs(cIv - sv)))
            parts.append(np.max(np.abs(sv * zv - mu_ref)))
        if np.any(lo):
            parts.append(np.max(np.abs((w - lb)[lo] * zLv[lo] - mu_ref)))
        if np.any(up):
            parts.append(np.max(np.abs((ub - w)[up] * zUv[up] - mu_ref)))
        kkt_error.parts = parts
        return max(parts)

    def merit(wv, sv):
        try:
            f = work.obj.residual(wv, params)[0]
            cE = work.eq.residual(wv, params) if mE else np.zeros(0)
            cIv = work.ineq.residual(wv, params) if mI else np.zeros(0)
        except EvaluationError:
            return np.inf
        if mI and np.any(sv <= 0):
            return np.inf
        if (np.any((wv - lb)[lo] <= 0) or np.any((ub - wv)[up] <= 0)):
            return np.inf
        val = f + nu * (np.sum(np.abs(cE)) + np.sum(np.abs(cIv - sv)))
        if mI:
            val -= mu * np.sum(np.log(sv))
        if np.any(lo):
            val -= mu * np.sum(np.log((wv - lb)[lo]))
        if np.any(up):
            val -= mu * np.sum(np.log((ub - wv)[up]))
        return val

    it = 0
    message = ""
    while it < max_iter:
        f, g, cE, JE, cIv, JI = eval_all(w)
        err0 = kkt_error(g, cE, cIv, JE, JI, s, y, z, zL, zU, 0.0)
        if err0 <= tol:
            return w, IpReport(True, it, err0, mu, y, z)
        err_mu = kkt_error(g, cE, cIv, JE, JI, s, y, z, zL, zU, mu)
        if err_mu <= 10.0 * mu and mu > tol / 100.0:
            mu = max(tol / 100.0, min(0.2 * mu, mu ** 1.5))
            continue

        dlo = np.where(lo, zL / np.maximum(w - lb, 1e-14), 0.0)
        dup = np.where(up, zU / np.maximum(ub - w, 1e-14), 0.0)
        rhs1 = -(g - (JE.T @ y if mE else 0.0) - (JI.T @ z if mI else 0.0)
                 - np.where(lo, mu / np.maximum(w - lb, 1e-14), 0.0)
                 + np.where(up, mu / np.maximum(ub - w, 1e-14), 0.0))
        rhs = np.concatenate([rhs1, -cE, (mu / z - cIv) if mI
                              else np.zeros(0)])
        delta = delta0
        step = None
        lu = None
        # large constraint multipliers (penalty costs, tight relaxations)
        # push the needed convexification up to ~nu, so the escalation
        # range must cover several orders beyond the problem scale
        for _ in range(24):
            W = work.hessian(w, params, y, z) \
                + sp.diags(dlo + dup + delta, 0, shape=(n, n), format="csc")
            blocks = [[W,
                       -sp.csc_matrix(JE.T) if mE else None,
                       -sp.csc_matrix(JI.T) if mI else None]]
            if mE:
                blocks.append([sp.csc_matrix(JE), None, None])
            if mI:
                blocks.append([sp.csc_matrix(JI), None,
                               sp.diags(s / z, 0, format="csc")])
            K = sp.bmat([[b for b, keep in zip(row, (True, mE, mI)) if keep]
                         for row in blocks], format="csc")
            try:
                lu = splu(K)
                step = lu.solve(rhs)
            except RuntimeError:
                step = None
            if step is not None and np.all(np.isfinite(step)):
                # Guard against indefinite Hessian blocks: the factorization
                # succeeds even when W has negative curvature, but the step
                # is then an ascent direction for the merit function.
                dwv = step[:n]
                curv = float(dwv @ (W @ dwv))
                if curv >= -1e-12 * max(1.0, float(dwv @ dwv)):
                    break
            delta = 1e-8 if delta == 0.0 else 10.0 * delta
            step = None
        if step is None:
            return w, IpReport(False, it, err0, mu, y, z,
                               "linear solver failure")

        def directions(stepv):
            dw = stepv[:n]
            dy = stepv[n:n + mE]
            dz = stepv[n + mE:]
            ds = (JI @ dw + cIv - s) if mI else np.zeros(0)
            dzL = np.where(lo, mu / np.maximum(w - lb, 1e-14) - zL
                           - dlo * dw, 0.0)
            dzU = np.where(up, mu / np.maximum(ub - w, 1e-14) - zU
                           + dup * dw, 0.0)
            return dw, dy, dz, ds, dzL, dzU

        dw, dy, dz, ds, dzL, dzU = directions(step)

        tau = max(0.99, 1.0 - mu)

        def max_step(vals, dirs):
            neg = dirs < 0
            if not np.any(neg):
                return 1.0
            return min(1.0, float(np.min(-tau * vals[neg] / dirs[neg])))

        def primal_alpha(dw_, ds_):
            a = 1.0
            if mI:
                a = min(a, max_step(s, ds_))
            if np.any(lo):
                a = min(a, max_step((w - lb)[lo], dw_[lo]))
            if np.any(up):
                a = min(a, max_step((ub - w)[up], -dw_[up]))
            return a

        def dual_alpha(dz_, dzL_, dzU_):
            a = 1.0
            if mI:
                a = min(a, max_step(z, dz_))
            if np.any(lo):
                a = min(a, max_step(zL[lo], dzL_[lo]))
            if np.any(up):
                a = min(a, max_step(zU[up], dzU_[up]))
            return a

        alpha_p = primal_alpha(dw, ds)
        # the l1 penalty weight must dominate the multipliers, but a past
        # dual spike must not permanently freeze the step length, so nu
        # follows the multipliers down again once they recover
        nu_req = 1.1 * (np.max(np.abs(y), initial=0.0)
                        + np.max(np.abs(z), initial=0.0)) + 1.0
        nu = nu_req if (nu_req > nu or nu_req < 0.1 * nu) else nu
        m0 = merit(w, s)
        # slightly non-monotone acceptance: near convergence the per-step
        # decrease drops below floating-point resolution of the merit value
        m_acc = m0 + 1e-9 * max(1.0, abs(m0))
        alpha = alpha_p
        accepted = False
        if merit(w + alpha * dw, s + alpha * ds) < m_acc:
            accepted = True
        else:
            # second-order correction: highly curved constraints (the step
            # equilibration products especially) reject full steps that a
            # constraint-curvature correction rescues, avoiding merit creep
            try:
                w_t = w + alpha * dw
                cE_t = work.eq.residual(w_t, params) if mE else np.zeros(0)
                cI_t = work.ineq.residual(w_t, params) if mI else np.zeros(0)
                rhs_soc = np.concatenate([
                    rhs1, -cE_t + alpha * (JE @ dw) if mE else np.zeros(0),
                    (mu / z - cI_t + alpha * (JI @ dw)) if mI
                    else np.zeros(0)])
                soc = lu.solve(rhs_soc)
            except (EvaluationError, RuntimeError):
                soc = None
            if soc is not None and np.all(np.isfinite(soc)):
                dirs = directions(soc)
                a_soc = primal_alpha(dirs[0], dirs[3])
                if merit(w + a_soc * dirs[0], s + a_soc * dirs[3]) \
                        < m_acc:
                    dw, dy, dz, ds, dzL, dzU = dirs
                    alpha = a_soc
                    accepted = True
        if not accepted:
            for _ in range(29):
                alpha *= 0.5
                if merit(w + alpha * dw, s + alpha * ds) < m_acc:
                    accepted = True
                    break
        alpha_d = dual_alpha(dz, dzL, dzU)
        if trace is not None:
            trace(dict(it=it, kkt=err0, mu=mu, alpha=alpha,
                       alpha_p=alpha_p, delta0=delta0, delta=delta,
                       accepted=accepted, merit=m0, nu=nu,
                       kkt_parts=list(getattr(kkt_error, "parts", ())),
                       feas_eq=float(np.max(np.abs(cE), initial=0.0))))
        if not accepted:
            # a rejected direction means the local quadratic model was too
            # optimistic: re-solve from the same iterate with a larger
            # persistent regularization instead of crawling
            delta0 = 1e-4 if delta0 == 0.0 else 10.0 * delta0
            it += 1
            if delta0 > 1e10:
                return w, IpReport(False, it, err0, mu, y, z,
                                   "line search failure")
            continue
        if delta0 > 0.0:
            delta0 = 0.0 if delta0 <= 1e-4 else delta0 / 100.0
        w = w + alpha * dw
        if mI:
            s = s + alpha * ds
            z = np.maximum(z + alpha_d * dz, 1e-16)
        # equality multipliers move with the primal step: a full dual step
        # against a damped primal one lets y spike on near-singular KKT
        # systems, which inflates nu and stalls the line search
        y = y + alpha * dy
        zL = np.where(lo, np.maximum(zL + alpha_d * dzL, 1e-16), 0.0)
        zU = np.where(up, np.maximum(zU + alpha_d * dzU, 1e-16), 0.0)
        it += 1
    f, g, cE, JE, cIv, JI = eval_all(w)
    err0 = kkt_error(g, cE, cIv, JE, JI, s, y, z, zL, zU, 0.0)
    return w, IpReport(err0 <= tol, it, err0, mu, y, z,
                       "" if err0 <= tol else "iteration limit")


# ---------------------------------------------------------------------------
# MPCC homotopy
# ---------------------------------------------------------------------------

def homotopy_solve(p: NlpProblem, opts: Optional[HomotopyOptions], w0,
                   params=()) -> Tuple[np.ndarray, SolveReport]:
    """Outer homotopy over sigma for an MPCC: relax once with sigma as an
    extra parameter, then solve the smooth NLP for a decreasing sigma
    sequence, warm-starting each stage from the previous solution."""
    opts = opts or HomotopyOptions()
    t0 = time.perf_counter()
    params = np.asarray(params, dtype=float)
    w = np.asarray(w0, dtype=float).copy()
    report = SolveReport(False, np.nan)

    if not p.comp_pairs and not p.comp_rows:
        w, irep = ip_solve_nlp(p, w, params, tol=opts.comp_tol,
                               max_iter=opts.max_inner)
        report.converged = irep.converged
        report.sigma_final = 0.0
        report.comp_residual = 0.0
        report.iterations = irep.iterations
        report.residual_norms.append(irep.kkt_residual)
        report.wall_time = time.perf_counter() - t0
        report.message = irep.message
        return w, report

    cached = getattr(p, "_relaxed", None)
    if cached is None or cached[1] != opts.mode:
        sig = var("_sigma_h")
        relaxed = relax_complementarities(p, sig, opts.mode)
        relaxed = NlpProblem(relaxed.variables,
                             list(p.params) + [sig], relaxed.objective,
                             relaxed.eq, relaxed.ineq, (),
                             relaxed.lb, relaxed.ub)
        p._relaxed = (relaxed, opts.mode)
    relaxed = p._relaxed[0]
    pair_sys = getattr(p, "_pair_sys", None)
    if pair_sys is None:
        pair_sys = ResidualSystem(p.variables, p.params,
                                  [a * b for a, b in p.comp_pairs]
                                  + list(p.comp_rows))
        p._pair_sys = pair_sys

    sigma = opts.fixed_sigma if opts.fixed_sigma is not None else opts.sigma0
    y = z = None
    outer = 0
    retries = 0
    comp_prev = sigma_prev = None
    while True:
        pfull = np.concatenate([params, [sigma]])
        tol_inner = max(1e-9, min(1e-6, sigma * 1e-2))
        w_new, irep = ip_solve_nlp(relaxed, w, pfull, tol=tol_inner,
                                   max_iter=opts.max_inner, y0=y, z0=z)
        comp = float(np.max(np.abs(pair_sys.residual(w_new, params)),
                            initial=0.0))
        stage_ok = irep.converged or irep.kkt_residual <= 100.0 * tol_inner
        record = dict(stage=outer, sigma=sigma, tol=tol_inner,
                      kkt=irep.kkt_residual, comp=comp,
                      iterations=irep.iterations, converged=bool(stage_ok))
        report.trace.append(record)
        report.residual_norms.append(irep.kkt_residual)
        report.iterations += irep.iterations
        _emit(opts, record)
        if not stage_ok:
            # back off: retry from the last accepted iterate at the
            # geometric mean of the last good sigma and the failed one
            if sigma_prev is not None and retries < 3 \
                    and sigma_prev > sigma * 1.0001 \
                    and opts.fixed_sigma is None:
                retries += 1
                sigma = math.sqrt(sigma * sigma_prev)
                continue
            # inexact stage: early stages need not be solved to full
            # precision -- if the iterate is moderately stationary, carry
            # it to the next stage, where the tighter relaxation usually
            # restores fast local convergence.  Final acceptance is still
            # guarded by the complementarity check below.
            if sigma > opts.sigma_end and opts.fixed_sigma is None \
                    and irep.kkt_residual <= 1e-2:
                record["inexact"] = True
                w, y, z = w_new, irep.y, irep.z
                comp_prev, sigma_prev = comp, sigma
                retries = 0
                outer += 1
                if outer >= opts.max_outer:
                    report.sigma_final = sigma
                    report.comp_residual = comp
                    report.message = "outer iteration limit"
                    break
                sigma = max(sigma * opts.kappa, opts.sigma_end)
                continue
            # keep the last accepted iterate; deep in the homotopy the
            # relaxation multipliers scale like 1/sigma and a late stage
            # can diverge after earlier stages already met the target
            if comp_prev is not None and comp_prev <= opts.comp_tol:
                report.converged = True
                report.sigma_final = sigma_prev
                report.comp_residual = comp_prev
                report.message = (f"stopped early: inner NLP failed at "
                                  f"sigma={sigma:g}, previous stage meets "
                                  f"comp_tol")
            else:
                report.sigma_final = sigma
                report.comp_residual = comp if comp_prev is None \
                    else comp_prev
                report.message = f"inner NLP failed at sigma={sigma:g}: " \
                                 f"{irep.message}"
                if comp_prev is None:
                    w = w_new
            report.wall_time = time.perf_counter() - t0
            return w, report
        w, y, z = w_new, irep.y, irep.z
        comp_prev, sigma_prev = comp, sigma
        retries = 0
        outer += 1
        if opts.fixed_sigma is not None or sigma <= opts.sigma_end \
                or outer >= opts.max_outer:
            report.sigma_final = sigma
            report.comp_residual = comp
            report.converged = (opts.fixed_sigma is not None
                                or comp <= opts.comp_tol)
            if not report.converged:
                report.message = "complementarity residual above tolerance"
            break
        sigma = max(sigma * opts.kappa, opts.sigma_end)
    report.wall_time = time.perf_counter() - t0
    return w, report
