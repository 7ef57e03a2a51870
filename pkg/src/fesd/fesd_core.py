"""Finite elements with switch detection: constraint assembly.

Extends the fixed-step discretization of :mod:`fesd.rk_core` by letting the
step sizes h_n be unknowns and adding

* boundary-multiplier continuity (the lambda/mu values at a shared element
  boundary are literally the same unknowns),
* cross complementarity conditions coupling theta stage values with all
  lambda values of the same element (including boundary values), which force
  active-set changes onto element boundaries,
* step equilibration rows (h_n - h_{n-1}) * eta_n that remove the spurious
  step-size freedom away from switches, and
* the total-time row sum(h) - T.

The resulting system is over-determined (n_Z + 2 N_FE - 1 residuals for
n_Z + N_FE unknowns); at a solution with a fixed active set the surplus rows
are implied by the pointwise complementarities.  For simulation a *square*
smoothed companion system is assembled: each internal boundary contributes a
single merged row

    (h_n - h_{n-1}) * tanh(eta_n) + (cross_n - K_n * sigma),

where K_n counts the product terms in the aggregated cross entry.  With the
smoothed C-function every such product equals approximately sigma at a
no-switch solution, so the merged row enforces step equilibration there; at
a switch eta_n = O(sigma) and the row pins the switch location instead.  An
active-set polish on the reduced binding system recovers the exact
(sigma = 0) solution afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dcs_stewart import StewartDcs, algebraic_point
from .pss_model import PssModel
from .rk_core import (ButcherTableau, DcsSymbolics, _element_rows, _Layout,
                      smoothed_fb)
from .symbolics import (Expr, ResidualSystem, esum, substitute,
                        tanh as etanh, var)

__all__ = ["FesdOptions", "FesdProblem", "SwitchIndicators", "PairGroup",
           "precompute_initial_multipliers", "cross_complementarity",
           "switch_indicators", "step_equilibration", "assemble_fesd",
           "boundary_lp_extension"]


def _sum(terms):
    if any(isinstance(t, Expr) for t in terms):
        return esum(terms)
    return math.fsum(terms) if terms else 0.0


def _tanh(x):
    return etanh(x) if isinstance(x, Expr) else math.tanh(x)


def _prod(terms):
    return reduce(lambda a, b: a * b, terms)


def precompute_initial_multipliers(model: PssModel, x0):
    """Boundary multipliers at the start of the interval: mu = min_i g_i(x0)
    and lambda = g(x0) - mu e, per subsystem.  These are data, not unknowns.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    pt = algebraic_point(StewartDcs(model), x0)
    return [np.asarray(l, dtype=float) for l in pt.lam], np.array(pt.mu)


def _element_cross_pairs(theta_el, lam_el, skip_left=False):
    """Cross factor pairs of one element: (theta_{m,i}, lambda_{m',i}) for
    all m' != m, componentwise."""
    pairs = []
    n_s = len(theta_el)
    for m in range(1, n_s + 1):
        for mp in range(len(lam_el)):
            if mp == m or (skip_left and mp == 0):
                continue
            pairs.extend(zip(theta_el[m - 1], lam_el[mp]))
    return pairs


def cross_complementarity(theta_stages, lam_values, mode="aggregated",
                          skip_first_left=False):
    """Cross complementarity residuals.

    `theta_stages[n][m-1]` is the flat theta vector of stage m on element n;
    `lam_values[n]` lists the flat lambda vectors of element n in time order:
    left boundary value first, then the stage values (then, for schemes whose
    last node is interior, the right boundary value).

    Aggregated mode returns one scalar per internal boundary, pairing the two
    neighboring elements; sparse mode returns every product separately.
    """
    n_el = len(theta_stages)
    if len(lam_values) != n_el:
        raise ValueError("theta and lambda stacks disagree in element count")
    if mode not in ("aggregated", "sparse"):
        raise ValueError(f"unknown cross-complementarity mode {mode!r}")
    per_element = [
        [a * b for a, b in _element_cross_pairs(
            theta_stages[n], lam_values[n],
            skip_left=(n == 0 and skip_first_left))]
        for n in range(n_el)]
    if mode == "sparse":
        return [t for terms in per_element for t in terms]
    return [_sum(per_element[n - 1] + per_element[n])
            for n in range(1, n_el)]


@dataclass
class SwitchIndicators:
    """Switch indicator data of one internal element boundary."""

    sigma_lam_b: list
    sigma_lam_f: list
    sigma_theta_b: list
    sigma_theta_f: list
    pi_lam: list
    pi_theta: list
    upsilon: list
    eta: object                      # scalar; Expr or float


def switch_indicators(theta_stages, lam_values) -> List[SwitchIndicators]:
    """Backward/forward sums, products and the scalar eta per internal
    boundary.  eta_n is zero exactly when an active-set change occurs at the
    boundary, strictly positive otherwise."""
    out = []
    n_el = len(theta_stages)
    for n in range(1, n_el):
        slb = [_sum(vals) for vals in zip(*lam_values[n - 1])]
        slf = [_sum(vals) for vals in zip(*lam_values[n])]
        stb = [_sum(vals) for vals in zip(*theta_stages[n - 1])]
        stf = [_sum(vals) for vals in zip(*theta_stages[n])]
        pil = [a * b for a, b in zip(slb, slf)]
        pit = [a * b for a, b in zip(stb, stf)]
        ups = [a + b for a, b in zip(pil, pit)]
        out.append(SwitchIndicators(slb, slf, stb, stf, pil, pit, ups,
                                    _prod(ups)))
    return out


def step_equilibration(h, theta_stages, lam_values, mode="tanh"):
    """Rows (h_n - h_{n-1}) * eta_n for the internal boundaries.  `mode`
    selects the raw product indicator ("equality") or its tanh rescaling
    ("tanh", default)."""
    if mode not in ("equality", "tanh"):
        raise ValueError(f"unknown step equilibration mode {mode!r}")
    if len(h) != len(theta_stages):
        raise ValueError("need one step size per element")
    ind = switch_indicators(theta_stages, lam_values)
    rows = []
    for n in range(1, len(h)):
        eta = ind[n - 1].eta
        if mode == "tanh":
            eta = _tanh(eta)
        rows.append((h[n] - h[n - 1]) * eta)
    return rows


def boundary_lp_extension(sym: DcsSymbolics, tableau: ButcherTableau,
                          x_exprs, theta_b, lam_b, mu_b, sigma):
    """Parametric-LP stationarity rows tying boundary multipliers to the
    element's end state, for schemes whose last stage node is interior.

    Returns (linear_rows, comp_pairs): the rows g(x) - lambda - mu e and
    1 - e'theta per subsystem, and the (theta, lambda) complementarity pairs.
    """
    if tableau.c_ns_is_one:
        raise ValueError("boundary LP extension applies only to tableaus "
                         "whose last node is interior (c_ns != 1)")
    g_all = sym.g_at(x_exprs)
    rows, pairs = [], []
    for k in range(sym.n_sub):
        nf = sym.n_f[k]
        rows.extend(g_all[k][j] - lam_b[k][j] - mu_b[k] for j in range(nf))
        rows.append(1.0 - esum(theta_b[k]))
        pairs.extend((theta_b[k][j], lam_b[k][j]) for j in range(nf))
    return rows, pairs


@dataclass
class FesdOptions:
    cross_mode: str = "aggregated"       # "aggregated" | "sparse"
    step_mode: str = "tanh"              # "tanh" | "equality" | "off"
    h_min: float = 0.0
    h_max: Optional[float] = None        # default 2 T / N_FE


@dataclass(frozen=True)
class PairGroup:
    """One (theta, lambda) stage group: element, stage (1..n_s), subsystem."""

    element: int
    stage: int
    subsystem: int
    theta: Tuple[Expr, ...]
    lam: Tuple[Expr, ...]


class FesdProblem:
    """Assembled FESD system for one control/simulation interval.

    Unknowns: Z = (x_0..x_N, per element V/Theta/Lambda/M, boundary LP
    triples for interior-node schemes) and the step sizes h.  Parameters:
    (sigma, s0, q, T, mu00, K_1..K_{N-1}).  `system` is the full
    over-determined residual (exact at sigma = 0); `newton_system` is the
    square smoothed companion used by the simulation homotopy.
    """

    def __init__(self, model: PssModel, N_FE: int, tableau: ButcherTableau,
                 options: Optional[FesdOptions] = None):
        if N_FE < 1:
            raise ValueError("N_FE must be >= 1")
        self.model = model
        self.sym = sym = DcsSymbolics(model)
        self.N_FE = N_FE
        self.tableau = tableau
        self.options = opts = options or FesdOptions()
        n_s, n_x = tableau.n_s, sym.n_x
        boundary_triples = not tableau.c_ns_is_one

        # --- parameters -------------------------------------------------
        sigma = var("sigma")
        s0 = [var(f"s0_{r}") for r in range(n_x)]
        q = [var(f"q_{j}") for j in range(len(sym.u_vars))]
        Tp = var("T")
        mu00 = [var(f"mu00_{k}") for k in range(sym.n_sub)]
        Kp = [var(f"K_{n}") for n in range(1, N_FE)]
        self.param_names = [sigma] + s0 + q + [Tp] + mu00 + Kp
        self.sigma_param, self.s0_params, self.q_params = sigma, s0, q
        g_s0 = sym.g_at(s0)
        lam00 = [[g_s0[k][j] - mu00[k] for j in range(sym.n_f[k])]
                 for k in range(sym.n_sub)]
        self.lam00_exprs = lam00

        # --- unknowns and per-element rows ------------------------------
        lay = _Layout()
        self.layout = lay
        x0 = lay.add("x0", n_x)
        rows_core: List[Expr] = [x0[r] - s0[r] for r in range(n_x)]
        self.pair_groups: List[PairGroup] = []
        self.boundary_groups: List[Dict] = []
        self.element_vars = []
        theta_stages, lam_values = [], []
        self._elements = []
        x_left = x0
        h_names = [var(f"h_{n}") for n in range(N_FE)]
        for n in range(N_FE):
            V = [lay.add(f"V{n}_{i}", n_x) for i in range(n_s)]
            Th = [[lay.add(f"Th{n}_{i}_{k}", sym.n_f[k])
                   for i in range(n_s)] for k in range(sym.n_sub)]
            La = [[lay.add(f"La{n}_{i}_{k}", sym.n_f[k])
                   for i in range(n_s)] for k in range(sym.n_sub)]
            Mu = [lay.add(f"Mu{n}_{i}", sym.n_sub) for i in range(n_s)]
            x_next = lay.add(f"x{n + 1}", n_x)
            er = _element_rows(sym, tableau, x_left, V, Th, La, Mu,
                               h_names[n], x_next, q)
            self._elements.append(er)
            rows_core.extend(er.dyn)
            rows_core.extend(er.lp_lin)
            rows_core.extend(er.step)
            for i in range(n_s):
                for k in range(sym.n_sub):
                    self.pair_groups.append(PairGroup(
                        n, i + 1, k, tuple(Th[k][i]), tuple(La[k][i])))
            self.element_vars.append(dict(V=V, Th=Th, La=La, Mu=Mu,
                                          x_left=x_left, x_next=x_next))
            # flat theta/lambda stacks for cross comp and step equilibration
            theta_stages.append([
                [t for k in range(sym.n_sub) for t in Th[k][i]]
                for i in range(n_s)])
            if n == 0:
                left = [l for lk in lam00 for l in lk]
            lams = [left] + [
                [l for k in range(sym.n_sub) for l in La[k][i]]
                for i in range(n_s)]
            if boundary_triples and n < N_FE - 1:
                thb = [lay.add(f"Thb{n}_{k}", sym.n_f[k])
                       for k in range(sym.n_sub)]
                lab = [lay.add(f"Lab{n}_{k}", sym.n_f[k])
                       for k in range(sym.n_sub)]
                mub = lay.add(f"Mub{n}", sym.n_sub)
                brow, bpairs = boundary_lp_extension(sym, tableau, x_next,
                                                     thb, lab, mub, sigma)
                rows_core.extend(brow)
                self.boundary_groups.append(dict(thb=thb, lab=lab, mub=mub,
                                                 pairs=bpairs, element=n))
                flat_lab = [l for lk in lab for l in lk]
                lams.append(flat_lab)
                left = flat_lab
            else:
                left = lams[-1]      # c_ns = 1: exit stage is the boundary
            lam_values.append(lams)
            x_left = x_next
        h = lay.add("h", N_FE)
        self.h_slice = lay.slices["h"]
        # replace the placeholder h names by the layout-owned variables
        hmap = dict(zip(h_names, h))
        rows_core = substitute(rows_core, hmap)
        self.theta_stages = theta_stages
        self.lam_values = lam_values
        self.rows_core = rows_core
        self.variables = list(lay.names)

        # --- FESD-specific rows -----------------------------------------
        self._entry_terms = []
        per_el = [_element_cross_pairs(theta_stages[n], lam_values[n],
                                       skip_left=(n == 0 and
                                                  boundary_triples))
                  for n in range(N_FE)]
        self.cross_entries = []
        for n in range(1, N_FE):
            terms = [a * b for a, b in per_el[n - 1] + per_el[n]]
            self._entry_terms.append(terms)
            self.cross_entries.append(esum(terms))
        self.cross_pairs = [p for pl in per_el for p in pl]
        self.indicators = switch_indicators(theta_stages, lam_values)
        self.eta_exprs = [ind.eta for ind in self.indicators]
        if opts.step_mode == "off":
            self.step_rows = []
        else:
            self.step_rows = step_equilibration(
                list(h), theta_stages, lam_values,
                mode=("equality" if opts.step_mode == "equality"
                      else "tanh"))
        self.sum_row = esum(list(h)) - Tp
        self.stage_pairs = [(t, l) for er in self._elements
                            for t, l in er.comp_pairs]
        self.comp_pairs = (self.stage_pairs
                           + [p for g in self.boundary_groups
                              for p in g["pairs"]])
        # cross products as a standalone residual stack: the merged Newton
        # rows can absorb nonzero cross mass into a step difference, so
        # candidate solutions are validated against this system afterwards
        self.cross_system = ResidualSystem(
            self.variables, self.param_names,
            [a * b for a, b in self.cross_pairs])

        # --- stacked systems --------------------------------------------
        std_rows = [x0[r] - s0[r] for r in range(n_x)]
        for n, er in enumerate(self._elements):
            std_rows.extend(substitute(er.flatten(sigma), hmap))
        for g in self.boundary_groups:
            lin, pairs = boundary_lp_extension(
                sym, tableau, self.element_vars[g["element"]]["x_next"],
                g["thb"], g["lab"], g["mub"], sigma)
            std_rows.extend(lin)
            std_rows.extend(smoothed_fb(a, b, sigma) for a, b in pairs)
        self._std_rows = std_rows
        self.n_Z = len(self.variables) - N_FE
        if len(std_rows) != self.n_Z:
            raise AssertionError("G_std must have n_Z rows")
        self.system = ResidualSystem(
            self.variables, self.param_names,
            std_rows + self.cross_entries + self.step_rows + [self.sum_row])
        merged = []
        for n in range(1, N_FE):
            merged.append((h[n] - h[n - 1]) * etanh(self.eta_exprs[n - 1])
                          + (self.cross_entries[n - 1] - Kp[n - 1] * sigma))
        self.newton_system = ResidualSystem(
            self.variables, self.param_names,
            std_rows + merged + [self.sum_row])
        if self.newton_system.n_res != self.newton_system.n:
            raise AssertionError("smoothed companion system must be square")
        self._structural_K = [len(t) for t in self._entry_terms]
        self._lam00_in_entry1 = (N_FE >= 2 and not boundary_triples)

    # --- parameter packing and numeric helpers --------------------------
    def pack_params(self, sigma: float, s0, q, T: float) -> np.ndarray:
        s0 = np.asarray(s0, dtype=float).ravel()
        lam00, mu00 = precompute_initial_multipliers(self.model, s0)
        q = np.zeros(len(self.q_params)) if q is None else np.asarray(
            q, dtype=float).ravel()
        K = np.array(self._structural_K, dtype=float)
        if self._lam00_in_entry1:
            # products theta * lam00 vanish (rather than ~ sigma) in the
            # components active at s0, where lam00 = 0
            n_zero = int(sum(np.sum(l <= 1e-9) for l in lam00))
            K[0] -= self.tableau.n_s * n_zero
        return np.concatenate([[sigma], s0, q, [T], mu00, K])

    def initial_guess(self, s0, q=None, T: float = 1.0) -> np.ndarray:
        """Cold start: states replicated, theta and multipliers from the LP
        at s0 (pushed slightly into the simplex interior), uniform steps
        h = T / N_FE."""
        sym = self.sym
        s0 = np.asarray(s0, dtype=float).ravel()
        pt = algebraic_point(sym.dcs, s0)
        push = 1e-2
        theta0 = [(1.0 - push) * pt.theta[k] + push / sym.n_f[k]
                  for k in range(sym.n_sub)]
        v0 = sym.dcs.rhs(s0, theta0, q)
        w = np.zeros(len(self.variables))
        sl = self.layout.slices
        w[sl["x0"]] = s0
        for n in range(self.N_FE):
            for i in range(self.tableau.n_s):
                w[sl[f"V{n}_{i}"]] = v0
                for k in range(sym.n_sub):
                    w[sl[f"Th{n}_{i}_{k}"]] = theta0[k]
                    w[sl[f"La{n}_{i}_{k}"]] = pt.lam[k]
                w[sl[f"Mu{n}_{i}"]] = np.array(pt.mu)
            w[sl[f"x{n + 1}"]] = s0
            if f"Thb{n}_0" in sl:
                for k in range(sym.n_sub):
                    w[sl[f"Thb{n}_{k}"]] = theta0[k]
                    w[sl[f"Lab{n}_{k}"]] = pt.lam[k]
                w[sl[f"Mub{n}"]] = np.array(pt.mu)
        w[self.h_slice] = T / self.N_FE
        return w

    def bounds(self, T: float):
        """(lower, upper) variable bounds: theta, lambda >= 0 and
        h in [h_min, h_max]."""
        n = len(self.variables)
        lb = np.full(n, -np.inf)
        ub = np.full(n, np.inf)
        for tag, sl in self.layout.slices.items():
            if tag.startswith(("Th", "La")):
                lb[sl] = 0.0
        h_max = self.options.h_max
        lb[self.h_slice] = self.options.h_min
        ub[self.h_slice] = 2.0 * T / self.N_FE if h_max is None else h_max
        return lb, ub

    def states(self, w) -> np.ndarray:
        sl = self.layout.slices
        return np.array([w[sl["x0"]]] + [w[sl[f"x{n + 1}"]]
                                         for n in range(self.N_FE)])

    def steps(self, w) -> np.ndarray:
        return np.array(w[self.h_slice])

    def x_end(self, w) -> np.ndarray:
        return np.array(w[self.layout.slices[f"x{self.N_FE}"]])

    def stage_values(self, w, tag: str, n: int, i: int, k: int) -> np.ndarray:
        return np.array(w[self.layout.slices[f"{tag}{n}_{i}_{k}"]])

    def detect_supports(self, w) -> List[List[frozenset]]:
        """Per element and subsystem, the set of components whose theta
        dominates lambda (the active set of the element)."""
        out = []
        for n in range(self.N_FE):
            row = []
            for k in range(self.sym.n_sub):
                th = np.array([self.stage_values(w, "Th", n, i, k)
                               for i in range(self.tableau.n_s)])
                la = np.array([self.stage_values(w, "La", n, i, k)
                               for i in range(self.tableau.n_s)])
                row.append(frozenset(
                    int(j) for j in range(self.sym.n_f[k])
                    if th[:, j].max() > la[:, j].max()))
            out.append(row)
        return out

    def reduced_system(self, supports) -> ResidualSystem:
        """Exact binding system for fixed active sets: complementarity pairs
        replaced by support pins, equal steps across no-switch boundaries,
        boundary lambda pinned in newly-activated components at switches.
        Generally non-square; solved in the least-squares sense."""
        rows = list(self.rows_core)
        for g in self.pair_groups:
            supp = supports[g.element][g.subsystem]
            for j in range(len(g.theta)):
                rows.append(g.lam[j] if j in supp else g.theta[j])
        for bg in self.boundary_groups:
            n = bg["element"]
            for k in range(self.sym.n_sub):
                supp = supports[n][k] | supports[n + 1][k]
                for j in range(self.sym.n_f[k]):
                    rows.append(bg["lab"][k][j] if j in supp
                                else bg["thb"][k][j])
        h = [self.variables[i]
             for i in range(*self.h_slice.indices(len(self.variables)))]
        for n in range(1, self.N_FE):
            if supports[n - 1] == supports[n]:
                rows.append(h[n] - h[n - 1])
            elif self.tableau.c_ns_is_one:
                for k in range(self.sym.n_sub):
                    for j in supports[n][k] - supports[n - 1][k]:
                        # boundary value of lambda vanishes where the new
                        # element activates a component
                        rows.append(self.element_vars[n - 1]["La"][k][
                            self.tableau.n_s - 1][j])
        rows.append(self.sum_row)
        return ResidualSystem(self.variables, self.param_names, rows)


def assemble_fesd(model: PssModel, s0, q, T: float, N_FE: int,
                  tableau: ButcherTableau,
                  options: Optional[FesdOptions] = None
                  ) -> Tuple[FesdProblem, np.ndarray]:
    """Build the FESD problem and the packed parameter vector (sigma = 0)."""
    if T <= 0:
        raise ValueError("T must be positive")
    prob = FesdProblem(model, N_FE, tableau, options)
    return prob, prob.pack_params(0.0, s0, q, T)
