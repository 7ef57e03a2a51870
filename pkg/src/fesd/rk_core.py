"""Butcher tableaus and the standard (fixed-step) RK discretization.

The discretization uses the differential representation: the unknowns per
finite element are the stage derivatives V, the algebraic stage values
(Theta, Lambda, M) of the complementarity system at the stage states
x_n + h sum_j a_ij v_j, and the end state x_{n+1}.  The per-element residual
stacks

    v_i - F(x_i, q) theta_i            (stage dynamics)
    G_LP(x_i, theta_i, lambda_i, mu_i) (LP KKT at every stage state)
    x_{n+1} - x_n - h sum_i b_i v_i    (step update)

and the standard discretization chains N_FE elements with fixed step sizes.
Stage complementarities use the (optionally smoothed) Fischer-Burmeister
C-function Psi_sigma(a, b) = a + b - sqrt(a^2 + b^2 + 2 sigma), with sigma
supplied as a runtime parameter so one compiled system serves the whole
smoothing homotopy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import polynomial as npoly

from .dcs_stewart import StewartDcs
from .pss_model import PssModel, build_indicator_functions
from .symbolics import (Expr, ResidualSystem, VectorFunction, constant, esum,
                        sqrt as esqrt, substitute, var)

__all__ = ["ButcherTableau", "make_tableau", "ElementUnknowns",
           "irk_residual", "assemble_standard", "StandardSystem",
           "DcsSymbolics", "smoothed_fb"]

_FAMILIES = ("radau-iia", "gauss-legendre", "lobatto-iiia", "lobatto-iiic",
             "explicit-rk")

_ALIASES = {
    "radau": "radau-iia", "radau-iia": "radau-iia", "radauiia": "radau-iia",
    "gauss": "gauss-legendre", "gauss-legendre": "gauss-legendre",
    "legendre": "gauss-legendre",
    "lobatto-iiia": "lobatto-iiia", "lobattoiiia": "lobatto-iiia",
    "lobatto-iiic": "lobatto-iiic", "lobattoiiic": "lobatto-iiic",
    "erk": "explicit-rk", "explicit": "explicit-rk",
    "explicit-rk": "explicit-rk",
}


@dataclass(frozen=True)
class ButcherTableau:
    family: str
    n_s: int
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    order: int

    @property
    def c_ns_is_one(self) -> bool:
        return abs(self.c[-1] - 1.0) < 1e-12

    @property
    def nodes_distinct(self) -> bool:
        c = np.sort(self.c)
        return bool(np.all(np.diff(c) > 1e-12))

    @property
    def is_explicit(self) -> bool:
        return self.family == "explicit-rk"


def _lagrange_integration(c: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Collocation coefficients: a_ij = int_0^{c_i} l_j, b_j = int_0^1 l_j."""
    s = c.size
    A = np.zeros((s, s))
    b = np.zeros(s)
    for j in range(s):
        # Lagrange basis polynomial l_j over the nodes c.
        num = np.array([1.0])
        den = 1.0
        for k in range(s):
            if k == j:
                continue
            num = npoly.polymul(num, np.array([-c[k], 1.0]))
            den *= (c[j] - c[k])
        lj = num / den
        integ = npoly.polyint(lj)
        b[j] = npoly.polyval(1.0, integ)
        for i in range(s):
            A[i, j] = npoly.polyval(c[i], integ)
    return A, b


def _radau_nodes(s: int) -> np.ndarray:
    # roots of d^{s-1}/dx^{s-1} [ x^{s-1} (x-1)^s ]
    p = npoly.polymul(npoly.polypow(np.array([0.0, 1.0]), s - 1),
                     npoly.polypow(np.array([-1.0, 1.0]), s))
    for _ in range(s - 1):
        p = npoly.polyder(p)
    return np.sort(np.real(npoly.polyroots(p)))


def _gauss_nodes(s: int) -> np.ndarray:
    t, _ = np.polynomial.legendre.leggauss(s)
    return np.sort((t + 1.0) / 2.0)


def _lobatto_nodes(s: int) -> np.ndarray:
    # roots of d^{s-2}/dx^{s-2} [ x^{s-1} (x-1)^{s-1} ], includes 0 and 1
    p = npoly.polymul(npoly.polypow(np.array([0.0, 1.0]), s - 1),
                     npoly.polypow(np.array([-1.0, 1.0]), s - 1))
    for _ in range(s - 2):
        p = npoly.polyder(p)
    nodes = np.sort(np.real(npoly.polyroots(p)))
    nodes[0] = 0.0
    nodes[-1] = 1.0
    return nodes


_ERK = {
    1: (np.array([[0.0]]), np.array([1.0]), np.array([0.0])),
    2: (np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([0.5, 0.5]),
        np.array([0.0, 1.0])),
    3: (np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [-1.0, 2.0, 0.0]]),
        np.array([1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0]), np.array([0.0, 0.5, 1.0])),
    4: (np.array([[0.0, 0.0, 0.0, 0.0], [0.5, 0.0, 0.0, 0.0],
                  [0.0, 0.5, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]),
        np.array([1.0, 2.0, 2.0, 1.0]) / 6.0, np.array([0.0, 0.5, 0.5, 1.0])),
}


def _check_order_conditions(A, b, c, p):
    tol = 1e-13
    if abs(np.sum(b) - 1.0) > tol:
        raise AssertionError("order condition sum(b) = 1 violated")
    if p >= 2 and abs(b @ c - 0.5) > tol:
        raise AssertionError("order condition sum(b c) = 1/2 violated")
    if p >= 3:
        if abs(b @ c ** 2 - 1.0 / 3.0) > tol:
            raise AssertionError("order condition sum(b c^2) = 1/3 violated")
        if abs(b @ (A @ c) - 1.0 / 6.0) > tol:
            raise AssertionError("order condition sum(b A c) = 1/6 violated")


def make_tableau(family: str, n_s: int) -> ButcherTableau:
    """Construct a Butcher tableau.  Families: Radau-IIA (order 2 n_s - 1),
    Gauss-Legendre (2 n_s), Lobatto-IIIA/-IIIC (2 n_s - 2), explicit RK
    (order n_s, n_s <= 4)."""
    key = _ALIASES.get(family.strip().lower().replace("_", "-"))
    if key is None:
        raise ValueError(f"unsupported family {family!r}")
    if key == "explicit-rk":
        if n_s not in _ERK:
            raise ValueError("explicit RK supports 1 <= n_s <= 4")
        A, b, c = _ERK[n_s]
        p = n_s
    elif not 1 <= n_s <= 5:
        raise ValueError("implicit families support 1 <= n_s <= 5")
    elif key == "radau-iia":
        c = _radau_nodes(n_s)
        A, b = _lagrange_integration(c)
        p = 2 * n_s - 1
    elif key == "gauss-legendre":
        c = _gauss_nodes(n_s)
        A, b = _lagrange_integration(c)
        p = 2 * n_s
    elif key in ("lobatto-iiia", "lobatto-iiic"):
        if n_s < 2:
            raise ValueError("Lobatto methods need n_s >= 2")
        c = _lobatto_nodes(n_s)
        A, b = _lagrange_integration(c)
        if key == "lobatto-iiic":
            # Not a collocation method: rows determined by a_{i,1} = b_1 and
            # the C(n_s - 1) conditions sum_j a_ij c_j^{k-1} = c_i^k / k.
            A = np.zeros((n_s, n_s))
            A[:, 0] = b[0]
            V = np.vander(c[1:], n_s - 1, increasing=True).T  # c_j^{k-1}
            for i in range(n_s):
                rhs = np.array([c[i] ** k / k - (b[0] if k == 1 else 0.0)
                                for k in range(1, n_s)])
                A[i, 1:] = np.linalg.solve(V, rhs)
        p = 2 * n_s - 2
    tab = ButcherTableau(key, n_s, A, np.asarray(b), np.asarray(c), p)
    _check_order_conditions(tab.A, tab.b, tab.c, tab.order)
    return tab


def smoothed_fb(a: Expr, b: Expr, sigma: Expr) -> Expr:
    """Smoothed Fischer-Burmeister C-function as an expression:
    Psi_sigma(a, b) = a + b - sqrt(a^2 + b^2 + 2 sigma).

    At sigma = 0 the exact C-function is recovered; for sigma > 0 the zero
    set is the smooth hyperbola a b = sigma, a, b > 0.
    """
    return a + b - esqrt(a * a + b * b + 2.0 * sigma)


class DcsSymbolics:
    """Symbolic access to the DCS functions for residual assembly.

    Wraps a model and provides F(x, u) theta and g(x) as expressions with
    the model's canonical variables substituted by arbitrary expressions
    (e.g. RK stage states).
    """

    def __init__(self, model: PssModel):
        self.model = model
        self.dcs = StewartDcs(model)
        self.x_vars = list(model.x_vars)
        self.u_vars = list(model.u_vars)
        self.g_outputs = [build_indicator_functions(sub).outputs
                          for sub in model.subsystems]
        self.f_outputs = [[f.outputs for f in sub.f_columns]
                          for sub in model.subsystems]

    @property
    def n_x(self) -> int:
        return self.model.n_x

    @property
    def n_f(self) -> Tuple[int, ...]:
        return tuple(sub.n_f for sub in self.model.subsystems)

    @property
    def n_sub(self) -> int:
        return len(self.model.subsystems)

    @property
    def n_theta(self) -> int:
        return sum(self.n_f)

    def _subs_map(self, x_exprs, u_exprs):
        mapping = {v: e for v, e in zip(self.x_vars, x_exprs)}
        for v, e in zip(self.u_vars, u_exprs or []):
            mapping[v] = e
        return mapping

    def g_at(self, x_exprs) -> List[List[Expr]]:
        mapping = self._subs_map(x_exprs, None)
        return [substitute(list(outs), mapping) for outs in self.g_outputs]

    def f_theta_at(self, x_exprs, u_exprs,
                   theta_exprs: Sequence[Sequence[Expr]]) -> List[Expr]:
        """sum_k F_k(x, u) theta_k as n_x expressions."""
        mapping = self._subs_map(x_exprs, u_exprs)
        rows = [[] for _ in range(self.n_x)]
        for k, cols in enumerate(self.f_outputs):
            for i, col in enumerate(cols):
                col_sub = substitute(list(col), mapping)
                for r in range(self.n_x):
                    rows[r].append(theta_exprs[k][i] * col_sub[r])
        return [esum(r) for r in rows]


@dataclass
class ElementUnknowns:
    """Numeric unknowns of a single finite element (differential form)."""

    x_n: np.ndarray                      # state at the left boundary
    V: np.ndarray                        # stage derivatives, n_s x n_x
    Theta: List[np.ndarray]              # per subsystem, n_s x n_f
    Lam: List[np.ndarray]                # per subsystem, n_s x n_f
    Mu: np.ndarray                       # n_s x n_sub
    h: float
    x_next: np.ndarray

    def stage_states(self, tableau: ButcherTableau) -> np.ndarray:
        return self.x_n[None, :] + self.h * (tableau.A @ self.V)


@dataclass
class ElementRows:
    """Categorized symbolic residual rows of one finite element."""

    dyn: List[Expr]                      # v_i - F theta_i
    lp_lin: List[Expr]                   # g - lam - mu e and simplex rows
    comp_pairs: List[Tuple[Expr, Expr]]  # (theta, lam) stage pairs
    step: List[Expr]                     # x_next - x_n - h sum b_i v_i
    stage_states: List[List[Expr]]

    def flatten(self, sigma) -> List[Expr]:
        """All rows in canonical order, complementarity pairs rendered with
        the smoothed C-function."""
        rows = list(self.dyn) + list(self.lp_lin)
        rows.extend(smoothed_fb(a, b, sigma) for a, b in self.comp_pairs)
        rows.extend(self.step)
        return rows


def _element_rows(sym: DcsSymbolics, tableau: ButcherTableau,
                  x_n, V, Theta, Lam, Mu, h, x_next, u_exprs) -> ElementRows:
    """Symbolic residual rows of one element, categorized."""
    n_s, n_x = tableau.n_s, sym.n_x
    stage_states = []
    for i in range(n_s):
        stage_states.append([
            x_n[r] + h * esum([tableau.A[i, j] * V[j][r] for j in range(n_s)])
            for r in range(n_x)])
    dyn: List[Expr] = []
    for i in range(n_s):
        fi = sym.f_theta_at(stage_states[i], u_exprs,
                            [Theta[k][i] for k in range(sym.n_sub)])
        dyn.extend(V[i][r] - fi[r] for r in range(n_x))
    lp_lin: List[Expr] = []
    comp_pairs: List[Tuple[Expr, Expr]] = []
    for i in range(n_s):
        g_all = sym.g_at(stage_states[i])
        for k in range(sym.n_sub):
            nf = sym.n_f[k]
            lp_lin.extend(g_all[k][j] - Lam[k][i][j] - Mu[i][k]
                          for j in range(nf))
            lp_lin.append(1.0 - esum(Theta[k][i]))
            comp_pairs.extend((Theta[k][i][j], Lam[k][i][j])
                              for j in range(nf))
    step = [
        x_next[r] - x_n[r] - h * esum([tableau.b[i] * V[i][r]
                                       for i in range(n_s)])
        for r in range(n_x)]
    return ElementRows(dyn, lp_lin, comp_pairs, step, stage_states)


def irk_residual(model: PssModel, element: ElementUnknowns, q,
                 tableau: ButcherTableau,
                 sigma: float = 0.0) -> np.ndarray:
    """Numeric residual of a single finite element (exact C-function at
    sigma = 0)."""
    sym = DcsSymbolics(model)
    n_s, n_x = tableau.n_s, sym.n_x
    xv = [var(f"x{r}") for r in range(n_x)]
    Vv = [[var(f"v{i}_{r}") for r in range(n_x)] for i in range(n_s)]
    Th = [[[var(f"th{k}_{i}_{j}") for j in range(sym.n_f[k])]
           for i in range(n_s)] for k in range(sym.n_sub)]
    La = [[[var(f"la{k}_{i}_{j}") for j in range(sym.n_f[k])]
           for i in range(n_s)] for k in range(sym.n_sub)]
    Mu = [[var(f"mu{i}_{k}") for k in range(sym.n_sub)] for i in range(n_s)]
    hv = var("h")
    xe = [var(f"xe{r}") for r in range(n_x)]
    uv = [var(f"q{j}") for j in range(len(sym.u_vars))]
    sv = var("sigma")
    rows = _element_rows(sym, tableau, xv, Vv, Th, La, Mu, hv, xe,
                         uv).flatten(sv)
    variables = (xv + [v for Vi in Vv for v in Vi]
                 + [t for Tk in Th for Ti in Tk for t in Ti]
                 + [l for Lk in La for Li in Lk for l in Li]
                 + [m for Mi in Mu for m in Mi] + [hv] + xe + uv + [sv])
    values = np.concatenate([
        np.asarray(element.x_n, dtype=float).ravel(),
        np.asarray(element.V, dtype=float).ravel(),
        np.concatenate([np.asarray(T, dtype=float).ravel()
                        for T in element.Theta]),
        np.concatenate([np.asarray(L, dtype=float).ravel()
                        for L in element.Lam]),
        np.asarray(element.Mu, dtype=float).ravel(),
        np.array([element.h]),
        np.asarray(element.x_next, dtype=float).ravel(),
        np.zeros(0) if q is None else np.asarray(q, dtype=float).ravel(),
        np.array([sigma]),
    ])
    system = ResidualSystem(variables, (), rows)
    return system.residual(values)


class _Layout:
    """Index bookkeeping for stacked element unknowns."""

    def __init__(self):
        self.names: List[Expr] = []
        self.slices: Dict[str, slice] = {}

    def add(self, tag: str, count: int) -> List[Expr]:
        start = len(self.names)
        vs = [var(f"{tag}_{i}") for i in range(count)]
        self.names.extend(vs)
        self.slices[tag] = slice(start, start + count)
        return vs

    @property
    def n(self) -> int:
        return len(self.names)


class StandardSystem:
    """Square residual system of the fixed-step discretization.

    Unknowns Z = (x_0, then per element: V, Theta, Lambda, M, x_{n+1});
    parameters (sigma, s0, q, h).  The transition map is s1 = x_{N_FE}.
    """

    def __init__(self, model: PssModel, N_FE: int, tableau: ButcherTableau):
        if N_FE < 1:
            raise ValueError("N_FE must be >= 1")
        self.model = model
        self.sym = DcsSymbolics(model)
        self.N_FE = N_FE
        self.tableau = tableau
        sym, n_s, n_x = self.sym, tableau.n_s, self.sym.n_x

        lay = _Layout()
        self.layout = lay
        sigma = var("sigma")
        s0 = [var(f"s0_{r}") for r in range(n_x)]
        q = [var(f"q_{j}") for j in range(len(sym.u_vars))]
        hp = [var(f"hp_{n}") for n in range(N_FE)]
        self.param_names = [sigma] + s0 + q + hp

        x0 = lay.add("x0", n_x)
        rows = [x0[r] - s0[r] for r in range(n_x)]
        x_left = x0
        self.element_vars = []
        for n in range(N_FE):
            V = [lay.add(f"V{n}_{i}", n_x) for i in range(n_s)]
            Th = [[lay.add(f"Th{n}_{i}_{k}", sym.n_f[k])
                   for i in range(n_s)] for k in range(sym.n_sub)]
            La = [[lay.add(f"La{n}_{i}_{k}", sym.n_f[k])
                   for i in range(n_s)] for k in range(sym.n_sub)]
            Mu = [lay.add(f"Mu{n}_{i}", sym.n_sub) for i in range(n_s)]
            x_next = lay.add(f"x{n + 1}", n_x)
            erows = _element_rows(sym, tableau, x_left, V, Th, La, Mu,
                                  hp[n], x_next, q)
            rows.extend(erows.flatten(sigma))
            self.element_vars.append(dict(V=V, Th=Th, La=La, Mu=Mu,
                                          x_left=x_left, x_next=x_next))
            x_left = x_next
        self.system = ResidualSystem(lay.names, self.param_names, rows)
        if self.system.n_res != self.system.n:
            raise AssertionError("standard discretization must be square")

    def pack_params(self, sigma: float, s0, q, h) -> np.ndarray:
        q = np.zeros(len(self.sym.u_vars)) if q is None else np.asarray(
            q, dtype=float).ravel()
        h = np.broadcast_to(np.asarray(h, dtype=float).ravel(),
                            (self.N_FE,)) if np.size(h) == 1 else np.asarray(
            h, dtype=float)
        return np.concatenate([[sigma], np.asarray(s0, dtype=float).ravel(),
                               q, h])

    def initial_guess(self, s0, q=None) -> np.ndarray:
        """Cold start: states replicated, theta uniform, LP multipliers of
        s0, stage derivatives from the convexified field."""
        sym = self.sym
        s0 = np.asarray(s0, dtype=float).ravel()
        from .dcs_stewart import algebraic_point
        pt = algebraic_point(sym.dcs, s0)
        v0 = sym.dcs.rhs(s0, [np.full(nf, 1.0 / nf) for nf in sym.n_f], q)
        w = np.zeros(self.layout.n)
        sl = self.layout.slices
        w[sl["x0"]] = s0
        for n in range(self.N_FE):
            for i in range(self.tableau.n_s):
                w[sl[f"V{n}_{i}"]] = v0
                for k in range(sym.n_sub):
                    nf = sym.n_f[k]
                    w[sl[f"Th{n}_{i}_{k}"]] = np.full(nf, 1.0 / nf)
                    w[sl[f"La{n}_{i}_{k}"]] = pt.lam[k]
                w[sl[f"Mu{n}_{i}"]] = np.array(pt.mu)
            w[sl[f"x{n + 1}"]] = s0
        return w

    def x_end(self, w: np.ndarray) -> np.ndarray:
        return np.array(w[self.layout.slices[f"x{self.N_FE}"]])


def assemble_standard(model: PssModel, s0, q, h, N_FE: int,
                      tableau: ButcherTableau) -> Tuple[StandardSystem,
                                                        np.ndarray]:
    """Build the fixed-step system and its packed parameter vector."""
    h_arr = np.broadcast_to(np.asarray(h, dtype=float).ravel(), (N_FE,)) \
        if np.size(h) == 1 else np.asarray(h, dtype=float)
    if np.any(h_arr <= 0):
        raise ValueError("h must be positive")
    sys_ = StandardSystem(model, N_FE, tableau)
    return sys_, sys_.pack_params(0.0, s0, q, h_arr)
