"""Stewart dynamic complementarity system built from a PssModel.

Per subsystem the Filippov multipliers theta solve the parametric LP

    min_theta  g(x)' theta   s.t.  e' theta = 1,  theta >= 0,

whose KKT conditions give the algebraic part of the DCS:

    0 = g(x) - lam - mu e,   1 = e' theta,   0 <= theta  perp  lam >= 0,

with xdot = sum_k F_k(x, u) theta_k over subsystems.  This module provides
the LP solution, the KKT residual with a selectable C-function, the
fixed-active-set sliding DAE right-hand side (bordered system), and the
active-set-prediction LCP with a brute-force enumeration solver.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from .pss_model import PssModel, Subsystem, build_indicator_functions
from .symbolics import VectorFunction, jacobian

__all__ = [
    "StewartDcs", "AlgebraicPoint", "PredictionLcp", "PredictionResult",
    "SlidingRhs", "solve_parametric_lp", "residual_glp", "sliding_dae_rhs",
    "predict_active_set", "lcp_enumerate", "fischer_burmeister",
    "LcpUnsolvableError",
]


class LcpUnsolvableError(RuntimeError):
    """No complementarity pattern of the prediction LCP is feasible."""


def fischer_burmeister(a, b):
    """C-function: zero iff a >= 0, b >= 0, a*b = 0 (componentwise)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return a + b - np.sqrt(a * a + b * b)


def _min_cfun(a, b):
    return np.minimum(a, b)


_CFUNS = {"fischer-burmeister": fischer_burmeister, "min": _min_cfun}


@dataclass(frozen=True)
class StewartDcs:
    """Assembled DCS data: per-subsystem F columns and indicator functions."""

    model: PssModel
    g_funcs: Tuple[VectorFunction, ...]
    g_jac_funcs: Tuple[VectorFunction, ...]

    def __init__(self, model: PssModel):
        g_funcs = tuple(build_indicator_functions(sub)
                        for sub in model.subsystems)
        object.__setattr__(self, "model", model)
        object.__setattr__(self, "g_funcs", g_funcs)
        object.__setattr__(self, "g_jac_funcs",
                           tuple(jacobian(g) for g in g_funcs))

    @property
    def n_x(self) -> int:
        return self.model.n_x

    @property
    def n_u(self) -> int:
        return self.model.n_u

    @property
    def n_sub(self) -> int:
        return len(self.model.subsystems)

    @property
    def n_f(self) -> Tuple[int, ...]:
        return tuple(sub.n_f for sub in self.model.subsystems)

    @property
    def n_theta(self) -> int:
        return sum(self.n_f)

    def g_values(self, x: Sequence[float]) -> List[np.ndarray]:
        x = np.asarray(x, dtype=float)
        return [g.evaluate(x) for g in self.g_funcs]

    def g_jacobians(self, x: Sequence[float]) -> List[np.ndarray]:
        x = np.asarray(x, dtype=float)
        return [J.evaluate(x).reshape(sub.n_f, self.n_x)
                for J, sub in zip(self.g_jac_funcs, self.model.subsystems)]

    def f_matrix(self, k: int, x: Sequence[float],
                 u: Optional[Sequence[float]] = None) -> np.ndarray:
        """Columns F_k(x, u) of subsystem k, an n_x x n_f matrix."""
        sub = self.model.subsystems[k]
        point = np.asarray(x, dtype=float)
        if sub.u_vars:
            u = np.zeros(len(sub.u_vars)) if u is None else np.asarray(
                u, dtype=float)
            point = np.concatenate([point, u])
        return np.column_stack([f.evaluate(point) for f in sub.f_columns])

    def rhs(self, x, theta: Sequence[np.ndarray], u=None) -> np.ndarray:
        """xdot = sum_k F_k(x, u) theta_k."""
        out = np.zeros(self.n_x)
        for k in range(self.n_sub):
            out += self.f_matrix(k, x, u) @ np.asarray(theta[k], dtype=float)
        return out


@dataclass(frozen=True)
class AlgebraicPoint:
    """Per-subsystem LP multipliers (theta, lam, mu) at a state."""

    theta: Tuple[np.ndarray, ...]
    lam: Tuple[np.ndarray, ...]
    mu: Tuple[float, ...]

    def stacked_theta(self) -> np.ndarray:
        return np.concatenate(self.theta)


def _lp_single(g: np.ndarray, tol: float) -> Tuple[np.ndarray, np.ndarray,
                                                   float]:
    mu = float(np.min(g))
    lam = g - mu
    active = np.flatnonzero(lam <= tol)
    theta = np.zeros_like(g)
    theta[active] = 1.0 / active.size
    return theta, lam, mu


def solve_parametric_lp(g_values: Union[np.ndarray, Sequence[np.ndarray]],
                        tol: float = 1e-10) -> AlgebraicPoint:
    """LP multipliers from indicator values: mu = min g, lam = g - mu e,
    theta uniform over the argmin set (deterministic tie-break).

    Accepts a single g vector or a list of per-subsystem vectors.
    """
    if isinstance(g_values, np.ndarray) and g_values.ndim == 1 or (
            isinstance(g_values, (list, tuple))
            and g_values and np.isscalar(g_values[0])):
        g_values = [np.asarray(g_values, dtype=float)]
    thetas, lams, mus = [], [], []
    for g in g_values:
        g = np.asarray(g, dtype=float)
        if not np.all(np.isfinite(g)):
            raise ValueError("g_values must be finite")
        theta, lam, mu = _lp_single(g, tol)
        thetas.append(theta)
        lams.append(lam)
        mus.append(mu)
    return AlgebraicPoint(tuple(thetas), tuple(lams), tuple(mus))


def algebraic_point(dcs: StewartDcs, x: Sequence[float],
                    tol: float = 1e-10) -> AlgebraicPoint:
    """LP multipliers of all subsystems at state x."""
    return solve_parametric_lp(dcs.g_values(x), tol)


def residual_glp(dcs: StewartDcs, x: Sequence[float], point: AlgebraicPoint,
                 cfun: str = "fischer-burmeister") -> np.ndarray:
    """Stacked KKT residual (g(x) - lam - mu e, 1 - e'theta, Psi(theta, lam))
    per subsystem; zero iff `point` solves every subsystem LP at x."""
    psi = _CFUNS[cfun]
    blocks = []
    for k, g in enumerate(dcs.g_values(x)):
        theta = np.asarray(point.theta[k], dtype=float)
        lam = np.asarray(point.lam[k], dtype=float)
        if theta.size != g.size or lam.size != g.size:
            raise ValueError("dimension mismatch in algebraic point")
        blocks.append(g - lam - point.mu[k])
        blocks.append(np.array([1.0 - np.sum(theta)]))
        blocks.append(psi(theta, lam))
    return np.concatenate(blocks)


@dataclass(frozen=True)
class SlidingRhs:
    """Fixed-active-set DAE right-hand side at a state."""

    xdot: np.ndarray
    theta: Tuple[np.ndarray, ...]      # full-length theta per subsystem
    mu_dot: Tuple[float, ...]
    feasible: bool                     # all theta within [0, 1]


def sliding_dae_rhs(dcs: StewartDcs, x: Sequence[float],
                    active_sets: Union[Set[int], Sequence[Set[int]]],
                    u: Optional[Sequence[float]] = None,
                    tol: float = 1e-9) -> SlidingRhs:
    """Right-hand side of the fixed-active-set (sliding) DAE.

    Per subsystem, solves the bordered system
        [[M_I, e], [e', 0]] (theta_I, v) = (0, 1),   M_I = grad g_I' F_I,
    and returns xdot = sum_k F_I theta_I, mu_dot = -v.  The bordered matrix
    can be regular even when M_I is singular.  If any theta_I leaves [0, 1]
    the configuration is not a sliding mode (e.g. a crossing); the result is
    flagged infeasible rather than guessed at.
    """
    if isinstance(active_sets, (set, frozenset)):
        active_sets = [active_sets]
    if len(active_sets) != dcs.n_sub:
        raise ValueError("need one active set per subsystem")
    x = np.asarray(x, dtype=float)
    xdot = np.zeros(dcs.n_x)
    thetas, mu_dots = [], []
    feasible = True
    for k, I in enumerate(active_sets):
        idx = sorted(int(i) for i in I)
        if not idx:
            raise ValueError("active set must be nonempty")
        F = dcs.f_matrix(k, x, u)[:, idx]
        G = dcs.g_jacobians(x)[k][idx, :]
        m = len(idx)
        M = G @ F
        A = np.zeros((m + 1, m + 1))
        A[:m, :m] = M
        A[:m, m] = 1.0
        A[m, :m] = 1.0
        rhs = np.zeros(m + 1)
        rhs[m] = 1.0
        try:
            sol = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError:
            raise RuntimeError(
                "singular bordered sliding system: active-set regularity "
                "violated") from None
        theta_I, v = sol[:m], sol[m]
        if np.any(theta_I < -tol) or np.any(theta_I > 1.0 + tol):
            feasible = False
        theta_full = np.zeros(dcs.n_f[k])
        theta_full[idx] = theta_I
        thetas.append(theta_full)
        mu_dots.append(-float(v))
        xdot += F @ theta_I
    return SlidingRhs(xdot, tuple(thetas), tuple(mu_dots), feasible)


def lcp_enumerate(M: np.ndarray, q: np.ndarray,
                  tol: float = 1e-12) -> List[Tuple[np.ndarray, np.ndarray]]:
    """All solutions of  w = M z + q, w >= 0, z >= 0, w'z = 0  found by
    enumerating the 2^n complementarity patterns (exact at small n)."""
    M = np.asarray(M, dtype=float)
    q = np.asarray(q, dtype=float)
    n = q.size
    solutions = []
    for mask in range(2 ** n):
        basis = [i for i in range(n) if mask >> i & 1]
        z = np.zeros(n)
        if basis:
            try:
                z_b = np.linalg.solve(M[np.ix_(basis, basis)], -q[basis])
            except np.linalg.LinAlgError:
                continue
            z[basis] = z_b
        w = M @ z + q
        if np.all(z >= -tol) and np.all(w >= -tol):
            if not any(np.allclose(z, zs, atol=10 * tol)
                       for zs, _ in solutions):
                solutions.append((z, w))
    return solutions


@dataclass(frozen=True)
class PredictionLcp:
    """Shifted LCP data for active-set prediction: all entries of
    M = M_I0 + alpha e e' are strictly positive, q = -e."""

    M: np.ndarray
    q: np.ndarray
    alpha: float

    def __post_init__(self):
        if np.any(self.M <= 0):
            raise ValueError("shift alpha too small: M has nonpositive "
                             "entries")


@dataclass(frozen=True)
class PredictionResult:
    lcp: PredictionLcp
    supports: Tuple[Tuple[int, ...], ...]   # predicted active sets (0-based,
                                            # relative to I0 ordering)
    theta_tilde: Tuple[np.ndarray, ...]
    w_tilde: Tuple[np.ndarray, ...]
    theta: Tuple[np.ndarray, ...]           # normalized theta per solution

    @property
    def unique(self) -> bool:
        return len(self.supports) == 1


def predict_active_set(dcs: StewartDcs, x: Sequence[float],
                       I0: Union[Set[int], Sequence[int]],
                       alpha: Optional[float] = None,
                       u: Optional[Sequence[float]] = None,
                       subsystem: int = 0) -> PredictionResult:
    """Predict the active set after time t (for small t > 0) at state x.

    Builds M_I0 = grad g_I0' F_I0, shifts by alpha e e' so all entries are
    positive (default policy alpha = max(0, -min entry) + 1), and solves the
    LCP(M_shifted, -e) by pattern enumeration.  The predicted next active
    set is the support of theta_tilde; theta is recovered by normalization
    theta = theta_tilde / (e' theta_tilde).
    """
    idx = sorted(int(i) for i in I0)
    if not idx:
        raise ValueError("I0 must be nonempty")
    x = np.asarray(x, dtype=float)
    F = dcs.f_matrix(subsystem, x, u)[:, idx]
    G = dcs.g_jacobians(x)[subsystem][idx, :]
    M0 = G @ F
    if alpha is None:
        alpha = max(0.0, -float(np.min(M0))) + 1.0
    M = M0 + alpha
    lcp = PredictionLcp(M, -np.ones(len(idx)), float(alpha))
    sols = lcp_enumerate(lcp.M, lcp.q)
    # Discard the trivial all-zero pattern: w = q = -e < 0 is never feasible,
    # but guard against tolerance artifacts anyway.
    sols = [(z, w) for z, w in sols if np.sum(z) > 1e-14]
    if not sols:
        raise LcpUnsolvableError("prediction LCP has no feasible pattern")
    supports, th_t, w_t, th = [], [], [], []
    for z, w in sols:
        supports.append(tuple(int(idx[i]) for i in np.flatnonzero(z > 1e-12)))
        th_t.append(z)
        w_t.append(w)
        th.append(z / np.sum(z))
    return PredictionResult(lcp, tuple(supports), tuple(th_t), tuple(w_t),
                            tuple(th))
