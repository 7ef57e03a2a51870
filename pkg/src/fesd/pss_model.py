"""Piecewise-smooth system models.

A model is a Cartesian product of independent subsystems.  Each subsystem
partitions the state space into regions through switching functions c(x) and
a sign matrix S (entries +-1, one row per region): region i is the open set
where diag(S_i) c(x) > 0 componentwise, with its own smooth dynamics column
f_i(x, u).  The indicator functions used by the Stewart formulation are
g(x) = -S c(x); inside region i, g_i is the strict pointwise minimum.

Controls enter only through the dynamics columns, never through c or S.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .symbolics import Expr, VectorFunction, esum

__all__ = ["Subsystem", "PssModel", "build_indicator_functions",
           "region_membership"]


@dataclass(frozen=True)
class Subsystem:
    """One independent switching subsystem.

    Parameters
    ----------
    f_columns:
        Dynamics columns f_i(x, u), one VectorFunction (n_x outputs) per
        region, all sharing the same (x, u) variable groups.
    c:
        Switching functions, a VectorFunction of x only with n_c outputs.
    S:
        Integer sign matrix, n_f x n_c, entries +-1, no repeated rows.
    """

    f_columns: Tuple[VectorFunction, ...]
    c: VectorFunction
    S: np.ndarray

    def __init__(self, f_columns: Sequence[VectorFunction],
                 c: VectorFunction, S):
        f_columns = tuple(f_columns)
        S = np.asarray(S, dtype=int)
        if S.ndim != 2:
            raise ValueError("S must be a matrix")
        n_f, n_c = S.shape
        if np.any(np.abs(S) != 1):
            raise ValueError("S must have entries +-1 (no zero entries)")
        if len({tuple(row) for row in S.tolist()}) != n_f:
            raise ValueError("S must have no repeated rows")
        if n_f > 2 ** n_c:
            raise ValueError(f"n_f={n_f} exceeds 2^n_c={2 ** n_c}")
        if len(f_columns) != n_f:
            raise ValueError("need one dynamics column per row of S")
        if c.n_out != n_c:
            raise ValueError("c must have one output per column of S")
        base = f_columns[0]
        for f in f_columns[1:]:
            if f.groups != base.groups or f.n_out != base.n_out:
                raise ValueError("all f_i must share dimensions and variables")
        if len(c.groups) != 1 or c.groups[0] != base.groups[0]:
            raise ValueError("c must be a function of the state variables "
                             "only")
        object.__setattr__(self, "f_columns", f_columns)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "S", S)
        S.setflags(write=False)

    @property
    def n_f(self) -> int:
        return self.S.shape[0]

    @property
    def n_c(self) -> int:
        return self.S.shape[1]

    @property
    def x_vars(self) -> Tuple[Expr, ...]:
        return self.f_columns[0].groups[0]

    @property
    def u_vars(self) -> Tuple[Expr, ...]:
        groups = self.f_columns[0].groups
        return groups[1] if len(groups) > 1 else ()

    @property
    def n_x(self) -> int:
        return self.f_columns[0].n_out


@dataclass(frozen=True)
class PssModel:
    """Cartesian product of independent subsystems on a shared state."""

    subsystems: Tuple[Subsystem, ...]

    def __init__(self, subsystems: Sequence[Subsystem]):
        subsystems = tuple(subsystems)
        if not subsystems:
            raise ValueError("need at least one subsystem")
        base = subsystems[0]
        for sub in subsystems[1:]:
            if (sub.x_vars != base.x_vars or sub.u_vars != base.u_vars):
                raise ValueError("all subsystems must share x and u "
                                 "variables")
        object.__setattr__(self, "subsystems", subsystems)

    @property
    def n_x(self) -> int:
        return self.subsystems[0].n_x

    @property
    def n_u(self) -> int:
        return len(self.subsystems[0].u_vars)

    @property
    def x_vars(self) -> Tuple[Expr, ...]:
        return self.subsystems[0].x_vars

    @property
    def u_vars(self) -> Tuple[Expr, ...]:
        return self.subsystems[0].u_vars


def build_indicator_functions(sub: Subsystem) -> VectorFunction:
    """Indicator functions g(x) = -S c(x) for one subsystem.

    Strictly inside region i (diag(S_i) c(x) > 0), g_i(x) < g_j(x) for all
    j != i, so the pointwise minimizer of g identifies the active region.
    """
    c_out = sub.c.outputs
    g_rows = []
    for i in range(sub.n_f):
        g_rows.append(esum([float(-sub.S[i, j]) * c_out[j]
                            for j in range(sub.n_c)]))
    return VectorFunction(sub.c.groups, g_rows)


def region_membership(model: PssModel, x: Sequence[float],
                      tol: float = 1e-10) -> List[set]:
    """Active set per subsystem: { i : g_i(x) <= min_j g_j(x) + tol }.

    Region indices are 0-based.
    """
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    x = np.asarray(x, dtype=float)
    active = []
    for sub in model.subsystems:
        g = build_indicator_functions(sub).evaluate(x)
        gmin = np.min(g)
        active.append({int(i) for i in np.flatnonzero(g <= gmin + tol)})
    return active
