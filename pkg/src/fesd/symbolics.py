"""Expression graphs with first- and second-order automatic differentiation.

All smooth functions in the library (region dynamics f_i, switching functions
c, indicator functions g, objective terms) are represented as immutable
directed acyclic graphs of elementary operations.  The node set is
deliberately smooth: there is no sign/min/abs node, so any nonsmoothness must
be expressed through the complementarity structure of the model, never inside
an expression.

Derivatives are exact: reverse mode for gradients/Jacobians (graph-to-graph,
returning new expressions) and forward-over-reverse for Hessians.  For fast
repeated evaluation inside solvers, graphs can be compiled to flat Python
functions (`compile_evaluator`); the interpreted `VectorFunction.evaluate`
path additionally reports the offending node on non-finite intermediates.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

__all__ = [
    "Expr",
    "Var",
    "VectorFunction",
    "constant",
    "var",
    "as_expr",
    "sin",
    "cos",
    "exp",
    "sqrt",
    "tanh",
    "esum",
    "substitute",
    "jacobian",
    "hessian_lagrangian",
    "gradient_exprs",
    "forward_derivative",
    "free_variables",
    "compile_evaluator",
    "ResidualSystem",
    "EvaluationError",
]

# Node kinds.
_CONST = "const"
_VAR = "var"
_ADD = "add"
_SUB = "sub"
_MUL = "mul"
_DIV = "div"
_POW = "pow"
_UNARY = {"sin", "cos", "exp", "sqrt", "tanh"}

_COMMUTATIVE = {_ADD, _MUL}

ExprLike = Union["Expr", float, int]

# Creation-order serial numbers: a run-to-run deterministic total order on
# nodes (memory addresses are not), used to canonicalize commutative args.
_SERIAL = itertools.count()


class EvaluationError(ValueError):
    """Raised when evaluation hits a non-finite intermediate or bad dims."""


class Expr:
    """Immutable expression-graph node.

    Do not call the constructor directly; use :func:`constant`, :func:`var`
    and the arithmetic operators / helper functions, which apply constant
    folding and common-subexpression sharing.
    """

    __slots__ = ("kind", "args", "value", "name", "_deps", "_serial")

    def __init__(self, kind: str, args: Tuple["Expr", ...] = (),
                 value: float = 0.0, name: str = ""):
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "args", args)
        object.__setattr__(self, "value", value)
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "_deps", None)
        object.__setattr__(self, "_serial", next(_SERIAL))

    def __setattr__(self, *a):  # pragma: no cover - guard rail
        raise AttributeError("Expr nodes are immutable")

    # -- arithmetic sugar ---------------------------------------------------
    def __add__(self, other: ExprLike) -> "Expr":
        return _add(self, as_expr(other))

    def __radd__(self, other: ExprLike) -> "Expr":
        return _add(as_expr(other), self)

    def __sub__(self, other: ExprLike) -> "Expr":
        return _sub(self, as_expr(other))

    def __rsub__(self, other: ExprLike) -> "Expr":
        return _sub(as_expr(other), self)

    def __mul__(self, other: ExprLike) -> "Expr":
        return _mul(self, as_expr(other))

    def __rmul__(self, other: ExprLike) -> "Expr":
        return _mul(as_expr(other), self)

    def __truediv__(self, other: ExprLike) -> "Expr":
        return _div(self, as_expr(other))

    def __rtruediv__(self, other: ExprLike) -> "Expr":
        return _div(as_expr(other), self)

    def __neg__(self) -> "Expr":
        return _sub(_ZERO, self)

    def __pow__(self, exponent: ExprLike) -> "Expr":
        return _pow(self, as_expr(exponent))

    def __repr__(self) -> str:
        if self.kind == _CONST:
            return f"Expr({self.value!r})"
        if self.kind == _VAR:
            return f"Var({self.name!r})"
        return f"Expr<{self.kind}/{len(self.args)}>"


Var = Expr  # variable nodes are Expr instances with kind "var"

# Hash-consing table.  Keyed by structural identity of the children (which
# are themselves interned), so equal subgraphs become the same object.
_INTERN: Dict[tuple, Expr] = {}


def constant(v: float) -> Expr:
    v = float(v)
    key = (_CONST, v)
    node = _INTERN.get(key)
    if node is None:
        node = Expr(_CONST, (), v)
        _INTERN[key] = node
    return node


_ZERO = constant(0.0)
_ONE = constant(1.0)


def var(name: str) -> Expr:
    """Create a fresh variable node (never interned: identity matters)."""
    return Expr(_VAR, (), 0.0, name)


def as_expr(v: ExprLike) -> Expr:
    if isinstance(v, Expr):
        return v
    if isinstance(v, (int, float, np.floating, np.integer)):
        return constant(float(v))
    raise TypeError(f"cannot convert {type(v).__name__} to Expr")


def _intern(kind: str, args: Tuple[Expr, ...]) -> Expr:
    if kind in _COMMUTATIVE:
        args = tuple(sorted(args, key=lambda a: a._serial))
    key = (kind,) + tuple(id(a) for a in args)
    node = _INTERN.get(key)
    if node is None:
        node = Expr(kind, args)
        _INTERN[key] = node
    return node


def _add(a: Expr, b: Expr) -> Expr:
    if a.kind == _CONST and b.kind == _CONST:
        return constant(a.value + b.value)
    if a.kind == _CONST and a.value == 0.0:
        return b
    if b.kind == _CONST and b.value == 0.0:
        return a
    return _intern(_ADD, (a, b))


def _sub(a: Expr, b: Expr) -> Expr:
    if a.kind == _CONST and b.kind == _CONST:
        return constant(a.value - b.value)
    if b.kind == _CONST and b.value == 0.0:
        return a
    if a is b:
        return _ZERO
    return _intern(_SUB, (a, b))


def _mul(a: Expr, b: Expr) -> Expr:
    if a.kind == _CONST and b.kind == _CONST:
        return constant(a.value * b.value)
    if a.kind == _CONST:
        if a.value == 0.0:
            return _ZERO
        if a.value == 1.0:
            return b
    if b.kind == _CONST:
        if b.value == 0.0:
            return _ZERO
        if b.value == 1.0:
            return a
    return _intern(_MUL, (a, b))


def _div(a: Expr, b: Expr) -> Expr:
    if b.kind == _CONST:
        if b.value == 0.0:
            raise ZeroDivisionError("division by constant zero in Expr")
        if a.kind == _CONST:
            return constant(a.value / b.value)
        if b.value == 1.0:
            return a
    if a.kind == _CONST and a.value == 0.0:
        return _ZERO
    return _intern(_DIV, (a, b))


def _pow(a: Expr, b: Expr) -> Expr:
    if b.kind != _CONST:
        raise ValueError("power nodes require a constant exponent "
                         "(general a**b is not in the smooth node set)")
    if b.value == 0.0:
        return _ONE
    if b.value == 1.0:
        return a
    if a.kind == _CONST:
        return constant(a.value ** b.value)
    return _intern(_POW, (a, b))


def _unary(kind: str, a: Expr) -> Expr:
    if a.kind == _CONST:
        return constant(getattr(math, kind)(a.value))
    return _intern(kind, (a,))


def sin(a: ExprLike) -> Expr:
    return _unary("sin", as_expr(a))


def cos(a: ExprLike) -> Expr:
    return _unary("cos", as_expr(a))


def exp(a: ExprLike) -> Expr:
    return _unary("exp", as_expr(a))


def sqrt(a: ExprLike) -> Expr:
    return _unary("sqrt", as_expr(a))


def tanh(a: ExprLike) -> Expr:
    return _unary("tanh", as_expr(a))


def esum(terms: Sequence[ExprLike]) -> Expr:
    """Sum of expressions as a balanced tree (keeps graphs shallow)."""
    terms = [as_expr(t) for t in terms]
    terms = [t for t in terms if not (t.kind == _CONST and t.value == 0.0)]
    if not terms:
        return _ZERO
    while len(terms) > 1:
        nxt = []
        for i in range(0, len(terms) - 1, 2):
            nxt.append(terms[i] + terms[i + 1])
        if len(terms) % 2:
            nxt.append(terms[-1])
        terms = nxt
    return terms[0]


# ---------------------------------------------------------------------------
# Graph traversal
# ---------------------------------------------------------------------------

def topo_order(roots: Iterable[Expr]) -> List[Expr]:
    """Children-first topological order of the union of the given graphs."""
    order: List[Expr] = []
    seen = set()
    stack: List[Tuple[Expr, bool]] = [(r, False) for r in roots]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for child in node.args:
            if id(child) not in seen:
                stack.append((child, False))
    return order


def free_variables(roots: Iterable[Expr]) -> List[Expr]:
    """All variable nodes reachable from `roots`, in topological order."""
    return [n for n in topo_order(roots) if n.kind == _VAR]


def _dep_vars(node: Expr, order: List[Expr]) -> None:
    """Populate the lazy per-node frozenset of reachable variable ids."""
    for n in order:
        if n._deps is not None:
            continue
        if n.kind == _VAR:
            deps = frozenset((id(n),))
        elif n.kind == _CONST:
            deps = frozenset()
        else:
            deps = frozenset().union(*(c._deps for c in n.args))
        object.__setattr__(n, "_deps", deps)


def dependency_vars(expr: Expr) -> frozenset:
    if expr._deps is None:
        _dep_vars(expr, topo_order([expr]))
    return expr._deps


def substitute(roots: Sequence[Expr], mapping: Dict[Expr, Expr]) -> List[Expr]:
    """Replace variable nodes per `mapping` (keyed by node identity)."""
    out: Dict[int, Expr] = {id(k): v for k, v in mapping.items()}
    for node in topo_order(roots):
        if id(node) in out:
            continue
        if node.kind in (_CONST, _VAR):
            out[id(node)] = node
        else:
            new_args = tuple(out[id(c)] for c in node.args)
            if all(n is o for n, o in zip(new_args, node.args)):
                out[id(node)] = node
            else:
                out[id(node)] = _rebuild(node.kind, new_args)
    return [out[id(r)] for r in roots]


def _rebuild(kind: str, args: Tuple[Expr, ...]) -> Expr:
    if kind == _ADD:
        return _add(*args)
    if kind == _SUB:
        return _sub(*args)
    if kind == _MUL:
        return _mul(*args)
    if kind == _DIV:
        return _div(*args)
    if kind == _POW:
        return _pow(*args)
    return _unary(kind, args[0])


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def eval_graph(roots: Sequence[Expr], bindings: Dict[Expr, float]) -> List[float]:
    """Interpret the graph; raises EvaluationError (with the index of the
    offending node in topological order) on non-finite intermediates."""
    values: Dict[int, float] = {id(k): float(v) for k, v in bindings.items()}
    order = topo_order(roots)
    for idx, node in enumerate(order):
        nid = id(node)
        if nid in values:
            continue
        k = node.kind
        if k == _CONST:
            v = node.value
        elif k == _VAR:
            raise EvaluationError(f"unbound variable {node.name!r}")
        else:
            a = values[id(node.args[0])]
            try:
                if k == _ADD:
                    v = a + values[id(node.args[1])]
                elif k == _SUB:
                    v = a - values[id(node.args[1])]
                elif k == _MUL:
                    v = a * values[id(node.args[1])]
                elif k == _DIV:
                    v = a / values[id(node.args[1])]
                elif k == _POW:
                    v = a ** node.args[1].value
                else:
                    v = getattr(math, k)(a)
            except (OverflowError, ValueError, ZeroDivisionError):
                raise EvaluationError(
                    f"non-finite intermediate at node index {idx} "
                    f"(kind {k})") from None
        if not math.isfinite(v):
            raise EvaluationError(
                f"non-finite intermediate at node index {idx} (kind {k})")
        values[nid] = v
    return [values[id(r)] for r in roots]


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------

def gradient_exprs(output: Expr, wrt: Sequence[Expr]) -> List[Expr]:
    """Reverse-mode gradient of a scalar expression; graph-to-graph."""
    order = topo_order([output])
    adjoint_terms: Dict[int, List[Expr]] = {id(output): [_ONE]}
    adjoint: Dict[int, Expr] = {}
    for node in reversed(order):
        terms = adjoint_terms.pop(id(node), None)
        if not terms:
            continue
        bar = esum(terms)
        adjoint[id(node)] = bar
        if bar.kind == _CONST and bar.value == 0.0:
            continue
        k = node.kind
        if k in (_CONST, _VAR):
            continue
        a = node.args[0]
        b = node.args[1] if len(node.args) > 1 else None
        if k == _ADD:
            adjoint_terms.setdefault(id(a), []).append(bar)
            adjoint_terms.setdefault(id(b), []).append(bar)
        elif k == _SUB:
            adjoint_terms.setdefault(id(a), []).append(bar)
            adjoint_terms.setdefault(id(b), []).append(-bar)
        elif k == _MUL:
            adjoint_terms.setdefault(id(a), []).append(bar * b)
            adjoint_terms.setdefault(id(b), []).append(bar * a)
        elif k == _DIV:
            adjoint_terms.setdefault(id(a), []).append(bar / b)
            adjoint_terms.setdefault(id(b), []).append(-(bar * node) / b)
        elif k == _POW:
            n = b.value
            adjoint_terms.setdefault(id(a), []).append(
                bar * (n * _pow(a, constant(n - 1.0))))
        elif k == "sin":
            adjoint_terms.setdefault(id(a), []).append(bar * cos(a))
        elif k == "cos":
            adjoint_terms.setdefault(id(a), []).append(-(bar * sin(a)))
        elif k == "exp":
            adjoint_terms.setdefault(id(a), []).append(bar * node)
        elif k == "sqrt":
            adjoint_terms.setdefault(id(a), []).append(
                bar / (constant(2.0) * node))
        elif k == "tanh":
            adjoint_terms.setdefault(id(a), []).append(
                bar * (_ONE - node * node))
        else:  # pragma: no cover
            raise ValueError(f"unsupported node kind {k!r}")
    return [adjoint.get(id(v), _ZERO) for v in wrt]


def forward_derivative(expr: Expr, wrt: Expr) -> Expr:
    """Forward-mode (tangent) derivative of `expr` w.r.t. a single variable."""
    dot: Dict[int, Expr] = {}
    wid = id(wrt)
    for node in topo_order([expr]):
        nid = id(node)
        k = node.kind
        if k == _CONST:
            dot[nid] = _ZERO
        elif k == _VAR:
            dot[nid] = _ONE if nid == wid else _ZERO
        else:
            a = node.args[0]
            da = dot[id(a)]
            if k in (_ADD, _SUB, _MUL, _DIV, _POW):
                b = node.args[1]
                db = dot[id(b)]
                if k == _ADD:
                    dot[nid] = da + db
                elif k == _SUB:
                    dot[nid] = da - db
                elif k == _MUL:
                    dot[nid] = da * b + a * db
                elif k == _DIV:
                    dot[nid] = (da - node * db) / b
                else:
                    n = b.value
                    dot[nid] = n * _pow(a, constant(n - 1.0)) * da
            elif k == "sin":
                dot[nid] = cos(a) * da
            elif k == "cos":
                dot[nid] = -(sin(a) * da)
            elif k == "exp":
                dot[nid] = node * da
            elif k == "sqrt":
                dot[nid] = da / (constant(2.0) * node)
            elif k == "tanh":
                dot[nid] = (_ONE - node * node) * da
            else:  # pragma: no cover
                raise ValueError(f"unsupported node kind {k!r}")
    return dot[id(expr)]


def hessian_entries(expr: Expr, wrt: Sequence[Expr]):
    """Sparse lower-triangular Hessian of a scalar expression.

    Forward-over-reverse: reverse-mode gradient first, then forward tangents
    of each gradient entry, restricted to the variables it actually touches.
    Yields (i, j, Expr) with j <= i.
    """
    grad = gradient_exprs(expr, wrt)
    index_of = {id(v): i for i, v in enumerate(wrt)}
    for i, gi in enumerate(grad):
        if gi.kind == _CONST and gi.value == 0.0:
            continue
        for vid in dependency_vars(gi):
            j = index_of.get(vid)
            if j is None or j > i:
                continue
            h = forward_derivative(gi, wrt[j])
            if not (h.kind == _CONST and h.value == 0.0):
                yield i, j, h


# ---------------------------------------------------------------------------
# Compilation to flat Python
# ---------------------------------------------------------------------------

_BINOPS = {_ADD: "+", _SUB: "-", _MUL: "*", _DIV: "/"}


def compile_evaluator(variables: Sequence[Expr], params: Sequence[Expr],
                      outputs: Sequence[Expr]) -> Callable:
    """Compile graphs into a flat function  fn(w, p, out=None) -> out.

    `w` binds `variables` by position, `p` binds `params`.  Intermediate
    values are local floats; common subexpressions are emitted once (graphs
    are hash-consed at construction).
    """
    slot: Dict[int, str] = {}
    for i, v in enumerate(variables):
        if v.kind != _VAR:
            raise ValueError("inputs must be variable nodes")
        slot[id(v)] = f"w[{i}]"
    for i, pv in enumerate(params):
        if pv.kind != _VAR:
            raise ValueError("params must be variable nodes")
        if id(pv) in slot:
            raise ValueError(f"variable {pv.name!r} listed as both input and "
                             "parameter")
        slot[id(pv)] = f"p[{i}]"

    lines = []
    tmp = 0
    for node in topo_order(outputs):
        nid = id(node)
        if nid in slot:
            continue
        k = node.kind
        if k == _CONST:
            slot[nid] = repr(node.value)
            continue
        if k == _VAR:
            raise EvaluationError(f"unbound variable {node.name!r} in "
                                  "compiled function")
        a = slot[id(node.args[0])]
        name = f"t{tmp}"
        tmp += 1
        if k in _BINOPS:
            b = slot[id(node.args[1])]
            lines.append(f" {name} = {a} {_BINOPS[k]} {b}")
        elif k == _POW:
            n = node.args[1].value
            if n == 2.0:
                lines.append(f" {name} = {a} * {a}")
            elif n == int(n):
                lines.append(f" {name} = {a} ** {int(n)}")
            else:
                lines.append(f" {name} = {a} ** {n!r}")
        else:
            lines.append(f" {name} = _{k}({a})")
        slot[nid] = name

    n_out = len(outputs)
    body = [f"def _compiled(w, p, out=None):",
            f" if out is None: out = _np.empty({n_out})"]
    body.extend(lines)
    for i, o in enumerate(outputs):
        body.append(f" out[{i}] = {slot[id(o)]}")
    body.append(" return out")
    src = "\n".join(body)
    namespace = {
        "_np": np,
        "_sin": math.sin, "_cos": math.cos, "_exp": math.exp,
        "_sqrt": math.sqrt, "_tanh": math.tanh,
    }
    exec(compile(src, "<fesd-compiled>", "exec"), namespace)
    return namespace["_compiled"]


# ---------------------------------------------------------------------------
# VectorFunction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VectorFunction:
    """A vector-valued function of ordered variable groups (x, u, params).

    Inputs are flattened in group order for `evaluate`, `jacobian` and
    `hessian_lagrangian`.
    """

    groups: Tuple[Tuple[Expr, ...], ...]
    outputs: Tuple[Expr, ...]

    def __init__(self, groups: Sequence[Sequence[Expr]],
                 outputs: Sequence[Expr]):
        groups = tuple(tuple(g) for g in groups)
        outputs = tuple(as_expr(o) for o in outputs)
        for g in groups:
            for v in g:
                if v.kind != _VAR:
                    raise ValueError("input groups must contain variable nodes")
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "outputs", outputs)

    @property
    def variables(self) -> Tuple[Expr, ...]:
        return tuple(v for g in self.groups for v in g)

    @property
    def n_in(self) -> int:
        return len(self.variables)

    @property
    def n_out(self) -> int:
        return len(self.outputs)

    @property
    def dims(self) -> Tuple[int, int]:
        return (self.n_in, self.n_out)

    def evaluate(self, point: Sequence[float]) -> np.ndarray:
        point = np.asarray(point, dtype=float).ravel()
        names = self.variables
        if point.size != len(names):
            raise EvaluationError(
                f"dimension mismatch: expected {len(names)} inputs, "
                f"got {point.size}")
        bindings = {v: point[i] for i, v in enumerate(names)}
        return np.array(eval_graph(list(self.outputs), bindings))

    def __call__(self, point: Sequence[float]) -> np.ndarray:
        return self.evaluate(point)

    def compiled(self) -> Callable:
        fn = compile_evaluator(self.variables, (), self.outputs)
        return lambda point, _fn=fn: _fn(np.asarray(point, dtype=float), ())


class ResidualSystem:
    """A vector residual r(w; p) with compiled evaluation and Jacobians.

    `variables` are the unknowns w, `params` extra data p (shared compiled
    structure across many numeric instances).  Jacobians are assembled from
    per-row reverse-mode gradients; the structural sparsity pattern is
    computed once and reused.
    """

    def __init__(self, variables: Sequence[Expr], params: Sequence[Expr],
                 residuals: Sequence[Expr]):
        self.variables = tuple(variables)
        self.params = tuple(params)
        self.residuals = tuple(as_expr(r) for r in residuals)
        self.n = len(self.variables)
        self.n_res = len(self.residuals)
        self._res_fn = None
        self._jac = None        # (rows, cols, fn, nnz)
        self._jac_p = None

    def _ensure_res(self):
        if self._res_fn is None:
            self._res_fn = compile_evaluator(self.variables, self.params,
                                             self.residuals)

    def _build_jac(self, wrt: Sequence[Expr]):
        rows, cols, exprs = [], [], []
        index = {id(v): j for j, v in enumerate(wrt)}
        for i, r in enumerate(self.residuals):
            touched = [v for v in wrt if id(v) in dependency_vars(r)]
            if not touched:
                continue
            grads = gradient_exprs(r, touched)
            for v, g in zip(touched, grads):
                if g.kind == _CONST and g.value == 0.0:
                    continue
                rows.append(i)
                cols.append(index[id(v)])
                exprs.append(g)
        fn = compile_evaluator(self.variables, self.params, exprs)
        return (np.array(rows, dtype=int), np.array(cols, dtype=int), fn,
                len(exprs))

    def residual(self, w, p=()) -> np.ndarray:
        self._ensure_res()
        return self._res_fn(np.asarray(w, dtype=float),
                            np.asarray(p, dtype=float))

    def jacobian(self, w, p=()) -> np.ndarray:
        if self._jac is None:
            self._jac = self._build_jac(self.variables)
        rows, cols, fn, nnz = self._jac
        vals = fn(np.asarray(w, dtype=float), np.asarray(p, dtype=float),
                  np.empty(nnz))
        J = np.zeros((self.n_res, self.n))
        J[rows, cols] = vals
        return J

    def jacobian_params(self, w, p=()) -> np.ndarray:
        """Jacobian of the residual with respect to the parameters."""
        if self._jac_p is None:
            self._jac_p = self._build_jac(self.params)
        rows, cols, fn, nnz = self._jac_p
        vals = fn(np.asarray(w, dtype=float), np.asarray(p, dtype=float),
                  np.empty(nnz))
        J = np.zeros((self.n_res, len(self.params)))
        J[rows, cols] = vals
        return J


def jacobian(f: VectorFunction) -> VectorFunction:
    """Exact Jacobian as a new VectorFunction; outputs are the n_out x n_in
    matrix entries in row-major order."""
    wrt = f.variables
    rows = []
    for out in f.outputs:
        rows.extend(gradient_exprs(out, wrt))
    return VectorFunction(f.groups, rows)


def hessian_lagrangian(fs: Sequence[VectorFunction],
                       weights: Sequence[float]) -> VectorFunction:
    """Weighted Hessian sum  H = sum_i weights_i * hess(fs_i).

    Each fs_i must be scalar-valued and all must share the same input
    variables.  The result is the full symmetric n_in x n_in matrix in
    row-major order (symmetric by construction).
    """
    if len(fs) != len(weights):
        raise ValueError("dimension mismatch: one weight per function")
    if not fs:
        raise ValueError("need at least one function")
    base = fs[0].variables
    for f in fs[1:]:
        if f.variables != base:
            raise ValueError("all functions must share the same inputs")
    n = len(base)
    entries: Dict[Tuple[int, int], List[Expr]] = {}
    for f, wgt in zip(fs, weights):
        if f.n_out != 1:
            raise ValueError("hessian_lagrangian expects scalar functions")
        for i, j, h in hessian_entries(f.outputs[0], base):
            entries.setdefault((i, j), []).append(as_expr(wgt) * h)
    mat = [[_ZERO] * n for _ in range(n)]
    for (i, j), terms in entries.items():
        e = esum(terms)
        mat[i][j] = e
        mat[j][i] = e
    return VectorFunction(fs[0].groups, [mat[i][j] for i in range(n)
                                         for j in range(n)])
