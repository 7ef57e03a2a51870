import math

import numpy as np
import pytest

from fesd.fesd_core import FesdProblem, assemble_fesd
from fesd.rk_core import make_tableau, smoothed_fb
from fesd.scenarios import two_speed_sign_model
from fesd.solver import (HomotopyOptions, NlpProblem, homotopy_newton_solve,
                         homotopy_solve, ip_solve_nlp, newton_solve_square,
                         relax_complementarities)
from fesd.symbolics import ResidualSystem, var


def test_newton_scalar_quadratic():
    x = var("x")
    sys_ = ResidualSystem([x], (), [x * x - 4.0])
    w, rep = newton_solve_square(sys_, [3.0])
    assert rep.converged
    assert abs(w[0] - 2.0) <= 1e-12


def test_newton_quadratic_tail():
    x, y = var("x"), var("y")
    sys_ = ResidualSystem([x, y], (), [x * x + y - 3.0, x + y * y - 5.0])
    w, rep = newton_solve_square(sys_, [1.3, 1.8])
    assert rep.converged
    r = sys_.residual(w)
    assert np.max(np.abs(r)) <= 1e-12
    # final steps contract quadratically
    h = [v for v in rep.history if v > 0]
    assert h[-1] <= 10.0 * h[-2] ** 2


def test_newton_requires_square():
    x = var("x")
    with pytest.raises(ValueError):
        newton_solve_square(ResidualSystem([x], (), [x, x - 1.0]), [0.0])


def test_newton_lcp_fischer_burmeister():
    # LCP(M, q) with M = [[8, 6], [2, 4]], q = -e in C-function form
    M = np.array([[8.0, 6.0], [2.0, 4.0]])
    z = [var("z0"), var("z1")]
    sig = var("sigma")
    wexp = [M[i, 0] * z[0] + M[i, 1] * z[1] - 1.0 for i in range(2)]
    sys_ = ResidualSystem(z, [sig],
                          [smoothed_fb(z[i], wexp[i], sig) for i in range(2)])
    w, rep = homotopy_newton_solve(sys_, [0.5, 0.5], [1.0])
    assert rep.converged
    np.testing.assert_allclose(w, [0.0, 0.25], atol=1e-8)


def test_smoothed_fb_values_and_consistency():
    sig = 1e-6
    a, b, s = var("a"), var("b"), var("s")
    sys_ = ResidualSystem([a, b], [s], [smoothed_fb(a, b, s)])
    assert sys_.residual([0.0, 0.0], [sig])[0] == pytest.approx(
        -math.sqrt(2 * sig))
    rng = np.random.default_rng(0)
    for _ in range(1000):
        u = rng.uniform(0.0, 5.0)
        pair = (u, 0.0) if rng.random() < 0.5 else (0.0, u)
        val = sys_.residual(pair, [sig])[0]
        assert abs(val) <= math.sqrt(2 * sig) + 1e-15


def _h_box(prob, T):
    n = len(prob.variables)
    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    lb[prob.h_slice] = 0.0
    ub[prob.h_slice] = 2.0 * T / prob.N_FE
    return lb, ub


def test_fesd_element_switch_detection():
    # 2 - sign(x) from x0 = -1 crosses at t = 1/3; the smoothed square
    # system adapts h so the crossing lands on the element boundary.
    model = two_speed_sign_model(3.0, 1.0)
    T = 0.5
    prob, params = assemble_fesd(model, [-1.0], None, T, 2,
                                 make_tableau("radau-iia", 1))
    w0 = prob.initial_guess([-1.0], T=T)
    lb, ub = _h_box(prob, T)
    w, rep = homotopy_newton_solve(prob.newton_system, w0, params,
                                   lb=lb, ub=ub)
    assert rep.converged
    h = prob.steps(w)
    states = prob.states(w)
    assert abs(h[0] - 1.0 / 3.0) <= 1e-6
    assert abs(states[1, 0]) <= 1e-6            # switching surface x = 0
    assert abs(states[2, 0] - (T - 1.0 / 3.0)) <= 1e-6
    assert abs(np.sum(h) - T) <= 1e-12


def test_homotopy_newton_trace_monotone():
    model = two_speed_sign_model(3.0, 1.0)
    prob, params = assemble_fesd(model, [-1.0], None, 0.2, 2,
                                 make_tableau("radau-iia", 1))
    w0 = prob.initial_guess([-1.0], T=0.2)
    lb, ub = _h_box(prob, 0.2)
    w, rep = homotopy_newton_solve(prob.newton_system, w0, params,
                                   lb=lb, ub=ub)
    assert rep.converged
    sigmas = [t["sigma"] for t in rep.trace]
    assert all(b < a for a, b in zip(sigmas, sigmas[1:]))
    assert rep.sigma_final <= 1e-12


def test_relax_modes():
    a, b = var("a"), var("b")
    base = NlpProblem([a, b], (), (a - 1.0) ** 2 + (b - 1.0) ** 2,
                      comp_pairs=[(a, b)], lb=np.zeros(2))
    rel = relax_complementarities(base, 1.0, "relaxation")
    assert len(rel.ineq) == 1 and not rel.comp_pairs
    sm = relax_complementarities(base, 1e-4, "smoothing")
    assert len(sm.eq) == 1
    pen = relax_complementarities(base, 0.5, "penalty")
    assert pen.objective is not base.objective
    with pytest.raises(ValueError):
        relax_complementarities(base, 1.0, "magic")


def test_nlp_problem_pair_bounds_checked():
    a, b = var("a"), var("b")
    with pytest.raises(ValueError):
        NlpProblem([a, b], (), a + b, comp_pairs=[(a, b)])


def test_ip_bound_constrained_quadratic():
    x = var("x")
    p = NlpProblem([x], (), x * x, ineq=[x - 1.0])
    w, rep = ip_solve_nlp(p, [3.0], tol=1e-9)
    assert rep.converged
    assert abs(w[0] - 1.0) <= 1e-7
    assert abs(rep.z[0] - 2.0) <= 1e-6


def test_ip_equality_projection():
    x, y = var("x"), var("y")
    p = NlpProblem([x, y], (), (x - 2.0) ** 2 + (y - 1.0) ** 2,
                   eq=[x + y - 1.0])
    w, rep = ip_solve_nlp(p, [0.0, 0.0], tol=1e-10)
    assert rep.converged
    np.testing.assert_allclose(w, [1.0, 0.0], atol=1e-8)


def test_ip_rejects_unrelaxed_problem():
    a, b = var("a"), var("b")
    p = NlpProblem([a, b], (), a + b, comp_pairs=[(a, b)], lb=np.zeros(2))
    with pytest.raises(ValueError):
        ip_solve_nlp(p, [1.0, 1.0])


def test_homotopy_solve_simple_mpcc():
    # min (a-1)^2 + (b-1/2)^2 s.t. 0 <= a  _|_  b >= 0; the unique
    # solution is (1, 0) with a strongly stationary multiplier.
    a, b = var("a"), var("b")
    p = NlpProblem([a, b], (), (a - 1.0) ** 2 + (b - 0.5) ** 2,
                   comp_pairs=[(a, b)], lb=np.zeros(2))
    w, rep = homotopy_solve(p, HomotopyOptions(sigma_end=1e-12), [1.0, 0.1])
    assert rep.converged
    assert rep.comp_residual <= 1e-10
    np.testing.assert_allclose(w, [1.0, 0.0], atol=1e-6)
    sigmas = [t["sigma"] for t in rep.trace]
    assert all(s2 < s1 for s1, s2 in zip(sigmas, sigmas[1:]))


def test_homotopy_solve_no_pairs_single_stage():
    x = var("x")
    p = NlpProblem([x], (), (x - 3.0) ** 2)
    w, rep = homotopy_solve(p, None, [0.0])
    assert rep.converged
    assert abs(w[0] - 3.0) <= 1e-6
    assert rep.sigma_final == 0.0


def test_homotopy_fixed_sigma_mode():
    a, b = var("a"), var("b")
    p = NlpProblem([a, b], (), (a - 1.0) ** 2 + (b - 1.0) ** 2,
                   comp_pairs=[(a, b)], lb=np.zeros(2))
    opts = HomotopyOptions(fixed_sigma=1e-2)
    w, rep = homotopy_solve(p, opts, [1.0, 0.1])
    assert len(rep.trace) == 1
    assert rep.trace[0]["sigma"] == 1e-2


def test_homotopy_options_validation():
    with pytest.raises(ValueError):
        HomotopyOptions(kappa=1.5)
    with pytest.raises(ValueError):
        HomotopyOptions(sigma_end=2.0)
    with pytest.raises(ValueError):
        HomotopyOptions(mode="magic")


def test_verbose_trace_json_lines():
    import io
    import json
    model = two_speed_sign_model(3.0, 1.0)
    prob, params = assemble_fesd(model, [-1.0], None, 0.2, 2,
                                 make_tableau("radau-iia", 1))
    buf = io.StringIO()
    opts = HomotopyOptions(verbose=True, log=buf)
    w0 = prob.initial_guess([-1.0], T=0.2)
    homotopy_newton_solve(prob.newton_system, w0, params, opts)
    lines = [l for l in buf.getvalue().splitlines() if l]
    assert lines
    rec = json.loads(lines[0])
    assert "sigma" in rec and "residual" in rec
