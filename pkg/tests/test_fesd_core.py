import math

import numpy as np
import pytest

from fesd.fesd_core import (FesdOptions, FesdProblem, assemble_fesd,
                            boundary_lp_extension, cross_complementarity,
                            precompute_initial_multipliers,
                            step_equilibration, switch_indicators)
from fesd.rk_core import make_tableau
from fesd.scenarios import (oscillator_model, simple_smooth_model,
                            two_speed_sign_model)


def test_initial_multipliers_sign_example():
    model = two_speed_sign_model(3.0, 1.0)
    lam, mu = precompute_initial_multipliers(model, [-1.0])
    np.testing.assert_allclose(mu, [-1.0])
    np.testing.assert_allclose(lam[0], [0.0, 2.0])


def test_initial_multipliers_boundary_start():
    model = two_speed_sign_model(3.0, 1.0)
    lam, mu = precompute_initial_multipliers(model, [0.0])
    np.testing.assert_allclose(mu, [0.0])
    np.testing.assert_allclose(lam[0], [0.0, 0.0])


def test_initial_multipliers_oscillator():
    model = oscillator_model()
    x0 = [math.exp(-1), 0.0]
    c0 = math.exp(-2) - 1.0
    lam, mu = precompute_initial_multipliers(model, x0)
    np.testing.assert_allclose(mu, [c0], atol=1e-14)
    np.testing.assert_allclose(lam[0], [0.0, -2.0 * c0], atol=1e-14)


def test_initial_multipliers_nonfinite():
    model = two_speed_sign_model(3.0, 1.0)
    with pytest.raises(ValueError):
        precompute_initial_multipliers(model, [np.nan])


def test_cross_comp_no_switch_zero():
    theta = [[[1.0, 0.0]], [[1.0, 0.0]]]
    lam = [[[0.0, 2.0], [0.0, 1.8]], [[0.0, 1.8], [0.0, 1.5]]]
    entries = cross_complementarity(theta, lam)
    assert len(entries) == 1
    assert entries[0] == 0.0


def test_cross_comp_switch_boundary_zero():
    # support {1} on the left element, {2} on the right, boundary lambda = 0
    theta = [[[1.0, 0.0]], [[0.0, 1.0]]]
    lam = [[[0.0, 2.0], [0.0, 0.0]], [[0.0, 0.0], [2.0, 0.0]]]
    entries = cross_complementarity(theta, lam)
    assert entries[0] == 0.0


def test_cross_comp_positive_product():
    theta = [[[0.3], [0.7]], [[1.0], [1.0]]]
    lam = [[[0.0], [0.0], [0.2]], [[0.2], [0.0], [0.0]]]
    # theta stage 1 of element 0 pairs with lambda stage 2 value 0.2
    entries = cross_complementarity(theta, lam)
    assert entries[0] >= 0.06


def test_cross_comp_sparse_mode():
    theta = [[[0.5]], [[0.5]]]
    lam = [[[1.0], [2.0]], [[2.0], [3.0]]]
    rows = cross_complementarity(theta, lam, mode="sparse")
    # per element: one stage pairing with the left boundary value only
    assert rows == [0.5 * 1.0, 0.5 * 2.0]
    agg = cross_complementarity(theta, lam)
    assert agg[0] == pytest.approx(sum(rows))


def test_cross_comp_bad_mode():
    with pytest.raises(ValueError):
        cross_complementarity([[[1.0]]], [[[0.0], [0.0]]], mode="magic")


def test_step_equilibration_arithmetic():
    # eta = 0.5 via theta sums sqrt(0.5) on both sides, all lambda zero
    a = math.sqrt(0.5)
    theta = [[[a]], [[a]]]
    lam = [[[0.0], [0.0]], [[0.0], [0.0]]]
    rows = step_equilibration([0.1, 0.2], theta, lam, mode="equality")
    assert rows == [pytest.approx(0.05)]
    rows_t = step_equilibration([0.1, 0.2], theta, lam, mode="tanh")
    assert rows_t == [pytest.approx(0.1 * math.tanh(0.5))]


def test_step_equilibration_vanishes_at_switch():
    # active-set change: lambda support swaps, theta support swaps
    theta = [[[1.0, 0.0]], [[0.0, 1.0]]]
    lam = [[[0.0, 2.0], [0.0, 0.0]], [[0.0, 0.0], [2.0, 0.0]]]
    ind = switch_indicators(theta, lam)
    assert ind[0].eta == 0.0
    rows = step_equilibration([0.7, 0.1], theta, lam, mode="equality")
    assert rows == [0.0]


def test_step_equilibration_positive_without_switch():
    theta = [[[1.0, 0.0]], [[1.0, 0.0]]]
    lam = [[[0.0, 2.0], [0.0, 1.8]], [[0.0, 1.8], [0.0, 1.5]]]
    ind = switch_indicators(theta, lam)
    assert ind[0].eta > 0
    rows = step_equilibration([0.1, 0.1], theta, lam)
    assert rows == [0.0]


def test_step_equilibration_bad_mode():
    with pytest.raises(ValueError):
        step_equilibration([0.1, 0.1], [[[1.0]], [[1.0]]],
                           [[[0.0], [0.0]], [[0.0], [0.0]]], mode="magic")


def test_problem_counts_radau():
    model = two_speed_sign_model(3.0, 1.0)
    prob = FesdProblem(model, 2, make_tableau("radau-iia", 2))
    assert prob.n_Z == 27
    assert len(prob.variables) == 29
    assert prob.system.n_res == 30
    assert prob.newton_system.n == prob.newton_system.n_res == 29
    assert len(prob.cross_entries) == 1
    assert len(prob.step_rows) == 1


def test_problem_counts_gauss_boundary_triples():
    model = two_speed_sign_model(3.0, 1.0)
    prob = FesdProblem(model, 3, make_tableau("gauss-legendre", 1))
    # 2 boundary triples at (2 n_f + 1) variables each
    assert prob.n_Z == 4 + 3 * 6 + 2 * 5
    assert len(prob.variables) == prob.n_Z + 3
    assert prob.system.n_res == prob.n_Z + 2 * 3 - 1
    assert prob.newton_system.n == prob.newton_system.n_res
    assert len(prob.boundary_groups) == 2


def test_problem_degenerate_single_element():
    model = two_speed_sign_model(3.0, 1.0)
    prob = FesdProblem(model, 1, make_tableau("radau-iia", 1))
    assert prob.cross_entries == [] and prob.step_rows == []
    assert prob.system.n_res == prob.n_Z + 1
    assert prob.newton_system.n == prob.newton_system.n_res


def test_problem_invalid_inputs():
    model = two_speed_sign_model(3.0, 1.0)
    with pytest.raises(ValueError):
        FesdProblem(model, 0, make_tableau("radau-iia", 1))
    with pytest.raises(ValueError):
        assemble_fesd(model, [-1.0], None, -1.0, 2,
                      make_tableau("radau-iia", 1))


def test_boundary_lp_extension_rejects_stiff_tableau():
    model = two_speed_sign_model(3.0, 1.0)
    prob = FesdProblem(model, 2, make_tableau("radau-iia", 1))
    with pytest.raises(ValueError):
        boundary_lp_extension(prob.sym, prob.tableau, prob.s0_params,
                              None, None, None, None)


def _exact_no_switch_solution(prob, T):
    """Hand-built exact solution: implicit Euler, 2-sign model from -1,
    no crossing on [0, T]."""
    h = T / prob.N_FE
    sl = prob.layout.slices
    w = np.zeros(len(prob.variables))
    x = -1.0
    w[sl["x0"]] = x
    for n in range(prob.N_FE):
        x = x + 3.0 * h
        assert x < 0
        w[sl[f"V{n}_0"]] = 3.0
        w[sl[f"Th{n}_0_0"]] = [1.0, 0.0]
        w[sl[f"La{n}_0_0"]] = [0.0, -2.0 * x]
        w[sl[f"Mu{n}_0"]] = x
        w[sl[f"x{n + 1}"]] = x
    w[prob.h_slice] = h
    return w


def test_exact_solution_zeroes_full_system():
    model = two_speed_sign_model(3.0, 1.0)
    T = 0.2
    prob, params = assemble_fesd(model, [-1.0], None, T, 2,
                                 make_tableau("radau-iia", 1))
    w = _exact_no_switch_solution(prob, T)
    r = prob.system.residual(w, params)
    assert r.shape == (prob.system.n_res,)
    assert np.max(np.abs(r)) < 1e-13
    # the square smoothed companion is also exact at sigma = 0 here
    rn = prob.newton_system.residual(w, params)
    assert np.max(np.abs(rn)) < 1e-13


def test_detect_supports_and_reduced_system():
    model = two_speed_sign_model(3.0, 1.0)
    T = 0.2
    prob, params = assemble_fesd(model, [-1.0], None, T, 2,
                                 make_tableau("radau-iia", 1))
    w = _exact_no_switch_solution(prob, T)
    supports = prob.detect_supports(w)
    assert supports == [[frozenset({0})], [frozenset({0})]]
    red = prob.reduced_system(supports)
    r = red.residual(w, params)
    assert np.max(np.abs(r)) < 1e-13
    # no-switch boundary contributes an equal-step row; counts are square
    assert red.n_res == red.n


def test_perturbed_cross_products_break_invariant():
    model = two_speed_sign_model(3.0, 1.0)
    T = 0.2
    prob, params = assemble_fesd(model, [-1.0], None, T, 2,
                                 make_tableau("radau-iia", 1))
    w = _exact_no_switch_solution(prob, T)
    w[prob.layout.slices["Th1_0_0"]] = [0.7, 0.3]      # inactive theta > 0
    r = prob.system.residual(w, params)
    n_cross = prob.n_Z
    assert abs(r[n_cross]) > 0.1        # first cross entry is nonzero


def test_initial_guess_and_bounds():
    model = two_speed_sign_model(3.0, 1.0)
    prob, params = assemble_fesd(model, [-1.0], None, 1.0, 3,
                                 make_tableau("radau-iia", 2))
    w = prob.initial_guess([-1.0], T=1.0)
    np.testing.assert_allclose(prob.steps(w), [1.0 / 3.0] * 3)
    np.testing.assert_allclose(prob.states(w), -np.ones((4, 1)))
    lb, ub = prob.bounds(1.0)
    assert np.all(lb[prob.h_slice] == 0.0)
    np.testing.assert_allclose(ub[prob.h_slice], 2.0 / 3.0)
    sl = prob.layout.slices["Th0_0_0"]
    assert np.all(lb[sl] == 0.0) and np.all(np.isinf(ub[sl]))


def test_smooth_model_eta_positive_everywhere():
    # single-region model: lambda identically zero, theta = 1; eta = n_s^2
    model = simple_smooth_model()
    prob, params = assemble_fesd(model, [1.0], None, 0.5, 3,
                                 make_tableau("radau-iia", 1))
    sl = prob.layout.slices
    w = np.zeros(len(prob.variables))
    x = 1.0
    h = 0.5 / 3
    w[sl["x0"]] = x
    for n in range(3):
        x = x / (1.0 - h)
        w[sl[f"V{n}_0"]] = x
        w[sl[f"Th{n}_0_0"]] = 1.0
        w[sl[f"Mu{n}_0"]] = -(x * x + 1.0)
        w[sl[f"x{n + 1}"]] = x
    w[prob.h_slice] = h
    r = prob.system.residual(w, params)
    assert np.max(np.abs(r)) < 1e-12
    # eta stays strictly positive without switches
    from fesd.symbolics import ResidualSystem
    eta_sys = ResidualSystem(prob.variables, prob.param_names,
                             prob.eta_exprs)
    eta = eta_sys.residual(w, params)
    assert np.all(eta > 0.5)


def test_pack_params_layout():
    model = two_speed_sign_model(3.0, 1.0)
    prob = FesdProblem(model, 2, make_tableau("radau-iia", 1))
    p = prob.pack_params(1e-6, [-1.0], None, 0.4)
    # (sigma, s0, T, mu00, K_1)
    assert p[0] == 1e-6 and p[1] == -1.0 and p[2] == 0.4
    assert p[3] == -1.0                       # mu00 = min g(s0)
    # K_1: structural 2 * n_s^2 * n_theta = 4 minus n_s * #{lam00 == 0} = 1
    assert p[4] == 3.0


def test_pack_params_boundary_start_discounts_lam00():
    model = two_speed_sign_model(3.0, 1.0)
    prob = FesdProblem(model, 2, make_tableau("radau-iia", 1))
    p = prob.pack_params(1e-6, [0.0], None, 0.4)
    assert p[3] == 0.0
    assert p[4] == 2.0          # both lam00 components vanish at x0 = 0
