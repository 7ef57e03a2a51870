import numpy as np
import pytest

from fesd.dcs_stewart import (AlgebraicPoint, LcpUnsolvableError, StewartDcs,
                              algebraic_point, fischer_burmeister,
                              lcp_enumerate, predict_active_set, residual_glp,
                              sliding_dae_rhs, solve_parametric_lp)
from fesd.scenarios import oscillator_model, two_speed_sign_model


@pytest.fixture
def sign_dcs():
    return StewartDcs(two_speed_sign_model(1.0, -1.0))        # -sign(x)


@pytest.fixture
def two_sign_dcs():
    return StewartDcs(two_speed_sign_model(3.0, 1.0))         # 2 - sign(x)


def test_parametric_lp_interior():
    pt = solve_parametric_lp(np.array([-1.0, 1.0]))
    assert pt.mu[0] == -1.0
    np.testing.assert_allclose(pt.lam[0], [0.0, 2.0])
    np.testing.assert_allclose(pt.theta[0], [1.0, 0.0])


def test_parametric_lp_boundary_tie():
    pt = solve_parametric_lp(np.array([0.0, 0.0]))
    assert pt.mu[0] == 0.0
    np.testing.assert_allclose(pt.lam[0], [0.0, 0.0])
    np.testing.assert_allclose(pt.theta[0], [0.5, 0.5])


def test_parametric_lp_multiway_tie():
    pt = solve_parametric_lp(np.array([3.0, 5.0, 3.0]))
    assert pt.mu[0] == 3.0
    np.testing.assert_allclose(pt.theta[0], [0.5, 0.0, 0.5])


def test_lp_solution_zeroes_residual(sign_dcs):
    rng = np.random.default_rng(11)
    for _ in range(200):
        x = rng.uniform(-2, 2, 1)
        pt = algebraic_point(sign_dcs, x)
        r = residual_glp(sign_dcs, x, pt)
        assert np.max(np.abs(r)) <= 1e-14


def test_residual_glp_zero_at_lp_point(sign_dcs):
    pt = AlgebraicPoint((np.array([1.0, 0.0]),), (np.array([0.0, 2.0]),),
                        (-1.0,))
    r = residual_glp(sign_dcs, [-1.0], pt)
    np.testing.assert_allclose(r, 0.0, atol=1e-15)


def test_residual_glp_wrong_theta(sign_dcs):
    pt = AlgebraicPoint((np.array([0.0, 1.0]),), (np.array([0.0, 2.0]),),
                        (-1.0,))
    r = residual_glp(sign_dcs, [-1.0], pt)
    # complementarity row Psi(1, 2) = 3 - sqrt(5)
    assert abs(np.max(np.abs(r)) - (3.0 - np.sqrt(5.0))) < 1e-12
    assert np.linalg.norm(r) > 0.7


def test_residual_glp_zero_point_violates_simplex(sign_dcs):
    pt = AlgebraicPoint((np.zeros(2),), (np.zeros(2),), (0.0,))
    r = residual_glp(sign_dcs, [0.3], pt)
    # simplex row 1 - e'theta = 1
    assert 1.0 in np.round(np.abs(r), 12)


def test_fischer_burmeister_values():
    assert fischer_burmeister(1.0, 2.0) == pytest.approx(3.0 - np.sqrt(5.0))
    assert fischer_burmeister(0.0, 0.0) == 0.0
    assert fischer_burmeister(0.0, 5.0) == 0.0


def test_sliding_rhs_minus_sign(sign_dcs):
    out = sliding_dae_rhs(sign_dcs, [0.0], {0, 1})
    np.testing.assert_allclose(out.theta[0], [0.5, 0.5], atol=1e-14)
    np.testing.assert_allclose(out.xdot, [0.0], atol=1e-14)
    assert out.mu_dot[0] == pytest.approx(0.0, abs=1e-14)
    assert out.feasible


def test_sliding_rhs_single_region(two_sign_dcs):
    out = sliding_dae_rhs(two_sign_dcs, [-1.0], {0})
    np.testing.assert_allclose(out.theta[0], [1.0, 0.0])
    np.testing.assert_allclose(out.xdot, [3.0])
    # mu = g_0(x) = x along the trajectory, so mu_dot = xdot
    assert out.mu_dot[0] == pytest.approx(3.0)
    assert out.feasible


def test_sliding_rhs_crossing_flagged_infeasible(two_sign_dcs):
    # For 2 - sign(x) the boundary admits no sliding mode: the bordered
    # solve yields theta = (-1/2, 3/2) outside the simplex.
    out = sliding_dae_rhs(two_sign_dcs, [0.0], {0, 1})
    assert not out.feasible
    np.testing.assert_allclose(out.theta[0], [-0.5, 1.5], atol=1e-12)


def test_lcp_enumeration_paper_example():
    M = np.array([[8.0, 6.0], [2.0, 4.0]])
    sols = lcp_enumerate(M, -np.ones(2))
    sols = [(z, w) for z, w in sols if np.sum(z) > 0]
    assert len(sols) == 1
    z, w = sols[0]
    np.testing.assert_array_equal(z, [0.0, 0.25])
    np.testing.assert_array_equal(w, [0.5, 0.0])


def test_lcp_solutions_satisfy_lcp():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(1, 5))
        M = rng.uniform(-1, 2, (n, n))
        q = rng.uniform(-1, 1, n)
        for z, w in lcp_enumerate(M, q):
            np.testing.assert_allclose(w, M @ z + q, atol=1e-10)
            assert np.all(z >= -1e-12)
            assert np.all(w >= -1e-12)
            assert abs(w @ z) <= 1e-10


def test_predict_active_set_crossing(two_sign_dcs):
    res = predict_active_set(two_sign_dcs, [0.0], {0, 1}, alpha=5.0)
    np.testing.assert_array_equal(res.lcp.M, [[8.0, 6.0], [2.0, 4.0]])
    assert res.unique
    assert res.supports[0] == (1,)
    np.testing.assert_array_equal(res.theta_tilde[0], [0.0, 0.25])
    np.testing.assert_array_equal(res.w_tilde[0], [0.5, 0.0])
    np.testing.assert_allclose(res.theta[0], [0.0, 1.0])


def test_predict_active_set_default_alpha(two_sign_dcs):
    # policy alpha = max(0, -min entry) + 1 = 4 for M = [[3,1],[-3,-1]]
    res = predict_active_set(two_sign_dcs, [0.0], {0, 1})
    assert res.lcp.alpha == 4.0
    assert np.all(res.lcp.M > 0)
    assert res.supports[0] == (1,)


def test_predict_active_set_sliding(sign_dcs):
    res = predict_active_set(sign_dcs, [0.0], {0, 1})
    assert res.unique
    assert res.supports[0] == (0, 1)
    assert np.all(res.theta_tilde[0] > 0)
    np.testing.assert_allclose(res.theta[0], [0.5, 0.5])


def test_predict_active_set_singleton(two_sign_dcs):
    res = predict_active_set(two_sign_dcs, [-1.0], {0})
    assert res.unique and res.supports[0] == (0,)
    # scalar LCP: theta_tilde = 1/M11 > 0
    assert res.theta_tilde[0][0] == pytest.approx(1.0 / res.lcp.M[0, 0])
    np.testing.assert_allclose(res.theta[0], [1.0])


def test_prediction_strong_stability_spot_check():
    # Perturbing the example LCP data by 1e-6 moves the solution by O(1e-6)
    # and keeps the support set.
    M = np.array([[8.0, 6.0], [2.0, 4.0]])
    q = -np.ones(2)
    rng = np.random.default_rng(5)
    base = lcp_enumerate(M, q)
    base = [(z, w) for z, w in base if np.sum(z) > 0][0]
    for _ in range(20):
        dM = rng.uniform(-1, 1, (2, 2)) * 1e-6
        dq = rng.uniform(-1, 1, 2) * 1e-6
        sols = [(z, w) for z, w in lcp_enumerate(M + dM, q + dq)
                if np.sum(z) > 0]
        assert len(sols) == 1
        z, w = sols[0]
        assert np.linalg.norm(z - base[0]) <= 1e-5
        assert set(np.flatnonzero(z > 1e-9)) == {1}


def test_oscillator_rhs_matches_field():
    dcs = StewartDcs(oscillator_model())
    x = np.array([0.2, 0.1])
    pt = algebraic_point(dcs, x)
    om = 2 * np.pi
    expected = np.array([x[0] + om * x[1], -om * x[0] + x[1]])
    np.testing.assert_allclose(dcs.rhs(x, pt.theta), expected, atol=1e-14)
