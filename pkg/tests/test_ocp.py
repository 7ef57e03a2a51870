import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from fesd.ocp import (OcpSpec, cold_start, evaluate_objective_curve,
                      extract_solution, solve_ocp, transcribe)
from fesd.pss_model import PssModel, Subsystem
from fesd.rk_core import make_tableau
from fesd.scenarios import two_speed_sign_model
from fesd.solver import HomotopyOptions, homotopy_solve
from fesd.symbolics import VectorFunction, var


def _objective_oracle(x0):
    """Piecewise integration of the 2 - sign(x) tracking problem.

    From x0 < 0 the state moves with slope 3 until it crosses zero at
    t_s = -x0/3 and with slope 1 afterwards; the running cost is x^2 over
    [0, 2] plus the terminal penalty (x(2) - 5/3)^2.
    """
    ts = -x0 / 3.0
    run = -x0 ** 3 / 9.0 + (2.0 - ts) ** 3 / 3.0
    return run + (2.0 - ts - 5.0 / 3.0) ** 2


def _tracking_spec(**kw):
    model = two_speed_sign_model(3.0, 1.0)
    x = model.x_vars[0]
    base = dict(model=model, T_ctrl=2.0, N_ctrl=1, N_FE=5,
                L_int=x * x, L_end=(x - 5.0 / 3.0) ** 2,
                x0=None, x0_guess=[-1.0])
    base.update(kw)
    return OcpSpec(**base)


def _robust_opts():
    return HomotopyOptions(sigma0=10.0, kappa=0.3, sigma_end=1e-7,
                           comp_tol=1e-6, max_inner=3000)


def _controlled_integrator_model():
    """Single-region model xdot = u with a trivial switching function."""
    x, u = var("x"), var("u")
    c = VectorFunction([[x]], [x * x + 1.0])
    f = VectorFunction([[x], [u]], [u])
    return PssModel([Subsystem([f], c, [[1]])])


# ---------------------------------------------------------------------------
# Specification validation
# ---------------------------------------------------------------------------

def test_spec_validation():
    model = two_speed_sign_model(3.0, 1.0)
    with pytest.raises(ValueError):
        OcpSpec(model=model, T_ctrl=0.0, N_ctrl=1, N_FE=2, x0=[-1.0])
    with pytest.raises(ValueError):
        OcpSpec(model=model, T_ctrl=1.0, N_ctrl=0, N_FE=2, x0=[-1.0])
    with pytest.raises(ValueError):
        OcpSpec(model=model, T_ctrl=1.0, N_ctrl=1, N_FE=2, x0=[-1.0],
                h_min=1.0, h_max=0.5)
    with pytest.raises(ValueError):
        OcpSpec(model=model, T_ctrl=1.0, N_ctrl=1, N_FE=2, x0=[-1.0],
                step_mode="magic")
    with pytest.raises(ValueError):
        OcpSpec(model=model, T_ctrl=1.0, N_ctrl=1, N_FE=2)   # free, no guess
    with pytest.raises(ValueError):
        OcpSpec(model=model, T_ctrl=1.0, N_ctrl=1, N_FE=2, x0=[1.0, 2.0])


def test_spec_defaults():
    spec = _tracking_spec(N_ctrl=4)
    assert spec.tableau.family == "radau-iia"
    assert spec.T_interval == pytest.approx(0.5)
    assert spec.h_max_effective == pytest.approx(2.0 * 0.5 / 5)


# ---------------------------------------------------------------------------
# Transcription structure
# ---------------------------------------------------------------------------

def test_transcription_structure():
    spec = _tracking_spec(N_ctrl=2, N_FE=3, x0=[-1.0], x0_guess=None)
    nlp = transcribe(spec)
    assert len(nlp.comp_pairs) > 0
    # one step equilibration row per interior boundary of each interval
    assert len(nlp.comp_rows) == 2 * (3 - 1)
    sl = nlp.info.layout.slices
    np.testing.assert_array_equal(nlp.lb[sl["h0"]], 0.0)
    np.testing.assert_array_equal(nlp.ub[sl["h0"]], spec.h_max_effective)
    # theta stage variables carry nonnegativity bounds
    assert np.all(nlp.lb[sl["Th0_0_0_0"]] == 0.0)
    w0 = cold_start(nlp)
    assert w0.shape == (len(nlp.variables),)
    np.testing.assert_allclose(w0[sl["s0"]], [-1.0])
    np.testing.assert_allclose(w0[sl["h1"]], spec.T_interval / 3)


def test_transcription_step_mode_off():
    spec = _tracking_spec(N_ctrl=1, N_FE=3, x0=[-1.0], x0_guess=None,
                          step_mode="off")
    nlp = transcribe(spec)
    assert len(nlp.comp_rows) == 0


# ---------------------------------------------------------------------------
# Quadrature exactness on a smooth controlled model
# ---------------------------------------------------------------------------

def test_control_cost_quadrature_exact():
    model = _controlled_integrator_model()
    x, u = model.x_vars[0], model.u_vars[0]
    spec = OcpSpec(model=model, T_ctrl=1.5, N_ctrl=3, N_FE=2,
                   L_int=u * u + x, x0=[0.25],
                   u_lb=[0.7], u_ub=[0.7])
    sol = solve_ocp(spec)
    assert sol.report.converged
    np.testing.assert_allclose(sol.controls, 0.7, atol=1e-8)
    # xdot = 0.7: closed-form cost 1.5 * 0.49 + int (0.25 + 0.7 t) dt
    ref = 1.5 * 0.49 + 0.25 * 1.5 + 0.7 * 1.5 ** 2 / 2
    assert sol.objective == pytest.approx(ref, abs=1e-8)
    np.testing.assert_allclose(sol.states[-1], [0.25 + 0.7 * 1.5],
                               atol=1e-8)
    # interval grids are equidistant partitions of the control grid
    for k in range(3):
        assert np.sum(sol.h[k]) == pytest.approx(spec.T_interval, abs=1e-12)


def test_free_control_minimizes_quadratic_cost():
    model = _controlled_integrator_model()
    x, u = model.x_vars[0], model.u_vars[0]
    spec = OcpSpec(model=model, T_ctrl=1.0, N_ctrl=2, N_FE=2,
                   L_int=(u - 0.3) ** 2, x0=[0.0])
    sol = solve_ocp(spec)
    assert sol.report.converged
    np.testing.assert_allclose(sol.controls, 0.3, atol=1e-6)
    assert sol.objective == pytest.approx(0.0, abs=1e-8)


# ---------------------------------------------------------------------------
# Switched tracking problem with a free initial state
# ---------------------------------------------------------------------------

def test_tracking_ocp_matches_piecewise_oracle():
    res = minimize_scalar(_objective_oracle, bounds=(-5.9, -0.1),
                          method="bounded",
                          options={"xatol": 1e-12})
    spec = _tracking_spec()
    sol = solve_ocp(spec, _robust_opts())
    assert sol.report.converged
    x0_star = float(sol.states[0][0])
    assert abs(x0_star - res.x) <= 1e-3
    assert abs(sol.objective - res.fun) <= 1e-4
    # the element grid places one boundary on the switching time
    ts = -x0_star / 3.0
    assert np.min(np.abs(sol.times - ts)) <= 1e-5
    assert np.sum(sol.h[0]) == pytest.approx(2.0, abs=1e-12)
    # exactly one active-set change, region 0 -> region 1
    assert len(sol.switches) == 1
    assert sol.switches[0].support_before == (frozenset({0}),)
    assert sol.switches[0].support_after == (frozenset({1}),)


def test_tracking_ocp_initialization_independence():
    spec = _tracking_spec()
    nlp = transcribe(spec)
    sl = {v.name: i for i, v in enumerate(nlp.variables)}
    w0_base = cold_start(nlp)
    sols = []
    for guess in (-0.6, -2.4, -4.5):
        w0 = w0_base.copy()
        for name, idx in sl.items():
            if name == "s0_0" or (name.startswith("x0_")
                                  and name.endswith("_0")):
                w0[idx] = guess
        w, rep = homotopy_solve(nlp, _robust_opts(), w0)
        assert rep.converged
        sols.append(w[sl["s0_0"]])
    assert max(sols) - min(sols) <= 1e-3


# ---------------------------------------------------------------------------
# Objective curves
# ---------------------------------------------------------------------------

def test_objective_curve_accuracy():
    spec = _tracking_spec(N_ctrl=2, N_FE=3)
    xs = [-1.7, -1.3, -0.8]
    recs = evaluate_objective_curve(spec, xs)
    for rec in recs:
        ref = _objective_oracle(rec["x0"])
        assert rec["fesd_ok"] and rec["standard_ok"]
        assert abs(rec["V_fesd"] - ref) <= 1e-8
        # the fixed grid misses the switching time
        assert abs(rec["V_standard"] - ref) >= 1e-3


def test_objective_curve_validation():
    model = _controlled_integrator_model()
    spec = OcpSpec(model=model, T_ctrl=1.0, N_ctrl=1, N_FE=2, x0=[0.0])
    with pytest.raises(ValueError):
        evaluate_objective_curve(spec, [0.0])
    with pytest.raises(ValueError):
        evaluate_objective_curve(_tracking_spec(), [0.0], modes=("magic",))
