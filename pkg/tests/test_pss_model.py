import math

import numpy as np
import pytest

from fesd.pss_model import (PssModel, Subsystem, build_indicator_functions,
                            region_membership)
from fesd.scenarios import (oscillator_model, sliding_ocp_model,
                            two_speed_sign_model)
from fesd.symbolics import VectorFunction, var


def test_sign_example_indicators():
    model = two_speed_sign_model(1.0, -1.0)
    g = build_indicator_functions(model.subsystems[0])
    np.testing.assert_allclose(g.evaluate([0.7]), [0.7, -0.7])


def test_indicator_matrix_product_form():
    # g = -S c for S = [[1], [-1]] gives (-c, c).
    x = var("x")
    c = VectorFunction([[x]], [x])
    f = VectorFunction([[x]], [1.0])
    sub = Subsystem([f, f], c, [[1], [-1]])
    g = build_indicator_functions(sub)
    np.testing.assert_allclose(g.evaluate([0.3]), [-0.3, 0.3])


def test_indicator_four_region_product():
    x1, x2 = var("x1"), var("x2")
    c = VectorFunction([[x1, x2]], [x1, x2])
    f = VectorFunction([[x1, x2]], [1.0, 0.0])
    S = [[1, 1], [1, -1], [-1, 1], [-1, -1]]
    sub = Subsystem([f] * 4, c, S)
    g = build_indicator_functions(sub)
    a, b = 0.4, -1.3
    np.testing.assert_allclose(g.evaluate([a, b]),
                               [-a - b, -a + b, a - b, a + b])


def test_region_membership_sign_example():
    model = two_speed_sign_model(1.0, -1.0)
    assert region_membership(model, [-1.0], tol=0.0) == [{0}]
    assert region_membership(model, [0.0]) == [{0, 1}]


def test_region_membership_product():
    m1 = two_speed_sign_model(1.0, -1.0).subsystems[0]
    x = m1.x_vars[0]
    # second independent subsystem on the same scalar state, shifted boundary
    c2 = VectorFunction([list(m1.x_vars)], [x - 0.25])
    f = VectorFunction([list(m1.x_vars)], [0.0])
    m2 = Subsystem([f, f], c2, [[-1], [1]])
    model = PssModel([m1, m2])
    assert region_membership(model, [0.5]) == [{1}, {1}]
    assert region_membership(model, [0.0]) == [{0, 1}, {0}]


def test_invalid_sign_matrix_zero_entry():
    x = var("x")
    c = VectorFunction([[x]], [x])
    f = VectorFunction([[x]], [1.0])
    with pytest.raises(ValueError):
        Subsystem([f, f], c, [[0], [1]])


def test_invalid_sign_matrix_duplicate_row():
    x = var("x")
    c = VectorFunction([[x]], [x])
    f = VectorFunction([[x]], [1.0])
    with pytest.raises(ValueError):
        Subsystem([f, f], c, [[1], [1]])


def test_subsystem_count_limit():
    x = var("x")
    c = VectorFunction([[x]], [x])
    f = VectorFunction([[x]], [1.0])
    with pytest.raises(ValueError):
        Subsystem([f, f, f], c, [[1], [-1], [1]])  # duplicate + over limit


def _sample_region_interior(sub, rng, n_samples):
    """Random points strictly inside each region, by rejection sampling."""
    hits = []
    dim = len(sub.x_vars)
    while len(hits) < n_samples:
        x = rng.uniform(-2.0, 2.0, dim)
        cval = sub.c.evaluate(x)
        for i in range(sub.n_f):
            if np.all(np.diag(sub.S[i]) @ cval > 1e-6):
                hits.append((i, x))
    return hits[:n_samples]


@pytest.mark.parametrize("builder", [
    lambda: two_speed_sign_model(3.0, 1.0),
    oscillator_model,
    sliding_ocp_model,
])
def test_interior_argmin_identifies_region(builder):
    # Inside region i (strictly), g_i is the unique minimizer of g.
    model = builder()
    rng = np.random.default_rng(7)
    for sub in model.subsystems:
        g = build_indicator_functions(sub)
        for i, x in _sample_region_interior(sub, rng, 1000 // len(
                model.subsystems)):
            gv = g.evaluate(x)
            assert int(np.argmin(gv)) == i
            others = np.delete(gv, i)
            assert np.all(gv[i] < others)


def test_indicator_linearity_in_c():
    x = var("x")
    f = VectorFunction([[x]], [1.0])
    for alpha in (0.5, 2.0, -3.0):
        c1 = VectorFunction([[x]], [x * x - 1.0])
        c2 = VectorFunction([[x]], [alpha * (x * x - 1.0)])
        g1 = build_indicator_functions(Subsystem([f, f], c1, [[-1], [1]]))
        g2 = build_indicator_functions(Subsystem([f, f], c2, [[-1], [1]]))
        for xv in np.linspace(-2, 2, 9):
            np.testing.assert_allclose(g2.evaluate([xv]),
                                       alpha * g1.evaluate([xv]), atol=1e-14)


def test_oscillator_region_orientation():
    # x(0) = (1/e, 0) lies inside the circle, where the first field applies.
    model = oscillator_model()
    assert region_membership(model, [math.exp(-1), 0.0]) == [{0}]
    assert region_membership(model, [2.0, 0.0]) == [{1}]
