"""Built-in named models and scenarios used by the CLI and the test suite.

Closed forms used as references:

* oscillator: two spiraling linear fields separated by the unit circle; from
  x(0) = (1/e, 0) the inner spiral reaches the circle at t = 1 at the point
  (1, 0), after which the outer field takes over.
* sign-crossing (xdot in 2 - sign(x), x(0) = -1): crossing at t = 1/3,
  x(t) = -1 + 3t before, t - 1/3 after.
* sign-sliding (xdot in -sign(x)): from x(0) = 0.5 the surface x = 0 is
  reached at t = 0.5 and the trajectory slides (stays) there.
* sliding-exit (xdot in -sign(x) + t from x(0) = 0, via state augmentation
  tau' = 1): slides on x = 0 until tau = 1, then x(t) = (t-1)^2/2.
* spontaneous (xdot in sign(x), x(0) = 0): both staying at 0 and leaving
  with |x| = t are valid solutions; the integrator returns one of them.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .pss_model import PssModel, Subsystem
from .symbolics import VectorFunction, var

__all__ = [
    "two_speed_sign_model", "oscillator_model", "sliding_exit_model",
    "sliding_ocp_model", "simple_smooth_model", "oscillator_terminal_state",
    "SCENARIO_BUILDERS",
]


def two_speed_sign_model(speed_neg: float, speed_pos: float) -> PssModel:
    """Scalar model  xdot = speed_neg for x < 0,  speed_pos for x > 0.

    Covers xdot in -sign(x) (speeds 1, -1), 2 - sign(x) (speeds 3, 1) and the
    spontaneous-switch example sign(x) (speeds -1, 1).
    """
    x = var("x")
    c = VectorFunction([[x]], [x])
    f1 = VectorFunction([[x]], [speed_neg])
    f2 = VectorFunction([[x]], [speed_pos])
    # Region 0 is {x < 0}: row -1 makes diag(S_0) c = -x > 0 there.
    return PssModel([Subsystem([f1, f2], c, [[-1], [1]])])


def oscillator_model(omega: float = 2.0 * math.pi) -> PssModel:
    """Planar piecewise-linear oscillator with the unit circle as boundary.

    Inside the circle (c < 0) the field is A1 x (unstable clockwise spiral),
    outside (c > 0) it is A2 x (counterclockwise).
    """
    x1, x2 = var("x1"), var("x2")
    xs = [x1, x2]
    c = VectorFunction([xs], [x1 * x1 + x2 * x2 - 1.0])
    a1 = VectorFunction([xs], [x1 + omega * x2, -omega * x1 + x2])
    a2 = VectorFunction([xs], [x1 - omega * x2, omega * x1 + x2])
    return PssModel([Subsystem([a1, a2], c, [[-1], [1]])])


def oscillator_terminal_state(T: float, omega: float = 2.0 * math.pi,
                              t_switch: float = 1.0) -> np.ndarray:
    """Closed-form terminal state of the oscillator from x(0) = (1/e, 0).

    Both linear pieces have radial growth e^t; the inner piece rotates by
    -omega t (clockwise), the outer by +omega (t - 1) from (1, 0).
    """
    if T <= t_switch:
        r = math.exp(T - 1.0)
        return np.array([r * math.cos(omega * T), -r * math.sin(omega * T)])
    tau = T - t_switch
    r = math.exp(tau)
    return np.array([r * math.cos(omega * tau), r * math.sin(omega * tau)])


def sliding_exit_model() -> PssModel:
    """State (y, tau):  ydot in -sign(y) + tau,  taudot = 1."""
    y, tau = var("y"), var("tau")
    xs = [y, tau]
    c = VectorFunction([xs], [y])
    f1 = VectorFunction([xs], [1.0 + tau, 1.0])
    f2 = VectorFunction([xs], [-1.0 + tau, 1.0])
    return PssModel([Subsystem([f1, f2], c, [[-1], [1]])])


def simple_smooth_model() -> PssModel:
    """Single-region scalar model xdot = x (for smooth-order sanity tests).

    Uses a one-row sign matrix with a constant-sign switching function so the
    complementarity structure is trivially inactive.
    """
    x = var("x")
    c = VectorFunction([[x]], [x * x + 1.0])   # strictly positive
    f1 = VectorFunction([[x]], [x])
    return PssModel([Subsystem([f1], c, [[1]])])


def sliding_ocp_model() -> PssModel:
    """Planar two-subsystem model with controls, state x = (q1, q2, v1, v2).

        q1dot = -sign(phi1(q)) + v1,   phi1 = q1 + 0.15 q2^2
        q2dot = -sign(phi2(q)) + v2,   phi2 = -0.05 q1^3 + q2
        vdot  = u

    Each sign term is an independent switching subsystem; the shared (v, u)
    drift is split between the two subsystems' columns so the Filippov sums
    reproduce the full right-hand side.
    """
    q1, q2, v1, v2 = var("q1"), var("q2"), var("v1"), var("v2")
    u1, u2 = var("u1"), var("u2")
    xs = [q1, q2, v1, v2]
    us = [u1, u2]
    phi1 = q1 + 0.15 * q2 * q2
    phi2 = -0.05 * q1 * q1 * q1 + q2
    c1 = VectorFunction([xs], [phi1])
    c2 = VectorFunction([xs], [phi2])
    f1_neg = VectorFunction([xs, us], [1.0 + v1, 0.0, u1, 0.0])
    f1_pos = VectorFunction([xs, us], [-1.0 + v1, 0.0, u1, 0.0])
    f2_neg = VectorFunction([xs, us], [0.0, 1.0 + v2, 0.0, u2])
    f2_pos = VectorFunction([xs, us], [0.0, -1.0 + v2, 0.0, u2])
    sub1 = Subsystem([f1_neg, f1_pos], c1, [[-1], [1]])
    sub2 = Subsystem([f2_neg, f2_pos], c2, [[-1], [1]])
    return PssModel([sub1, sub2])


SCENARIO_BUILDERS = {
    "oscillator": lambda: oscillator_model(),
    "sign-crossing": lambda: two_speed_sign_model(3.0, 1.0),
    "sign-sliding": lambda: two_speed_sign_model(1.0, -1.0),
    "sliding-exit": lambda: sliding_exit_model(),
    "spontaneous": lambda: two_speed_sign_model(-1.0, 1.0),
    "ivp-ocp": lambda: two_speed_sign_model(3.0, 1.0),
    "sliding-ocp": lambda: sliding_ocp_model(),
}
