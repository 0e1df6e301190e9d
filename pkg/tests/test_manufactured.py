"""Validation of the hard-coded manufactured solution.

First derivatives are checked against central finite differences of u and p;
the loads f and g are then checked against the strong equations evaluated
with finite differences of the *stored* first derivatives, which pins the
transcription of every second-derivative term without symbolic tools.
"""

import numpy as np
import pytest

from biotfem.driver import manufactured_solution, zero_solution
from biotfem.forms import ModelParams

STEP = 1e-5


@pytest.fixture(scope="module")
def setup():
    params = ModelParams(nu=0.3, E=1.4, alpha=0.9, s0=0.2, kappa=1.3)
    exact = manufactured_solution(params)
    rng = np.random.default_rng(42)
    pts = rng.uniform(0.05, 0.95, size=(40, 2))
    times = (0.0, 0.37, 1.0)
    return params, exact, pts, times


def fd_x(fn, pts, t, comp=None):
    dp = np.array([STEP, 0.0])
    hi, lo = np.asarray(fn(pts + dp, t)), np.asarray(fn(pts - dp, t))
    return (hi - lo) / (2 * STEP)


def fd_y(fn, pts, t):
    dp = np.array([0.0, STEP])
    hi, lo = np.asarray(fn(pts + dp, t)), np.asarray(fn(pts - dp, t))
    return (hi - lo) / (2 * STEP)


def fd_t(fn, pts, t):
    return (np.asarray(fn(pts, t + STEP)) - np.asarray(fn(pts, t - STEP))) / (2 * STEP)


def rel_err(a, b):
    scale = max(np.abs(b).max(), 1e-3)
    return np.abs(a - b).max() / scale


def test_grad_u_matches_finite_differences(setup):
    _, exact, pts, times = setup
    for t in times:
        g = exact.grad_u(pts, t)
        assert rel_err(g[:, 0, 0], fd_x(lambda p, s: exact.u(p, s)[:, 0], pts, t)) <= 1e-6
        assert rel_err(g[:, 0, 1], fd_y(lambda p, s: exact.u(p, s)[:, 0], pts, t)) <= 1e-6
        assert rel_err(g[:, 1, 0], fd_x(lambda p, s: exact.u(p, s)[:, 1], pts, t)) <= 1e-6
        assert rel_err(g[:, 1, 1], fd_y(lambda p, s: exact.u(p, s)[:, 1], pts, t)) <= 1e-6


def test_div_u_is_trace_of_gradient(setup):
    _, exact, pts, times = setup
    for t in times:
        g = exact.grad_u(pts, t)
        assert rel_err(exact.div_u(pts, t), g[:, 0, 0] + g[:, 1, 1]) <= 1e-13


def test_grad_p_and_time_derivatives(setup):
    _, exact, pts, times = setup
    for t in times:
        gp = exact.grad_p(pts, t)
        assert rel_err(gp[:, 0], fd_x(exact.p, pts, t)) <= 1e-6
        assert rel_err(gp[:, 1], fd_y(exact.p, pts, t)) <= 1e-6
        assert rel_err(exact.dp_dt(pts, t), fd_t(exact.p, pts, t)) <= 1e-6
        assert rel_err(exact.ddiv_u_dt(pts, t), fd_t(exact.div_u, pts, t)) <= 1e-6


def test_momentum_load_satisfies_strong_equation(setup):
    # f = -div(2 mu eps(u) + (lam div u - alpha p) I); assemble the stress
    # divergence from finite differences of the stored first derivatives
    params, exact, pts, times = setup
    mu, lam, alpha = params.mu, params.lam, params.alpha
    for t in times:
        def stress_row(p, s, i):
            g = exact.grad_u(p, s)
            eps = 0.5 * (g + np.transpose(g, (0, 2, 1)))
            div_u = exact.div_u(p, s)
            pressure = exact.p(p, s)
            sig = 2 * mu * eps
            sig[:, 0, 0] += lam * div_u - alpha * pressure
            sig[:, 1, 1] += lam * div_u - alpha * pressure
            return sig[:, i, :]

        f = exact.f(pts, t)
        for i in range(2):
            div_sig = (
                fd_x(lambda p, s, i=i: stress_row(p, s, i)[:, 0], pts, t)
                + fd_y(lambda p, s, i=i: stress_row(p, s, i)[:, 1], pts, t)
            )
            assert rel_err(f[:, i], -div_sig) <= 1e-6


def test_mass_load_satisfies_strong_equation(setup):
    # g = s0 dp/dt + alpha d(div u)/dt - div(kappa grad p)
    params, exact, pts, times = setup
    kap = params.kappa_matrix()
    for t in times:
        def flux(p, s):
            return exact.grad_p(p, s) @ kap.T

        div_flux = fd_x(lambda p, s: flux(p, s)[:, 0], pts, t) + fd_y(
            lambda p, s: flux(p, s)[:, 1], pts, t
        )
        g_expected = (
            params.eval_s0(pts) * exact.dp_dt(pts, t)
            + params.alpha * exact.ddiv_u_dt(pts, t)
            - div_flux
        )
        assert rel_err(exact.g(pts, t), g_expected) <= 1e-6


def test_boundary_values_vanish(setup):
    _, exact, _, times = setup
    s = np.linspace(0.0, 1.0, 17)
    boundary = np.vstack(
        [np.column_stack([s, np.zeros_like(s)]),
         np.column_stack([s, np.ones_like(s)]),
         np.column_stack([np.zeros_like(s), s]),
         np.column_stack([np.ones_like(s), s])]
    )
    for t in times:
        assert np.abs(exact.u(boundary, t)).max() <= 1e-14
        assert np.abs(exact.p(boundary, t)).max() <= 1e-14
        # gradients vanish too, so zero-traction data is consistent
        assert np.abs(exact.grad_u(boundary, t)).max() <= 1e-12


def test_point_values():
    params = ModelParams(nu=0.3, s0=0.0, alpha=1.0, kappa=1.0)
    exact = manufactured_solution(params)
    center = np.array([[0.5, 0.5]])
    assert abs(exact.p(center, 0.0)[0] - 1.0 / 16.0) <= 1e-15
    # at t = 0 the time derivatives of u vanish and -lap(p) = 1 at the center
    assert abs(exact.g(center, 0.0)[0] - 1.0) <= 1e-14


def test_anisotropic_conductivity_in_mass_load():
    k = np.array([[2.0, 0.3], [0.3, 1.0]])
    params = ModelParams(kappa=k)
    exact = manufactured_solution(params)
    pts = np.array([[0.3, 0.7]])
    t = 0.5
    kap = params.kappa_matrix()

    def flux(p, s):
        return exact.grad_p(p, s) @ kap.T

    div_flux = fd_x(lambda p, s: flux(p, s)[:, 0], pts, t) + fd_y(
        lambda p, s: flux(p, s)[:, 1], pts, t
    )
    expected = params.alpha * exact.ddiv_u_dt(pts, t) - div_flux
    assert rel_err(exact.g(pts, t), expected) <= 1e-6


def test_zero_solution_is_zero():
    z = zero_solution()
    pts = np.array([[0.2, 0.3], [0.7, 0.1]])
    assert np.all(z.u(pts, 0.5) == 0.0)
    assert np.all(z.p(pts, 0.5) == 0.0)
    assert np.all(z.f(pts, 0.5) == 0.0)
    assert np.all(z.g(pts, 0.5) == 0.0)
    assert z.grad_u(pts, 0.5).shape == (2, 2, 2)
