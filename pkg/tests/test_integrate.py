import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hjbcheck.core import ControlProblem, PiecewiseConstantControl, interval_controls, state_slab, whole_space
from hjbcheck.gallery import _fuller_problem
from hjbcheck.integrate import (
    IntegrationBlowup,
    PreconditionError,
    approximate_control,
    continuous_dependence_probe,
    integrate,
    lp_distance,
)

from conftest import zero_problem


def const(u, t0, tf):
    return PiecewiseConstantControl.constant([u], t0, tf)


def rk4_errors(problem, halvings=3, base=50):
    """Final-state differences between successive step halvings, oscillator u = +1 on [0, pi]."""
    finals = []
    for j in range(halvings + 2):
        h = math.pi / (base * 2**j)
        finals.append(integrate(problem, const(1.0, 0.0, math.pi), 0.0, [2.0, 0.0], math.pi, h).final_state)
    return [float(np.linalg.norm(finals[j] - finals[j + 1])) for j in range(halvings + 1)]


def test_oscillator_half_turn_reaches_origin(oscillator):
    tr = integrate(oscillator.problem, const(1.0, 0.0, math.pi), 0.0, [2.0, 0.0], math.pi, math.pi / 2000)
    assert np.linalg.norm(tr.final_state) < 1e-6


def test_oscillator_matches_rotation(oscillator):
    tr = integrate(oscillator.problem, const(1.0, 0.0, 2.0), 0.0, [2.0, 0.0], 2.0, 1e-3)
    exact = np.column_stack([1 + np.cos(tr.times), -np.sin(tr.times)])
    assert np.max(np.abs(tr.states - exact)) < 1e-10


def test_zero_dynamics_keep_state():
    c = PiecewiseConstantControl.equal_pieces([[0.3], [-1.0], [1.0]], 0.0, 3.0)
    tr = integrate(zero_problem(), c, 0.0, [0.5], 3.0)
    assert np.all(tr.states == 0.5)


def test_double_integrator_is_exact():
    tr = integrate(_fuller_problem(2), const(1.0, 0.0, 1.0), 0.0, [0.0, 0.0], 1.0, 0.1)
    assert np.allclose(tr.final_state, [0.5, 1.0], atol=1e-10, rtol=0)


def test_running_cost_integral():
    # x1 = t^2 / 2 under u = 1 from rest, so the cost is int t^4 / 4 = 1 / 20; the
    # quartic integrand is integrated to fourth order, not exactly
    errs = []
    for h in (0.02, 0.01):
        tr = integrate(_fuller_problem(2), const(1.0, 0.0, 1.0), 0.0, [0.0, 0.0], 1.0, h)
        errs.append(abs(tr.costs[-1] - 0.05))
    assert errs[1] < 1e-9
    assert 12.0 < errs[0] / errs[1] < 20.0


def test_rk4_order(oscillator):
    err = rk4_errors(oscillator.problem)
    ratios = [err[j] / err[j + 1] for j in range(3)]
    assert all(12.0 < r < 20.0 for r in ratios), ratios


def test_breakpoint_alignment(oscillator):
    p = oscillator.problem
    both = PiecewiseConstantControl([0.0, 1.0, 2.0], [[1.0], [-1.0]])
    whole = integrate(p, both, 0.0, [0.3, -0.2], 2.0, 0.01)
    a = integrate(p, const(1.0, 0.0, 1.0), 0.0, [0.3, -0.2], 1.0, 0.01)
    b = integrate(p, const(-1.0, 1.0, 2.0), 1.0, a.final_state, 2.0, 0.01)
    assert np.allclose(whole.final_state, b.final_state, atol=1e-14, rtol=0)


def test_time_reversal(oscillator):
    p = oscillator.problem
    back = ControlProblem(2, lambda t, x, u: -p.dynamics(t, x, u), p.running_cost, p.final_cost, p.target,
                          p.domain, p.control_set)
    fwd = integrate(p, const(0.7, 0.0, math.pi), 0.0, [0.5, 1.5], math.pi, math.pi / 2000)
    rev = integrate(back, const(0.7, 0.0, math.pi), 0.0, fwd.final_state, math.pi, math.pi / 2000)
    assert np.linalg.norm(rev.final_state - [0.5, 1.5]) < 1e-8


@settings(max_examples=25, deadline=None)
@given(st.floats(-1, 1), st.floats(-2, 2), st.floats(-2, 2))
def test_constant_control_keeps_radius(oscillator, u, x1, x2):
    # x'' + x = u rotates about (u, 0)
    tr = integrate(oscillator.problem, const(u, 0.0, 3.0), 0.0, [x1, x2], 3.0, 0.01)
    r = np.hypot(tr.states[:, 0] - u, tr.states[:, 1])
    assert np.max(np.abs(r - r[0])) < 1e-8


def test_domain_exit_is_flagged():
    p = ControlProblem(1, lambda t, x, u: np.ones(np.shape(x)), lambda t, x, u: np.zeros(np.shape(x)[:-1]),
                       lambda t, x, u: np.zeros(np.shape(x)[:-1]), state_slab([5.0], [6.0]),
                       state_slab([-1.0], [1.0]), interval_controls(-1.0, 1.0))
    tr = integrate(p, const(0.0, 0.0, 3.0), 0.0, [0.0], 3.0, 0.01)
    assert tr.exited
    assert tr.exit_time == pytest.approx(1.0, abs=1e-9)


def test_start_outside_domain():
    p = ControlProblem(1, lambda t, x, u: np.zeros(np.shape(x)), lambda t, x, u: np.zeros(np.shape(x)[:-1]),
                       lambda t, x, u: np.zeros(np.shape(x)[:-1]), state_slab([5.0], [6.0]),
                       state_slab([-1.0], [1.0]), interval_controls(-1.0, 1.0))
    with pytest.raises(PreconditionError):
        integrate(p, const(0.0, 0.0, 1.0), 0.0, [2.0], 1.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blowup_is_reported():
    p = ControlProblem(1, lambda t, x, u: np.asarray(x) ** 2, lambda t, x, u: np.zeros(np.shape(x)[:-1]),
                       lambda t, x, u: np.zeros(np.shape(x)[:-1]), state_slab([50.0], [60.0]), whole_space(),
                       interval_controls(-1.0, 1.0))
    with pytest.raises(IntegrationBlowup) as err:
        integrate(p, const(0.0, 0.0, 2.0), 0.0, [1.0], 2.0, 1e-3)
    # x' = x^2 from 1 blows up at t = 1; the discrete solution a few steps later
    assert 0.9 < err.value.last_time < 1.1


def test_approximate_sign_control_l1():
    t = np.linspace(0.0, 2 * math.pi, 10_000)
    u = np.sign(np.sin(t))
    grid = np.linspace(0.0, 2 * math.pi, 65)
    c = approximate_control(t, u, grid, p=1, control_set=interval_controls(-1.0, 1.0))
    mids = 0.5 * (grid[:-1] + grid[1:])
    want = np.sign(np.sin(mids))
    changes = [int(np.searchsorted(grid, math.pi) - 1)]
    wrong = np.flatnonzero(c.values[:, 0] != want)
    assert set(wrong) <= set(changes + [63])


@given(st.floats(-1, 1), st.integers(1, 50))
def test_approximate_constant(w, cells):
    t = np.linspace(0.0, 1.0, 2000)
    c = approximate_control(t, np.full(2000, w), np.linspace(0.0, 1.0, cells + 1), p=2)
    assert np.allclose(c.values, w)


def test_approximation_error_halves():
    t = np.linspace(0.0, 2 * math.pi, 100_000)
    u = np.sin(t)
    errs = []
    for cells in (16, 32, 64):
        c = approximate_control(t, u, np.linspace(0.0, 2 * math.pi, cells + 1), p=2)
        errs.append(lp_distance(c, t, u, 2))
    for a, b in zip(errs, errs[1:]):
        assert 0.8 * 0.5 <= b / a <= 1.2 * 0.5


def test_empty_cell_is_named():
    with pytest.raises(ValueError, match="cell 1"):
        approximate_control([0.1, 0.9], [0.0, 0.0], [0.0, 0.2, 0.4, 1.0], p=2)


def test_dependence_shrinks_with_scale(oscillator):
    c = PiecewiseConstantControl.equal_pieces([[1.0], [-1.0]], 0.0, 2.0)
    rows = continuous_dependence_probe(oscillator.problem, c, 0.0, [1.0, 0.5], 2.0, [1e-1, 1e-2, 1e-3])
    sup = [r.sup_distance for r in rows]
    assert sup[0] > sup[1] > sup[2] > 0


def test_dependence_zero_scale(oscillator):
    c = const(1.0, 0.0, 2.0)
    rows = continuous_dependence_probe(oscillator.problem, c, 0.0, [1.0, 0.5], 2.0, [0.0])
    assert rows[0].sup_distance == 0.0


def test_dependence_zero_dynamics():
    c = const(0.2, 0.0, 1.0)
    rows = continuous_dependence_probe(zero_problem(), c, 0.0, [0.3], 1.0, [0.1, 0.01])
    for r in rows:
        assert r.sup_distance == pytest.approx(r.dx0, abs=1e-15)
