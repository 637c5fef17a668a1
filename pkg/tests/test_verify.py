import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hjbcheck.core import (
    CandidateValueFunction,
    HypothesisRecord,
    ManifoldPiece,
    PiecewiseConstantControl,
    RectifiableSet,
    VerificationReport,
)
from hjbcheck.integrate import integrate
from hjbcheck.value import dp_value_grid
from hjbcheck.verify import (
    ExcludedPoint,
    HypothesisCheckSpec,
    check_ess_liminf,
    check_hypotheses,
    check_infinite_horizon,
    check_monotone_cost,
    check_ndj,
    corollary_eps_bound,
    crossing_tube_statistic,
    divergence_probe,
    dp_grid_residual,
    dpp_residual,
    envelope,
    hjb_residual,
    linear_fit,
)
from hjbcheck.gallery import loitering_control

from conftest import zero_problem


def const(u, t0, tf):
    return PiecewiseConstantControl.constant([u], t0, tf)


def W_of(f):
    return CandidateValueFunction(f)


# hjb residual


def test_residual_sin1x_zero(sin1x):
    assert hjb_residual(sin1x.candidate, sin1x.problem, (0.0, [2 / math.pi])) == pytest.approx(0.0, abs=1e-12)


def test_residual_constant_is_min_cost():
    W = W_of(lambda t, x: np.full(np.shape(x)[:-1], 3.0))
    assert hjb_residual(W, zero_problem(cost=0.25), (0.3, [0.1])) == pytest.approx(0.25)


def test_residual_counterexample(counterexample):
    # min_u u^2 + x^4 - 6x^3 + 7x^2 at x = 1/2
    r = hjb_residual(counterexample.candidate, counterexample.problem, (0.0, [0.5]))
    assert r == pytest.approx(1.0625, abs=1e-12)


def test_residual_excluded_near_A(sin1x):
    with pytest.raises(ExcludedPoint):
        hjb_residual(sin1x.candidate, sin1x.problem, (math.sin(2.0), [0.5]), exclusion_radius=0.01)


# no downward jumps and essential lower limits


def test_ndj_value_along_trajectory(sin1x):
    tr = integrate(sin1x.problem, const(0.0, -2.0, 0.5), -2.0, [0.2], 0.5, 1e-3)
    res = check_ndj(sin1x.candidate, sin1x.problem, [0.0], tr)
    # V falls at unit rate, so the smallest backward offset sets the worst value
    assert res.worst == pytest.approx(1e-4, abs=1e-9)


def test_ndj_detects_downward_jump():
    W = W_of(lambda t, x: np.where(np.asarray(t) < 1.0, 1.0, 0.0) * np.ones(np.shape(x)[:-1]))
    p = zero_problem()
    tr = integrate(p, const(0.0, 0.0, 2.0), 0.0, [0.2], 2.0, 1e-3)
    res = check_ndj(W, p, [0.0], tr)
    assert res.worst == 1.0
    assert 1.0 <= res.t <= 1.0 + 1e-2


def test_liminf_passes_on_value(sin1x):
    res = check_ess_liminf(sin1x.candidate, 0.5, [0.0])
    assert res.passed


def test_liminf_catches_isolated_dip():
    W = W_of(lambda t, x: np.where(np.asarray(x)[..., 0] == 0.0, 0.0, 1.0))
    res = check_ess_liminf(W, 0.0, [0.0])
    assert not res.passed
    assert res.proxy == 1.0 and res.value == 0.0


def test_liminf_bad_annuli():
    with pytest.raises(ValueError):
        check_ess_liminf(W_of(lambda t, x: np.zeros(np.shape(x)[:-1])), 0.0, [0.0], annuli=[0.1, 0.2])


# monotonicity along trajectories


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=4), st.floats(-1, 1), st.floats(-2, 0))
def test_value_is_monotone_sin1x(sin1x, vals, x0, t0):
    c = PiecewiseConstantControl.equal_pieces([[v] for v in vals], t0, 2.0)
    res = check_monotone_cost(sin1x.candidate, sin1x.problem, c, t0, [x0], 2.0, step=1e-2)
    assert res.worst <= 1e-8


def test_monotone_drop_is_measured():
    W = W_of(lambda t, x: -2.0 * np.asarray(t) * np.ones(np.shape(x)[:-1]))
    res = check_monotone_cost(W, zero_problem(), const(0.0, 0.0, 1.0), 0.0, [0.0], 1.0, step=0.01)
    assert res.worst == pytest.approx(0.01, abs=1e-12)
    assert res.stopped == "tf"


# corollary mode


def corollary_report(verdict="pass"):
    return VerificationReport("corollary_eps", [HypothesisRecord("iv", verdict)], {}, {})


def test_corollary_zero_eps():
    cert = corollary_eps_bound(corollary_report(), 0.0, 5.0)
    assert cert.certified and cert.bound == 0.0


def test_corollary_bound():
    assert corollary_eps_bound(corollary_report(), 0.01, 1.0).bound == pytest.approx(0.02)


def test_corollary_failed_report():
    cert = corollary_eps_bound(corollary_report("fail"), 0.01, 1.0)
    assert not cert.certified and cert.bound is None


def test_corollary_mode_mismatch():
    with pytest.raises(ValueError):
        corollary_eps_bound(VerificationReport("teo1", [], {}, {}), 0.01, 1.0)


# check settings validation


@pytest.mark.parametrize("kw", [
    {"theorem": "teo3"},
    {"eps": 0.1},
    {"exclusion_radius": 1e-4},
    {"mesh": 0.0},
    {"boundary_mode": "loose"},
])
def test_spec_rejects(kw):
    with pytest.raises(ValueError):
        HypothesisCheckSpec((0.0, 1.0, [-1.0], [1.0]), **kw)


def test_spec_empty_window():
    with pytest.raises(ValueError):
        HypothesisCheckSpec((1.0, 1.0, [-1.0], [1.0]))


def test_spec_default_radius():
    assert HypothesisCheckSpec((0.0, 1.0, [-1.0], [1.0]), mesh=0.1).rho == pytest.approx(0.2)


# hypothesis audits


def test_counterexample_verdicts(counterexample):
    rep = check_hypotheses(counterexample.candidate, counterexample.problem,
                           HypothesisCheckSpec.for_entry(counterexample))
    assert rep.verdicts() == counterexample.expected_verdict
    w = rep.record("v").witness
    L = counterexample.problem.running_cost(np.array([w["t"]]), np.array([w["x"]]), np.array([w["u"]]))
    assert float(L[0]) == w["L"] < 0
    assert not rep.conclusion


@pytest.fixture(scope="module")
def decay_spec(decay):
    return HypothesisCheckSpec.for_entry(decay, mesh=1.0 / 32, t_mesh=0.5)


def test_decay_passes(decay, decay_spec):
    rep = check_infinite_horizon(decay.candidate, decay.problem, decay_spec,
                                 probe_controls=decay_probe(decay, decay_spec))
    assert rep.conclusion
    assert rep.verdicts()["star"] == "pass" and rep.verdicts()["tail"] == "pass"


def decay_probe(entry, spec):
    return entry.extras["probes"](spec.window[0], spec.window[1])


def test_decay_shifted_fails_final_condition(decay, decay_spec):
    W = CandidateValueFunction(lambda t, x: decay.candidate(t, x) + 0.1, gradient=decay.candidate.gradient)
    rep = check_infinite_horizon(W, decay.problem, decay_spec, probe_controls=decay_probe(decay, decay_spec))
    assert rep.record("ii").verdict == "fail"
    assert rep.record("ii").worst_violation == pytest.approx(0.1, abs=1e-12)


def test_infinite_horizon_needs_infinite_problem(sin1x):
    from hjbcheck.integrate import PreconditionError
    with pytest.raises(PreconditionError):
        check_infinite_horizon(sin1x.candidate, sin1x.problem, HypothesisCheckSpec.for_entry(sin1x))


# crossing statistic


def test_crossing_fraction_equals_delta():
    # the slab |t - 1| <= delta is crossed at unit speed over a window of length 2; the distance
    # lower bound undershoots by half the piece mesh, kept small by a short piece and a fine level
    line = ManifoldPiece([-1.0], [1.0], lambda p: np.column_stack([np.ones(len(p)), p[:, 0]]), ambient_dim=2)
    A = RectifiableSet((line,))
    assert A.mesh(8) < 2e-4
    deltas = [0.1, 0.05, 0.025]
    tab = crossing_tube_statistic(A, zero_problem(), [0.0], 0.0, [[0.0]], deltas, 2.0, refinement=8)
    assert np.allclose(tab.fractions, deltas, atol=2e-3)
    assert tab.r2 > 0.999


def test_crossing_on_invariant_circle(oscillator):
    # omega = +1 keeps starts on the unit circle about (1, 0) on it: a null set of starts where the
    # fraction is 1 at every radius
    T = 2 * math.pi
    circle = ManifoldPiece([0.0], [T], lambda p: np.column_stack([1 + np.cos(p[:, 0]), np.sin(p[:, 0])]),
                           ambient_dim=3, time_range=(0.0, T))
    a = np.linspace(0.3, 5.0, 5)
    starts = np.column_stack([1 + np.cos(a), np.sin(a)])
    tab = crossing_tube_statistic(RectifiableSet((circle,)), oscillator.problem, [1.0], 0.0, starts,
                                  [0.1, 0.05, 0.025, 0.0125], T, refinement=4)
    assert np.all(tab.fractions == 1.0)


def test_linear_fit_exact():
    a, b, r2 = linear_fit([0, 1, 2], [1, 3, 5])
    assert (a, b, r2) == pytest.approx((2.0, 1.0, 1.0))


# envelopes


fields = arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
                elements=st.floats(-1e3, 1e3, allow_nan=False))


@given(fields)
def test_envelope_algebra(f):
    lo = envelope(f, "lower")
    up = envelope(f, "upper")
    assert np.all(lo <= f) and np.all(f <= up)
    assert np.array_equal(envelope(lo, "lower"), lo)
    assert np.array_equal(envelope(up, "upper"), up)
    assert np.array_equal(up, -envelope(-f, "lower"))


def test_envelope_keeps_continuous_field():
    x, y = np.meshgrid(np.linspace(0, 1, 20), np.linspace(0, 2, 30), indexing="ij")
    f = 3 * x - y
    # boundary nodes see fewer neighbours, so only interior nodes are reproduced exactly
    inner = (slice(1, -1), slice(1, -1))
    assert np.allclose(envelope(f, "lower")[inner], f[inner], atol=1e-12, rtol=0)
    assert np.allclose(envelope(f, "upper")[inner], f[inner], atol=1e-12, rtol=0)


def test_envelope_smooth_field_within_modulus():
    h = 0.05
    t, x = np.meshgrid(np.arange(-1, 1 + h / 2, h), np.arange(-1, 1 + h / 2, h), indexing="ij")
    f = np.sin(t + x)
    # one-cell ball: the field moves by at most |grad| * h = sqrt(2) h across it
    for mode in ("lower", "upper"):
        assert np.max(np.abs(envelope(f, mode) - f)) <= math.sqrt(2) * h


def test_envelope_step_field():
    f = np.where(np.arange(20) < 10, 0.0, 1.0)
    assert np.array_equal(envelope(f, "lower"), f)
    spike = np.zeros(20)
    spike[5] = 1.0
    assert np.array_equal(envelope(spike, "lower"), np.zeros(20))
    hole = np.ones(20)
    hole[5] = 0.0
    assert np.array_equal(envelope(hole, "upper"), np.ones(20))


def test_envelope_rejects_bad_radii():
    with pytest.raises(ValueError):
        envelope(np.zeros(3), "lower", (1, 2))
    with pytest.raises(ValueError):
        envelope(np.zeros(3), "middle")


# dynamic programming residuals


def test_dpp_sin1x(sin1x):
    res = dpp_residual(sin1x.candidate, sin1x.problem, 0.0, [0.5], 0.5)
    assert res.residual == pytest.approx(0.0, abs=1e-12)


def test_dpp_zero_candidate():
    W = W_of(lambda t, x: np.zeros(np.shape(x)[:-1]))
    res = dpp_residual(W, zero_problem(), 0.2, [0.0], 0.7)
    assert res.residual == pytest.approx(-0.5, abs=1e-12)


def test_dpp_oscillator(oscillator):
    res = dpp_residual(oscillator.candidate, oscillator.problem, 0.0, [2.0, 0.0], 1.0)
    assert abs(res.residual) <= 2e-2


@pytest.fixture(scope="module")
def coarse_sin1x_grid(sin1x):
    return dp_value_grid(sin1x.problem, (-2.0, 2.0), 1.0 / 32, [-1.0], [1.0], 1.0 / 32, k=3)


def test_dp_grid_self_consistent(sin1x, coarse_sin1x_grid):
    assert dp_grid_residual(sin1x.problem, coarse_sin1x_grid, k=3) <= 1e-12


def test_dp_grid_perturbation_detected(sin1x, coarse_sin1x_grid):
    g = coarse_sin1x_grid
    vals = g.values.copy()
    i = len(g.t_axis) // 2
    j = int(np.argmax(np.isfinite(vals[i]) & (vals[i] > 0)))
    vals[i, j] += 0.25
    bad = type(g)(g.t_axis, g.lo, g.steps, g.shape, vals)
    assert dp_grid_residual(sin1x.problem, bad, k=3) >= 0.25 - 1e-12


# divergence


def test_loiter_divergence(counterexample):
    lo = counterexample.extras["loiter"]
    rep = divergence_probe(counterexample.problem, lambda B: loitering_control(lo["start"], lo["level"], B),
                           0.0, [lo["start"]], lo["dwells"])
    assert rep.decreasing
    assert rep.costs[-1] < -1e3
    # the hold at x = 2.5 costs L(2.5, 0) per unit time
    assert rep.costs[1] - rep.costs[0] == pytest.approx(9 * -10.9375, abs=1e-6)
