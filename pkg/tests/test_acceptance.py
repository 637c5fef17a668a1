"""Acceptance criteria, one test each; every test records a PASS/FAIL line for the terminal summary."""

import math
import time

import numpy as np

from hjbcheck.cli import dp_grid_for, estimate_values, sample_points
from hjbcheck.core import CandidateValueFunction, ManifoldPiece, PiecewiseConstantControl, RectifiableSet
from hjbcheck.gallery import GALLERY, fuller_feedback_for, get_entry, loitering_control, oscillator_lipschitz_probe
from hjbcheck.value import brute_force_value, dp_value_grid, truncated_infinite_cost, value_from_synthesis
from hjbcheck.verify import (
    HypothesisCheckSpec,
    check_hypotheses,
    check_infinite_horizon,
    check_monotone_cost,
    corollary_eps_bound,
    crossing_tube_statistic,
    divergence_probe,
    dp_grid_residual,
    envelope,
    linear_fit,
)

from conftest import ACCEPTANCE_LINES
from test_integrate import rk4_errors


def record(n, checks, detail, elapsed=None):
    """Append the criterion line, then fail with the names of the unmet checks."""
    ok = all(checks.values())
    took = "" if elapsed is None else f", {elapsed:.1f} s"
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}{took}")
    assert ok, [k for k, v in checks.items() if not v]


def entry_brute(e, t0, x0):
    """Brute-force value with the entry's declared settings."""
    b = e.brute
    return brute_force_value(e.problem, t0, x0, b["pieces"], b["horizon"], b["k"], step=b.get("step"),
                             hit_tol=e.hit_tol).value


def test_criterion_1_sin1x():
    start = time.perf_counter()
    e = get_entry("sin1x")
    spec = HypothesisCheckSpec.for_entry(e, mesh=1.0 / 256, hjb_tol=1e-6)
    rep = check_hypotheses(e.candidate, e.problem, spec)
    ts, X = sample_points(e, 100, np.random.default_rng(11))
    brute = np.array([entry_brute(e, t, x) for t, x in zip(ts, X)])
    err = float(np.max(np.abs(brute - e.candidate(ts, X))))
    elapsed = time.perf_counter() - start
    record(1, {
        "hypotheses": rep.conclusion and not rep.failed(),
        "brute force": err <= 1e-9,
        "runtime": elapsed < 30,
    }, f"sin1x verdicts {rep.verdicts()}, max |brute - V| = {err:.2e} at 100 off-tube points", elapsed)


def test_criterion_2_counterexample():
    start = time.perf_counter()
    e = get_entry("counterexample_L")
    rep = check_hypotheses(e.candidate, e.problem, HypothesisCheckSpec.for_entry(e))
    w = rep.record("v").witness or {}
    L = e.problem.running_cost
    L_w = float(L(np.array([w.get("t", 0.0)]), np.array([w.get("x", [0.0])]), np.array([w.get("u", [0.0])]))[0])
    L_25 = float(L(np.zeros(1), np.array([[2.5]]), np.array([[0.0]]))[0])
    lo = e.extras["loiter"]
    div = divergence_probe(e.problem, lambda B: loitering_control(lo["start"], lo["level"], B), 0.0, [lo["start"]],
                           lo["dwells"])
    elapsed = time.perf_counter() - start
    record(2, {
        "only v fails": rep.failed() == ["v"],
        "witness L < 0": L_w < 0,
        "L(2.5, 0)": L_25 == -10.9375,
        "loiter": div.costs[-1] < -1e3 and lo["dwells"][-1] <= 100,
        "runtime": elapsed < 10,
    }, f"failed {rep.failed()}, witness x = {w.get('x')} with L = {L_w:g}, L(2.5, 0) = {L_25:g}, "
       f"loiter cost {div.costs[-1]:.1f} at dwell {lo['dwells'][-1]:g}", elapsed)


def test_criterion_3_oscillator():
    start = time.perf_counter()
    e = get_entry("oscillator")
    syn = value_from_synthesis(e.problem, e.synthesis, 0.0, [2.0, 0.0], chattering_cutoff=e.extras["cutoff"],
                               overshoot=e.extras["overshoot"]).value
    brute = brute_force_value(e.problem, 0.0, [2.0, 0.0], 3, 4.0, 2, hit_tol=e.hit_tol).value
    grid = dp_grid_for(e)
    dp = float(grid.value_at(0.0, np.array([[2.0, 0.0]]))[0])
    spec = HypothesisCheckSpec.for_entry(e, hjb_tol=1e-2)
    rep = check_hypotheses(e.candidate, e.problem, spec)
    ratios = [r for _, r in oscillator_lipschitz_probe(e, ds=(0.1, 0.05, 0.025))]
    elapsed = time.perf_counter() - start
    record(3, {
        "synthesis": abs(syn - math.pi) <= 1e-2,
        "brute force": abs(brute - syn) <= 2e-2,
        "dp": abs(dp - syn) <= 5e-2 and grid.steps[0] == 1.0 / 128,
        "hypotheses": rep.conclusion and spec.rho == 2 * spec.mesh,
        "lipschitz probe": ratios[0] < ratios[1] < ratios[2],
        "runtime": elapsed < 300,
    }, f"synthesis {syn:.6f}, brute {brute:.6f}, dp {dp:.4f}, verdicts {rep.verdicts()}, "
       f"probe ratios {[round(r, 2) for r in ratios]}", elapsed)


def test_criterion_4_fuller():
    start = time.perf_counter()
    e = GALLERY["fuller"]()  # rebuilt here so the scan is inside the timing
    cs, costs = e.extras["scan"]
    j = int(np.argmin(costs))
    unimodal = 0 < j < len(cs) - 1 and bool(np.all(np.diff(costs[: j + 1]) <= 0) and np.all(np.diff(costs[j:]) >= 0))
    c = e.extras["c"]
    syn = value_from_synthesis(e.problem, fuller_feedback_for(c), 0.0, [1.0, 0.0], step=2e-3, chattering_cutoff=1e-8)
    iv = np.diff(syn.switch_times)
    slope, _, r2 = linear_fit(np.arange(len(iv)), np.log(iv))
    brute = entry_brute(e, 0.0, [1.0, 0.0])
    cost = value_from_synthesis(e.problem, fuller_feedback_for(c), 0.0, [1.0, 0.0], chattering_cutoff=e.extras["cutoff"],
                                step=2e-3).value
    rel = abs(cost - brute) / brute
    elapsed = time.perf_counter() - start
    record(4, {
        "unimodal scan": unimodal,
        "geometric decay": len(iv) >= 3 and slope < 0 and r2 > 0.9,
        "brute force": rel <= 0.02,
        "runtime": elapsed < 300,
    }, f"c = {c:.5f}, {len(iv)} switch intervals with ratio {math.exp(slope):.4f} (R^2 = {r2:.6f}), "
       f"synthesis {cost:.5f} vs 4-piece brute {brute:.5f} ({100 * rel:.2f}%)", elapsed)


def test_criterion_5_decay():
    start = time.perf_counter()
    e = get_entry("infinite_decay")
    spec = HypothesisCheckSpec.for_entry(e)
    probes = e.extras["probes"](spec.window[0], spec.window[1])
    rep = check_infinite_horizon(e.candidate, e.problem, spec, probe_controls=probes)
    worst = 0.0
    for x0 in (0.1, 0.2, 0.4):
        for c in probes:
            v = truncated_infinite_cost(e.problem, c, 0.0, [x0], spec.window[1], step=0.01)
            worst = max(worst, abs(v - 0.5 * x0**2))
    elapsed = time.perf_counter() - start
    record(5, {
        "all checks": rep.conclusion and all(v in ("pass", "skipped") for v in rep.verdicts().values()),
        "value": worst <= 1e-4,
        "runtime": elapsed < 30,
    }, f"verdicts {rep.verdicts()}, max |cost - x0^2/2| = {worst:.2e} over 3 starts x 3 controls", elapsed)


def test_criterion_6_corollary(sin1x):
    e = sin1x
    V = e.candidate
    W = CandidateValueFunction(lambda t, x: V(t, x) + 0.005, V.exceptional_set, V.gradient)
    window = (0.0, 1.0, np.array([-1.0]), np.array([1.0]))
    spec = HypothesisCheckSpec.for_entry(e, theorem="corollary_eps", eps=0.01, g_l1=1.0)
    spec = spec.replace(window=window)
    rep = check_hypotheses(W, e.problem, spec)
    cert = corollary_eps_bound(rep, 0.01, 1.0)
    rng = np.random.default_rng(6)
    t = rng.uniform(0.0, 1.0, 400)
    X = rng.uniform(-1.0, 1.0, (400, 1))
    keep = (V.exceptional_set.distance(t, X) > e.extras["tube"]) & ~e.problem.target.contains(t, X)
    t, X = t[keep][:100], X[keep][:100]
    vhat = np.array([entry_brute(e, s, x) for s, x in zip(t, X)])
    measured = float(np.max(W(t, X) - vhat))
    record(6, {
        "corollary mode": rep.conclusion and cert.certified,
        "bound": cert.bound is not None and abs(cert.bound - 0.02) <= 1e-15 and cert.bound >= measured,
        "measured": abs(measured - 0.005) <= 1e-9,
    }, f"verdicts {rep.verdicts()}, certified bound {cert.bound}, measured max(W~ - V^) = {measured:.9f}")


def test_criterion_7_properties(sin1x, oscillator):
    rng = np.random.default_rng(7)
    # envelope algebra on random fields, including jumps
    env_ok = True
    for _ in range(200):
        shape = tuple(rng.integers(1, 16, size=rng.integers(1, 4)))
        f = rng.normal(size=shape) * 10 ** rng.uniform(-3, 3)
        lo, up = envelope(f, "lower"), envelope(f, "upper")
        env_ok &= bool(np.all(lo <= f) and np.all(f <= up))
        env_ok &= bool(np.array_equal(envelope(lo, "lower"), lo) and np.array_equal(envelope(up, "upper"), up))
        env_ok &= bool(np.array_equal(up, -envelope(-f, "lower")))
    # monotone cost along random admissible controls
    worst_mono = -math.inf
    for _ in range(100):
        t0 = rng.uniform(-2.0, 1.5)
        vals = rng.uniform(-1.0, 1.0, (int(rng.integers(1, 6)), 1))
        c = PiecewiseConstantControl.equal_pieces(vals, t0, 2.0)
        res = check_monotone_cost(sin1x.candidate, sin1x.problem, c, t0, [rng.uniform(-1, 1)], 2.0, step=1e-2)
        worst_mono = max(worst_mono, res.worst)
    # dp grid self-consistency
    cfg = sin1x.extras["dp"]
    grid = dp_value_grid(sin1x.problem, cfg["t_range"], cfg["dt"], cfg["lo"], cfg["hi"], cfg["dx"], k=3)
    dpp = dp_grid_residual(sin1x.problem, grid, k=3)
    # crossings of the unit circle about (1, 0) under omega = -1, starts in an annulus about it
    T = 2 * math.pi
    circle = ManifoldPiece([0.0], [T], lambda p: np.column_stack([1 + np.cos(p[:, 0]), np.sin(p[:, 0])]),
                           ambient_dim=3, time_range=(0.0, T))
    r = np.sqrt(rng.uniform(0.25, 2.25, 500))
    a = rng.uniform(0.0, T, 500)
    starts = np.column_stack([1 + r * np.cos(a), r * np.sin(a)])
    tab = crossing_tube_statistic(RectifiableSet((circle,)), oscillator.problem, [-1.0], 0.0, starts,
                                  [0.1, 0.05, 0.025, 0.0125], T, refinement=4)
    # RK4 order
    err = rk4_errors(oscillator.problem, halvings=3)
    ratios = [err[j] / err[j + 1] for j in range(3)]
    record(7, {
        "envelope": env_ok,
        "monotone": worst_mono <= 1e-8,
        "dp residual": dpp <= 1e-12,
        "crossing": tab.r2 > 0.95 and tab.slope > 0,
        "rk4": all(abs(q - 16) <= 0.5 for q in ratios),
    }, f"envelope algebra {'holds' if env_ok else 'broken'} on 200 fields, worst monotone drop {worst_mono:.1e}, "
       f"dp residual {dpp:.1e}, crossing slope {tab.slope:.3f} R^2 = {tab.r2:.5f}, "
       f"rk4 ratios {[round(q, 3) for q in ratios]}")


FIXTURES = {"sin1x": "sin1x", "oscillator": "oscillator", "fuller": "fuller", "counterexample_L": "counterexample",
            "infinite_decay": "decay"}


def test_criterion_8_soundness(request):
    worst = {}
    ok = True
    for name in GALLERY:
        e = request.getfixturevalue(FIXTURES[name])
        if "fail" in e.expected_verdict.values():
            continue  # only entries whose hypotheses pass carry a soundness claim
        ts, X = sample_points(e, 50, np.random.default_rng(8))
        vhat, _, _ = estimate_values(e, ts, X)
        gap = float(np.max(e.candidate(ts, X) - vhat))
        worst[name] = gap
        ok &= gap <= e.slack
    record(8, {"no W > V^ + slack": ok, "entries": len(worst) == 4},
           "max W - V^ per entry: " + ", ".join(f"{k} {v:.2e}" for k, v in worst.items()))
