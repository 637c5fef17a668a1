"""Fixed-step RK4 integration under piecewise-constant controls.

The running cost is carried as an extra state component, so the cost
integral is accumulated with the same Simpson-type weights as the state.
All marching is batched: rows share the step schedule but each row has its
own control values, target-hit time and domain-exit time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    DIST_TOL,
    ControlProblem,
    PiecewiseConstantControl,
    SetSpec,
    Trajectory,
)


class IntegrationBlowup(FloatingPointError):
    def __init__(self, last_time: float):
        super().__init__(f"non-finite state after t={last_time}")
        self.last_time = last_time


class PreconditionError(ValueError):
    pass


def _cost(problem, t, x, u):
    c = np.asarray(problem.running_cost(t, x, u), dtype=float)
    return np.broadcast_to(c, x.shape[:-1])


def rk4_step(problem: ControlProblem, t, x, u, h):
    """One classical RK4 step of ``(x, cost)``; ``h`` may be per-row.

    Returns the new state, the cost increment and the velocity at the start.
    """
    f = problem.dynamics
    h = np.asarray(h, dtype=float)
    hx = h[..., None] if h.ndim else h
    k1 = np.asarray(f(t, x, u), dtype=float)
    c1 = _cost(problem, t, x, u)
    tm = t + 0.5 * h
    x2 = x + 0.5 * hx * k1
    k2 = np.asarray(f(tm, x2, u), dtype=float)
    c2 = _cost(problem, tm, x2, u)
    x3 = x + 0.5 * hx * k2
    k3 = np.asarray(f(tm, x3, u), dtype=float)
    c3 = _cost(problem, tm, x3, u)
    te = t + h
    x4 = x + hx * k3
    k4 = np.asarray(f(te, x4, u), dtype=float)
    c4 = _cost(problem, te, x4, u)
    xn = x + hx / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    dc = h / 6.0 * (c1 + 2 * c2 + 2 * c3 + c4)
    return xn, dc, k1


def hit_mask(target: SetSpec, t, x, cross0, tol: float):
    """Rows of ``(t, x)`` that are on the target, within ``tol`` of it, or
    have crossed one of its thin parts since the crossing value ``cross0``."""
    hit = target.contains(t, x)
    if tol > 0:
        hit = hit | (target.dist(t, x) <= tol)
    if target.crossing is not None and cross0 is not None:
        c = np.asarray(target.crossing(t, x), dtype=float)
        with np.errstate(invalid="ignore"):
            hit = hit | (c == 0) | (np.sign(c) * np.sign(cross0) < 0)
    return hit


def _crossing(target, t, x):
    if target is None or target.crossing is None:
        return None
    return np.asarray(target.crossing(t, x), dtype=float)


def _first_event(problem, t, x, u, h, event, iters: int = 60, subsamples=None):
    """Smallest step fraction ``s`` in (0, 1] at which ``event(t + s h, x(s))`` holds.

    Rows are assumed to have the event at ``s = 1`` unless ``subsamples`` is
    given, in which case the step is first scanned on that many sub-points
    and rows without any event get ``nan``.
    """
    n = len(x)
    lo = np.zeros(n)
    hi = np.ones(n)
    if subsamples:
        found = np.zeros(n, dtype=bool)
        hi = np.full(n, np.nan)
        grid = np.linspace(0.0, 1.0, subsamples + 1)[1:]
        prev = 0.0
        for s in grid:
            todo = ~found
            if not todo.any():
                break
            xs, _, _ = rk4_step(problem, t[todo], x[todo], u[todo], s * h[todo])
            ev = event(t[todo] + s * h[todo], xs, todo)
            idx = np.flatnonzero(todo)[ev]
            hi[idx] = s
            lo[idx] = prev
            found[idx] = True
            prev = s
        rows = np.flatnonzero(found)
    else:
        rows = np.arange(n)
    for _ in range(iters):
        if rows.size == 0:
            break
        mid = 0.5 * (lo[rows] + hi[rows])
        xs, _, _ = rk4_step(problem, t[rows], x[rows], u[rows], mid * h[rows])
        ev = event(t[rows] + mid * h[rows], xs, rows)
        hi[rows] = np.where(ev, mid, hi[rows])
        lo[rows] = np.where(ev, lo[rows], mid)
    return hi


@dataclass
class BatchResult:
    times: np.ndarray  # common step grid actually marched
    states: Optional[np.ndarray]  # (K, N, n) when recorded, nan after a row stops
    final_states: np.ndarray
    final_costs: np.ndarray  # running cost up to the stop (hit / exit / tf)
    hit: np.ndarray
    hit_time: np.ndarray
    hit_state: np.ndarray
    hit_value: np.ndarray  # running cost + final cost at the hit, inf otherwise
    exited: np.ndarray
    exit_time: np.ndarray
    blown: np.ndarray
    rates: Optional[np.ndarray] = None  # (K-1, 2, N, n)
    costs: Optional[np.ndarray] = None  # (K, N)


def _schedule(breakpoints, t0, tf, step):
    inner = [b for b in breakpoints if t0 < b < tf]
    edges = [t0] + inner + [tf]
    out = []
    for a, b in zip(edges[:-1], edges[1:]):
        m = max(1, int(math.ceil((b - a) / step - 1e-9)))
        out.append((a, b, m))
    return out


def march(problem: ControlProblem, breakpoints, values, t0: float, X0, tf: float, step: float,
          target: SetSpec = None, hit_tol: float = 0.0, domain: SetSpec = None,
          record: bool = False) -> BatchResult:
    """Integrate ``N`` rows over ``[t0, tf]`` with shared breakpoints.

    ``values`` has shape ``(N, m, q)``: row ``r`` uses ``values[r, i]`` on
    ``(breakpoints[i], breakpoints[i + 1]]``.  Each breakpoint is a step
    boundary.  Rows stop at their first target hit (when ``target`` is given)
    or at their exit from ``domain``.
    """
    bp = np.asarray(breakpoints, dtype=float)
    values = np.asarray(values, dtype=float)
    X = np.array(X0, dtype=float).reshape(values.shape[0], problem.dim)
    N = X.shape[0]
    n = problem.dim
    C = np.zeros(N)
    alive = np.ones(N, dtype=bool)
    hit = np.zeros(N, dtype=bool)
    hit_time = np.full(N, np.nan)
    hit_state = np.full((N, n), np.nan)
    hit_value = np.full(N, np.inf)
    exited = np.zeros(N, dtype=bool)
    exit_time = np.full(N, np.nan)
    blown = np.zeros(N, dtype=bool)

    def psi_at(t, x):
        if target is not None and target.nearest is not None:
            t, x = target.nearest(t, x)
        return np.asarray(problem.final_cost(t, x), dtype=float) * np.ones(len(x))

    tt = np.full(N, t0)
    if target is not None:
        on = hit_mask(target, tt, X, None, hit_tol)
        if on.any():
            hit[on] = True
            hit_time[on] = t0
            hit_state[on] = X[on]
            hit_value[on] = psi_at(tt[on], X[on])
            alive &= ~on
    times = [t0]
    states = [X.copy()] if record else None
    costs = [C.copy()] if record else None
    rates = [] if record else None

    def piece_index(a, b):
        mid = 0.5 * (a + b)
        return int(np.clip(np.searchsorted(bp, mid, side="left") - 1, 0, values.shape[1] - 1))

    for a, b, m in _schedule(bp, t0, tf, step):
        U = values[:, piece_index(a, b)]
        h = (b - a) / m
        for j in range(m):
            t = a + j * h
            if not alive.any():
                break
            rows = np.flatnonzero(alive)
            x = X[rows]
            u = U[rows]
            tr = np.full(rows.size, t)
            hr = np.full(rows.size, h)
            xn, dc, k1 = rk4_step(problem, tr, x, u, hr)
            bad = ~np.all(np.isfinite(xn), axis=1) | ~np.isfinite(dc)
            if bad.any():
                blown[rows[bad]] = True
                alive[rows[bad]] = False
            ok = ~bad
            stop_frac = np.full(rows.size, np.nan)
            is_hit = np.zeros(rows.size, dtype=bool)
            if target is not None and ok.any():
                c0 = _crossing(target, tr, x)
                end_hit = hit_mask(target, tr + h, xn, c0, hit_tol) & ok
                possible = end_hit.copy()
                if hit_tol > 0 or target.crossing is None:
                    d0 = target.dist(tr, x)
                    d1 = target.dist(tr + h, xn)
                    travel = 1.5 * np.hypot(h, np.linalg.norm(xn - x, axis=1))
                    possible |= (0.5 * (d0 + d1 - travel) <= max(hit_tol, DIST_TOL)) & ok
                if possible.any():
                    pr = np.flatnonzero(possible)
                    c0p = None if c0 is None else c0[pr]

                    def event(ts, xs, sub, c0p=c0p):
                        return hit_mask(target, ts, xs, None if c0p is None else c0p[sub], hit_tol)

                    direct = end_hit[pr]
                    frac = np.full(pr.size, np.nan)
                    if direct.any():
                        d = pr[direct]
                        sub_c0 = None if c0 is None else c0[d]

                        def ev_d(ts, xs, sub, sub_c0=sub_c0):
                            return hit_mask(target, ts, xs, None if sub_c0 is None else sub_c0[sub], hit_tol)

                        frac[direct] = _first_event(problem, tr[d], x[d], u[d], hr[d], ev_d)
                    if (~direct).any():
                        d = pr[~direct]
                        tol = max(hit_tol, DIST_TOL)
                        trav = float(np.max(1.5 * np.hypot(h, np.linalg.norm(xn[d] - x[d], axis=1))))
                        M = int(min(4096, max(2, math.ceil(trav / tol))))
                        sub_c0 = None if c0 is None else c0[d]

                        def ev_s(ts, xs, sub, sub_c0=sub_c0):
                            return hit_mask(target, ts, xs, None if sub_c0 is None else sub_c0[sub], hit_tol)

                        frac[~direct] = _first_event(problem, tr[d], x[d], u[d], hr[d], ev_s, subsamples=M)
                    got = ~np.isnan(frac)
                    stop_frac[pr[got]] = frac[got]
                    is_hit[pr[got]] = True
            if domain is not None and ok.any():
                out = ~domain.contains(tr + h, xn) & ok
                if out.any():
                    orow = np.flatnonzero(out)

                    def ev_exit(ts, xs, sub):
                        return ~domain.contains(ts, xs)

                    fr = _first_event(problem, tr[orow], x[orow], u[orow], hr[orow], ev_exit)
                    earlier = np.isnan(stop_frac[orow]) | (fr < stop_frac[orow])
                    sel = orow[earlier]
                    stop_frac[sel] = fr[earlier]
                    is_hit[sel] = False
                    exited[rows[sel]] = True
            # rows that stop inside this step
            stop = ~np.isnan(stop_frac)
            if stop.any():
                sr = np.flatnonzero(stop)
                xs, dcs, _ = rk4_step(problem, tr[sr], x[sr], u[sr], stop_frac[sr] * h)
                ts = t + stop_frac[sr] * h
                g = rows[sr]
                X[g] = xs
                C[g] += dcs
                hh = is_hit[sr]
                if hh.any():
                    gh = g[hh]
                    hit[gh] = True
                    hit_time[gh] = ts[hh]
                    hit_state[gh] = xs[hh]
                    hit_value[gh] = C[gh] + psi_at(ts[hh], xs[hh])
                ex = ~hh
                exit_time[g[ex]] = ts[ex]
                alive[g] = False
            go = ok & ~stop
            X[rows[go]] = xn[go]
            C[rows[go]] += dc[go]
            times.append(t + h)
            if record:
                adv = rows[go]
                k_end = np.asarray(problem.dynamics(np.full(adv.size, t + h), X[adv], u[go]), dtype=float)
                snap = np.full((N, n), np.nan)
                snap[adv] = X[adv]
                states.append(snap)
                cs = np.full(N, np.nan)
                cs[adv] = C[adv]
                costs.append(cs)
                rt = np.full((2, N, n), np.nan)
                rt[0, adv] = k1[go]
                rt[1, adv] = k_end
                rates.append(rt)
        if not alive.any():
            break
    return BatchResult(
        times=np.asarray(times),
        states=np.asarray(states) if record else None,
        final_states=X,
        final_costs=C,
        hit=hit,
        hit_time=hit_time,
        hit_state=hit_state,
        hit_value=hit_value,
        exited=exited,
        exit_time=exit_time,
        blown=blown,
        rates=np.asarray(rates) if record else None,
        costs=np.asarray(costs) if record else None,
    )


def integrate(problem: ControlProblem, control: PiecewiseConstantControl, t0: float, x0, tf: float,
              step: float = None, target: SetSpec = None, hit_tol: float = 0.0,
              domain: SetSpec = None) -> Trajectory:
    """Single trajectory; stops early at domain exit (flagged) or, when a
    target is passed, at the first target hit."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if tf <= t0:
        raise PreconditionError("tf must exceed t0")
    domain = problem.domain if domain is None else domain
    if not bool(domain.contains(np.array([t0]), x0[None, :])[0]):
        raise PreconditionError(f"start ({t0}, {x0.tolist()}) is outside the domain")
    if control.t0 > t0 or control.tf < tf:
        raise PreconditionError("control does not cover [t0, tf]")
    step = (tf - t0) / 2000 if step is None else step
    if step <= 0:
        raise PreconditionError("step must be positive")
    c = control.restrict(t0, tf)
    res = march(problem, c.breakpoints, c.values[None], t0, x0[None], tf, step,
                target=target, hit_tol=hit_tol, domain=domain, record=True)
    if res.blown[0]:
        k = int(np.sum(np.isfinite(res.states[:, 0, 0]))) - 1
        raise IntegrationBlowup(float(res.times[max(k, 0)]))
    good = np.isfinite(res.states[:, 0, 0])
    times = res.times[good]
    states = res.states[good, 0]
    costs = res.costs[good, 0]
    rates = res.rates[good[1:], :, 0] if len(times) > 1 else None
    stop_t = res.hit_time[0] if res.hit[0] else (res.exit_time[0] if res.exited[0] else np.nan)
    if np.isfinite(stop_t) and stop_t > times[-1]:
        last_x = res.final_states[0]
        u_last = c(np.array([stop_t]))
        k0 = np.asarray(problem.dynamics(np.array([times[-1]]), states[-1:], u_last), float)[0]
        k1 = np.asarray(problem.dynamics(np.array([stop_t]), last_x[None], u_last), float)[0]
        times = np.append(times, stop_t)
        states = np.vstack([states, last_x])
        costs = np.append(costs, res.final_costs[0])
        extra = np.stack([k0, k1])[None]
        rates = extra if rates is None else np.concatenate([rates, extra])
    return Trajectory(
        times=times,
        states=states,
        control=c,
        costs=costs,
        rates=rates,
        exited=bool(res.exited[0]),
        exit_time=None if not res.exited[0] else float(res.exit_time[0]),
        hit_time=None if not res.hit[0] else float(res.hit_time[0]),
    )


# --------------------------------------------------------------------------
# control approximation


def approximate_control(samples_t, samples_u, grid, p: float, control_set=None, k: int = 2001) -> PiecewiseConstantControl:
    """Left-continuous step control on ``grid`` closest in sampled L^p to the samples.

    Per cell the L^2 optimum is the mean and the L^1 optimum the median
    (coordinate-wise for vector controls); other exponents are minimised
    numerically.  The cell value is then projected to the nearest sampled
    point of U when ``control_set`` is given.
    """
    from scipy.optimize import minimize

    ts = np.asarray(samples_t, dtype=float)
    us = np.asarray(samples_u, dtype=float)
    if us.ndim == 1:
        us = us[:, None]
    grid = np.asarray(grid, dtype=float)
    if ts.min() < grid[0] or ts.max() > grid[-1]:
        raise ValueError("grid does not cover the sample span")
    cell = np.clip(np.searchsorted(grid, ts, side="left") - 1, 0, len(grid) - 2)
    vals = np.empty((len(grid) - 1, us.shape[1]))
    for i in range(len(grid) - 1):
        sel = us[cell == i]
        if len(sel) == 0:
            raise ValueError(f"cell {i} ({grid[i]}, {grid[i + 1]}] has no samples")
        if p == 2:
            v = sel.mean(axis=0)
        elif p == 1:
            v = np.median(sel, axis=0)
        else:
            obj = lambda c: np.sum(np.linalg.norm(sel - c, axis=1) ** p)
            v = minimize(obj, sel.mean(axis=0), method="Nelder-Mead").x
        vals[i] = v
    if control_set is not None:
        vals = control_set.project(vals, k)
    return PiecewiseConstantControl(grid, vals)


def lp_distance(control: PiecewiseConstantControl, samples_t, samples_u, p: float) -> float:
    """Sampled L^p distance between a step control and a sampled control (uniform sample spacing assumed)."""
    ts = np.asarray(samples_t, dtype=float)
    us = np.asarray(samples_u, dtype=float).reshape(len(ts), -1)
    tt = np.clip(ts, np.nextafter(control.t0, np.inf), control.tf)
    diff = np.linalg.norm(control(tt) - us, axis=1)
    dt = (ts[-1] - ts[0]) / max(len(ts) - 1, 1)
    return float((np.sum(diff**p) * dt) ** (1.0 / p))


# --------------------------------------------------------------------------
# continuous dependence


@dataclass
class DependenceRow:
    scale: float
    dx0: float
    du_lp: float
    sup_distance: float
    exited: bool


def continuous_dependence_probe(problem: ControlProblem, control: PiecewiseConstantControl, t0: float, x0,
                                tf: float, perturbation_scales, step: float = None, seed: int = 0) -> list:
    """Sup-distance between the base trajectory and perturbed ones, per scale."""
    rng = np.random.default_rng(seed)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    step = (tf - t0) / 2000 if step is None else step
    c = control.restrict(t0, tf)
    rows = []
    for s in perturbation_scales:
        d = rng.normal(size=x0.shape)
        d = s * d / np.linalg.norm(d) if s > 0 else np.zeros_like(x0)
        du = rng.uniform(-s, s, c.values.shape)
        vals = problem.control_set.clip(c.values + du)
        du_real = vals - c.values
        widths = np.diff(c.breakpoints)
        p = problem.control_norm_exponent
        du_lp = float(np.sum(widths * np.linalg.norm(du_real, axis=1) ** p) ** (1 / p))
        both = np.stack([c.values, vals])
        res = march(problem, c.breakpoints, both, t0, np.stack([x0, x0 + d]), tf, step,
                    domain=problem.domain, record=True)
        k = np.all(np.isfinite(res.states[:, 1]), axis=1) & np.all(np.isfinite(res.states[:, 0]), axis=1)
        sup = float(np.max(np.linalg.norm(res.states[k, 1] - res.states[k, 0], axis=1)))
        rows.append(DependenceRow(float(s), float(np.linalg.norm(d)), du_lp, sup, bool(res.exited[1])))
    return rows
