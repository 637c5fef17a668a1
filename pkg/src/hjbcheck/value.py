"""Independent estimates of the value function.

Three routes, kept separate on purpose so that they can be cross-checked:
exhaustive search over piecewise-constant controls, backward dynamic
programming on a grid, and closed-loop simulation of a feedback synthesis.
"""

from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import DIST_TOL, ControlProblem, PiecewiseConstantControl
from .integrate import PreconditionError, integrate, march, rk4_step

MAX_PIECES = 6
MAX_ENUMERATION = 50_000


class BruteForceTooLarge(ValueError):
    def __init__(self, pieces: int, k: int):
        self.pieces = pieces
        self.k = k
        self.size = k**pieces
        super().__init__(
            f"{k}^{pieces} = {self.size} controls exceeds the guard "
            f"(pieces <= {MAX_PIECES}, enumeration <= {MAX_ENUMERATION})"
        )


# --------------------------------------------------------------------------
# grids


def interp_grid(values, lo, steps, pts):
    """Multilinear interpolation on a uniform grid with +inf propagation.

    Any corner carrying positive weight and value +inf makes the result
    +inf.  Points outside the box get +inf and are reported in the mask.
    """
    values = np.asarray(values, dtype=float)
    pts = np.asarray(pts, dtype=float)
    d = values.ndim
    shape = np.array(values.shape)
    f = (pts - lo) / steps
    outside = np.any((f < -1e-9) | (f > shape - 1 + 1e-9), axis=-1)
    i0 = np.clip(np.floor(f).astype(np.int64), 0, np.maximum(shape - 2, 0))
    w = np.clip(f - i0, 0.0, 1.0)
    acc = np.zeros(pts.shape[:-1])
    inf = np.zeros(pts.shape[:-1], dtype=bool)
    for corner in itertools.product((0, 1), repeat=d):
        c = np.array(corner)
        wt = np.prod(np.where(c == 1, w, 1.0 - w), axis=-1)
        idx = tuple(np.minimum(i0[..., k] + corner[k], shape[k] - 1) for k in range(d))
        v = values[idx]
        vinf = np.isinf(v) & (wt > 0)
        inf |= vinf
        acc += np.where(vinf, 0.0, wt * np.where(np.isinf(v), 0.0, v))
    acc[inf] = np.inf
    acc[outside] = np.inf
    return acc, outside


@dataclass
class ValueGrid:
    """Values on a uniform time x box grid (a single time layer when autonomous)."""

    t_axis: np.ndarray
    lo: np.ndarray
    steps: np.ndarray
    shape: tuple
    values: np.ndarray  # (nt, *shape)
    policy: Optional[np.ndarray] = None
    boundary_loss: int = 0
    autonomous: bool = False
    iterations: int = 0

    @property
    def x_axes(self):
        return [self.lo[i] + self.steps[i] * np.arange(self.shape[i]) for i in range(len(self.shape))]

    def nodes(self):
        axes = self.x_axes
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, len(axes))

    def value_at(self, t, x):
        """Interpolated value; time is snapped to the nearest layer."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.autonomous:
            v, _ = interp_grid(self.values[0], self.lo, self.steps, x)
            return v
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(x),))
        dt = self.t_axis[1] - self.t_axis[0] if len(self.t_axis) > 1 else 1.0
        li = np.clip(np.rint((t - self.t_axis[0]) / dt).astype(int), 0, len(self.t_axis) - 1)
        out = np.empty(len(x))
        for layer in np.unique(li):
            sel = li == layer
            out[sel], _ = interp_grid(self.values[layer], self.lo, self.steps, x[sel])
        return out

    def to_csv(self, path) -> None:
        nodes = self.nodes()
        n = nodes.shape[1]
        rows = []
        for i, t in enumerate(self.t_axis):
            rows.append(np.column_stack([np.full(len(nodes), t), nodes, self.values[i].reshape(-1)]))
        header = ",".join(["t"] + [f"x{i + 1}" for i in range(n)] + ["V"])
        np.savetxt(path, np.vstack(rows), delimiter=",", header=header, comments="", fmt="%.17g")

    def to_binary(self, path) -> None:
        """Little-endian dump: b"HJBV", u32 version, u32 axis count, then per axis
        (f64 start, f64 step, u64 count) with time first, then row-major f64 values."""
        dt = float(self.t_axis[1] - self.t_axis[0]) if len(self.t_axis) > 1 else 0.0
        with open(path, "wb") as fh:
            fh.write(b"HJBV")
            fh.write(struct.pack("<II", 1, 1 + len(self.shape)))
            fh.write(struct.pack("<ddQ", float(self.t_axis[0]), dt, len(self.t_axis)))
            for i in range(len(self.shape)):
                fh.write(struct.pack("<ddQ", float(self.lo[i]), float(self.steps[i]), int(self.shape[i])))
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @classmethod
    def from_binary(cls, path) -> "ValueGrid":
        with open(path, "rb") as fh:
            if fh.read(4) != b"HJBV":
                raise ValueError("not a value-grid dump")
            version, naxes = struct.unpack("<II", fh.read(8))
            if version != 1:
                raise ValueError(f"unsupported version {version}")
            axes = [struct.unpack("<ddQ", fh.read(24)) for _ in range(naxes)]
            data = np.frombuffer(fh.read(), dtype="<f8")
        t0, dt, nt = axes[0]
        counts = tuple(int(a[2]) for a in axes[1:])
        vals = data.reshape((int(nt),) + counts).astype(float)
        return cls(
            t_axis=t0 + dt * np.arange(int(nt)),
            lo=np.array([a[0] for a in axes[1:]]),
            steps=np.array([a[1] for a in axes[1:]]),
            shape=counts,
            values=vals,
            autonomous=int(nt) == 1,
        )


def _box(lo, hi, dx):
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    dx = np.broadcast_to(np.asarray(dx, dtype=float), lo.shape).copy()
    shape = tuple(int(round((h - l) / s)) + 1 for l, h, s in zip(lo, hi, dx))
    return lo, dx, shape


def dp_backup(problem: ControlProblem, t: float, dt: float, next_values, lo, steps, nodes, controls):
    """One backward step of the discrete dynamic programming principle.

    Returns ``(values, argmin, boundary_losses)`` for the given nodes.  A
    foot that crosses the target inside the step is charged the fraction of
    running cost up to the crossing plus the final cost there.
    """
    N = len(nodes)
    best = np.full(N, np.inf)
    arg = np.zeros(N, dtype=np.int32)
    losses = 0
    tt = np.full(N, t)
    target = problem.target
    c0 = None if target.crossing is None else np.asarray(target.crossing(tt, nodes), float)
    for j, w in enumerate(controls):
        u = np.broadcast_to(w, (N, len(w)))
        vel = np.asarray(problem.dynamics(tt, nodes, u), float)
        run = np.asarray(problem.running_cost(tt, nodes, u), float) * np.ones(N)
        foot = nodes + dt * vel
        cand, outside = interp_grid(next_values, lo, steps, foot)
        cand = cand + dt * run
        hit = target.contains(tt + dt, foot)
        theta = np.ones(N)
        if c0 is not None:
            c1 = np.asarray(target.crossing(tt + dt, foot), float)
            with np.errstate(invalid="ignore", divide="ignore"):
                crossed = (np.sign(c0) * np.sign(c1) < 0) | (c1 == 0)
                th = np.where(crossed, c0 / (c0 - c1), 1.0)
            theta = np.where(crossed, np.clip(th, 0.0, 1.0), theta)
            hit = hit | crossed
        if hit.any():
            ts = tt + theta * dt
            xs = nodes + (theta * dt)[:, None] * vel
            psi = np.asarray(problem.final_cost(ts, xs), float) * np.ones(N)
            cand = np.where(hit, theta * dt * run + psi, cand)
        losses += int(np.sum(outside & ~hit))
        better = cand < best
        best = np.where(better, cand, best)
        arg = np.where(better, j, arg)
    return best, arg, losses


def dp_value_grid(problem: ControlProblem, t_range, dt: float, lo, hi, dx, k: int = 21) -> ValueGrid:
    """Backward induction over a time x box grid (finite horizon)."""
    t0, T = t_range
    nt = int(round((T - t0) / dt)) + 1
    t_axis = t0 + dt * np.arange(nt)
    lo, steps, shape = _box(lo, hi, dx)
    if len(shape) > 3:
        raise ValueError("grids are limited to n <= 3")
    grid = ValueGrid(t_axis, lo, steps, shape, np.empty((nt,) + shape))
    nodes = grid.nodes()
    controls = problem.control_set.sample(k)
    tT = np.full(len(nodes), t_axis[-1])
    inS = problem.target.contains(tT, nodes)
    last = np.where(inS, np.asarray(problem.final_cost(tT, nodes), float) * np.ones(len(nodes)), np.inf)
    grid.values[-1] = last.reshape(shape)
    policy = np.zeros((nt - 1,) + shape, dtype=np.int32)
    loss = 0
    for i in range(nt - 2, -1, -1):
        v, a, l = dp_backup(problem, t_axis[i], dt, grid.values[i + 1], lo, steps, nodes, controls)
        ti = np.full(len(nodes), t_axis[i])
        inS = problem.target.contains(ti, nodes)
        if inS.any():
            v = np.where(inS, np.asarray(problem.final_cost(ti, nodes), float) * np.ones(len(nodes)), v)
        grid.values[i] = v.reshape(shape)
        policy[i] = a.reshape(shape)
        loss += l
    grid.policy = policy
    grid.boundary_loss = loss
    return grid


def _foot(problem, nodes, w, dt, method):
    u = np.broadcast_to(w, (len(nodes), len(w)))
    tt = np.zeros(len(nodes))
    if method == "euler":
        return nodes + dt * np.asarray(problem.dynamics(tt, nodes, u), float), u
    xn, _, _ = rk4_step(problem, tt, nodes, u, np.full(len(nodes), dt))
    return xn, u


def _foot_path(problem, nodes, w, dt, method, substeps):
    """Foot after ``dt`` and the first fraction of ``dt`` at which the path is
    within ``r`` of the target (checked at ``substeps`` points), as a function of ``r``."""
    x = nodes
    path = [nodes]
    u = None
    for _ in range(substeps):
        x, u = _foot(problem, x, w, dt / substeps, method)
        path.append(x)
    return x, u, path


def dp_min_time(problem: ControlProblem, lo, hi, dx, dt: float, k: int = 2, target_radius: float = None,
                max_iter: int = 5000, tol: float = 1e-10, foot: str = "euler",
                unreached: float = 1e6, substeps: int = 1) -> ValueGrid:
    """Value iteration for an autonomous minimum-time (or first-exit cost) problem.

    ``T(x) = min_w [dt L + T(foot(x, w))]`` iterated to a fixed point, with
    ``T = psi`` on nodes within ``target_radius`` of the target.  Feet are
    fixed across iterations, so interpolation stencils are precomputed.
    Nodes not reached yet carry the finite sentinel ``unreached`` so the
    reached region can grow through partially reached cells; values at or
    above ``1e-3 * unreached`` are returned as +inf.  With ``substeps > 1``
    the foot is reached in that many sub-steps and a target hit anywhere
    along them counts, with the linear fraction inside the first sub-step
    that ends within the target ball.
    """
    lo, steps, shape = _box(lo, hi, dx)
    grid = ValueGrid(np.array([0.0]), lo, steps, shape, np.empty((1,) + shape), autonomous=True)
    nodes = grid.nodes()
    # default: the cell diagonal, so the target ball always contains whole cells
    r = math.sqrt(len(shape)) * float(np.max(steps)) * (1 + 1e-9) if target_radius is None else target_radius
    d_nodes = problem.target.dist(np.zeros(len(nodes)), nodes)
    on = d_nodes <= r
    psi = np.asarray(problem.final_cost(np.zeros(len(nodes)), nodes), float) * np.ones(len(nodes))
    stencils = []
    shape_a = np.array(shape)
    losses = 0
    for w in problem.control_set.sample(k):
        ft, u, path = _foot_path(problem, nodes, w, dt, foot, max(1, int(substeps)))
        run = np.asarray(problem.running_cost(np.zeros(len(nodes)), nodes, u), float) * np.ones(len(nodes))
        hit = np.zeros(len(nodes), dtype=bool)
        theta = np.ones(len(nodes))
        d0 = d_nodes
        m = len(path) - 1
        for j in range(1, m + 1):
            d1 = problem.target.dist(np.zeros(len(nodes)), path[j])
            new = (d1 <= r) & ~hit
            with np.errstate(invalid="ignore", divide="ignore"):
                frac = np.clip((d0 - r) / (d0 - d1), 0.0, 1.0)
            theta = np.where(new, (j - 1 + np.nan_to_num(frac, nan=1.0)) / m, theta)
            hit |= new
            d0 = d1
        f = (ft - lo) / steps
        outside = np.any((f < -1e-9) | (f > shape_a - 1 + 1e-9), axis=-1)
        losses += int(np.sum(outside & ~hit))
        i0 = np.clip(np.floor(f).astype(np.int64), 0, shape_a - 2)
        wts = np.clip(f - i0, 0.0, 1.0)
        flats, weights = [], []
        for corner in itertools.product((0, 1), repeat=len(shape)):
            c = np.array(corner)
            weights.append(np.prod(np.where(c == 1, wts, 1.0 - wts), axis=-1))
            flats.append(np.ravel_multi_index(tuple(i0[:, j] + corner[j] for j in range(len(shape))), shape))
        stencils.append((np.stack(flats), np.stack(weights), dt * run, hit, theta * dt * run + psi, outside))
    V = np.where(on, psi, unreached)
    cut = 1e-3 * unreached
    it = 0
    for it in range(1, max_iter + 1):
        best = np.full(len(nodes), np.inf)
        for flats, weights, run_cost, hit, hit_cost, outside in stencils:
            cand = np.sum(weights * V[flats], axis=0) + run_cost
            cand = np.where(outside, unreached, cand)
            cand = np.where(hit, hit_cost, cand)
            best = np.minimum(best, cand)
        best = np.minimum(np.where(on, psi, best), unreached)
        delta = float(np.max(np.abs(best - V) / np.maximum(1.0, np.abs(V))))
        V = best
        if delta < tol:
            break
    grid.values[0] = np.where(V < cut, V, np.inf).reshape(shape)
    grid.boundary_loss = losses
    grid.iterations = it
    return grid


# --------------------------------------------------------------------------
# exhaustive search


@dataclass
class BruteForceResult:
    value: float
    control: Optional[PiecewiseConstantControl]
    hit_time: float
    controls_searched: int
    hits: int


def enumerate_controls(problem: ControlProblem, pieces: int, k: int) -> np.ndarray:
    """All ``k^pieces`` sequences of sampled control values, shape ``(K, pieces, q)``."""
    if pieces > MAX_PIECES or k**pieces > MAX_ENUMERATION:
        raise BruteForceTooLarge(pieces, k)
    pts = problem.control_set.sample(k)
    idx = np.array(list(itertools.product(range(len(pts)), repeat=pieces)), dtype=int)
    return pts[idx]


def brute_force_value(problem: ControlProblem, t0: float, x0, pieces: int, horizon: float, k: int,
                      step: float = None, hit_tol: float = DIST_TOL) -> BruteForceResult:
    """Minimum of the Bolza cost over equal-length step controls on ``[t0, horizon]``.

    Controls that never reach the target count as +inf.  Requires
    ``pieces <= MAX_PIECES`` and ``k^pieces <= MAX_ENUMERATION``; note that
    ``k`` counts lattice points, extreme points of U are added on top.
    """
    if pieces > MAX_PIECES or k**pieces > MAX_ENUMERATION:
        raise BruteForceTooLarge(pieces, k)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if not bool(problem.domain.contains(np.array([t0]), x0[None])[0]):
        raise PreconditionError("start outside the domain")
    if bool(problem.target.contains(np.array([t0]), x0[None])[0]):
        psi = float(np.asarray(problem.final_cost(np.array([t0]), x0[None]), float).ravel()[0])
        return BruteForceResult(psi, None, t0, 0, 1)
    if horizon <= t0:
        return BruteForceResult(math.inf, None, math.nan, 0, 0)
    vals = enumerate_controls(problem, pieces, k)
    if vals.shape[0] > MAX_ENUMERATION:
        raise BruteForceTooLarge(pieces, k)
    step = (horizon - t0) / 2000 if step is None else step
    bp = np.linspace(t0, horizon, pieces + 1)
    X0 = np.repeat(x0[None], len(vals), axis=0)
    res = march(problem, bp, vals, t0, X0, horizon, step, target=problem.target, hit_tol=hit_tol,
                domain=problem.domain)
    score = np.where(res.hit, res.hit_value, np.inf)
    j = int(np.argmin(score))
    if not np.isfinite(score[j]):
        return BruteForceResult(math.inf, None, math.nan, len(vals), 0)
    return BruteForceResult(float(score[j]), PiecewiseConstantControl(bp, vals[j]), float(res.hit_time[j]),
                            len(vals), int(np.sum(res.hit)))


# --------------------------------------------------------------------------
# synthesis


@dataclass
class SynthesisResult:
    values: np.ndarray
    hit_time: np.ndarray
    converged: np.ndarray
    final_states: np.ndarray
    switch_times: list = field(default_factory=list)  # per row, when recorded
    tail_bound: Optional[np.ndarray] = None


def synthesis_values(problem: ControlProblem, feedback: Callable, t0, X0, step: float = 1e-2,
                     cutoff: float = 1e-6, max_time: float = 50.0, max_iter: int = 200_000,
                     record_switches: bool = False, overshoot: float = 0.0) -> SynthesisResult:
    """Closed-loop costs from many starts at once.

    The feedback is sampled at the start of each step and held.  When the
    sampled feedback changes within a step, the switch instant is located by
    bisection and the step is cut there.  Near the target the step shrinks
    so that the ``cutoff`` ball is not jumped over; a row terminates once it
    is within ``cutoff`` of the target and is charged the final cost at the
    nearest target point.

    ``overshoot`` keeps the old control for that much extra time past a
    located switch.  A state that lands exactly on a switching threshold
    and then rides it (a terminal arc, say) would otherwise cross back on
    round-off alone and chatter.
    """
    X = np.array(X0, dtype=float).reshape(-1, problem.dim)
    N = len(X)
    t = np.broadcast_to(np.asarray(t0, dtype=float), (N,)).copy()
    tstart = t.copy()
    C = np.zeros(N)
    values = np.full(N, np.inf)
    hit_time = np.full(N, np.nan)
    converged = np.zeros(N, dtype=bool)
    active = np.ones(N, dtype=bool)
    switches = [[] for _ in range(N)] if record_switches else []
    target = problem.target
    U = np.asarray(feedback(t, X), dtype=float).reshape(N, -1)
    h_min = 1e-13

    def finish(rows):
        ts, xs = t[rows], X[rows]
        if target.nearest is not None:
            ts, xs = target.nearest(ts, xs)
        psi = np.asarray(problem.final_cost(ts, xs), float) * np.ones(len(rows))
        values[rows] = C[rows] + psi
        hit_time[rows] = t[rows]
        converged[rows] = True
        active[rows] = False

    for _ in range(max_iter):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        d = target.dist(t[rows], X[rows])
        done = (d <= cutoff) | target.contains(t[rows], X[rows])
        if done.any():
            finish(rows[done])
            rows = rows[~done]
            d = d[~done]
        late = t[rows] - tstart[rows] >= max_time
        if late.any():
            active[rows[late]] = False
            rows = rows[~late]
            d = d[~late]
        if rows.size == 0:
            continue
        x, u, tr = X[rows], U[rows], t[rows]
        speed = np.linalg.norm(np.asarray(problem.dynamics(tr, x, u), float), axis=1)
        h = np.minimum(step, np.maximum(0.5 * (d - cutoff) / np.sqrt(1.0 + speed**2), h_min))
        xn, dc, _ = rk4_step(problem, tr, x, u, h)
        un = np.asarray(feedback(tr + h, xn), dtype=float).reshape(len(rows), -1)
        sw = np.any(un != u, axis=1)
        if sw.any():
            s = np.flatnonzero(sw)
            us = u[s]

            def changed(ts, xs, sub, us=us):
                return np.any(np.asarray(feedback(ts, xs), float).reshape(len(xs), -1) != us[sub], axis=1)

            lo = np.zeros(s.size)
            hi = np.ones(s.size)
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                xm, _, _ = rk4_step(problem, tr[s], x[s], us, mid * h[s])
                ev = changed(tr[s] + mid * h[s], xm, np.arange(s.size))
                hi = np.where(ev, mid, hi)
                lo = np.where(ev, lo, mid)
            hs = np.minimum(hi * h[s] + overshoot, h[s])
            xs, dcs, _ = rk4_step(problem, tr[s], x[s], us, hs)
            xn[s] = xs
            dc[s] = dcs
            h[s] = hs
            un[s] = np.asarray(feedback(tr[s] + hs, xs), float).reshape(s.size, -1)
            if record_switches:
                for r_, tsw in zip(rows[s], tr[s] + hs):
                    switches[r_].append(float(tsw))
        bad = ~np.all(np.isfinite(xn), axis=1)
        out = ~problem.domain.contains(tr + h, xn) | bad
        if out.any():
            active[rows[out]] = False
        keep = ~out
        g = rows[keep]
        X[g] = xn[keep]
        C[g] += dc[keep]
        t[g] = tr[keep] + h[keep]
        U[g] = un[keep]
    return SynthesisResult(values, hit_time, converged, X, [np.array(s) for s in switches] if record_switches else [])


@dataclass
class SynthesisOutcome:
    value: float
    hit_time: float
    converged: bool
    switch_times: np.ndarray


def value_from_synthesis(problem: ControlProblem, feedback: Callable, t0: float, x0, step: float = 1e-2,
                         chattering_cutoff: float = 1e-6, max_time: float = 50.0,
                         overshoot: float = 0.0) -> SynthesisOutcome:
    """Cost of the closed-loop trajectory from one start (+inf if it never gets within the cutoff)."""
    if chattering_cutoff <= 0:
        raise ValueError("chattering cutoff must be positive")
    res = synthesis_values(problem, feedback, t0, np.atleast_1d(np.asarray(x0, float))[None], step,
                           chattering_cutoff, max_time, record_switches=True, overshoot=overshoot)
    return SynthesisOutcome(float(res.values[0]), float(res.hit_time[0]), bool(res.converged[0]), res.switch_times[0])


# --------------------------------------------------------------------------
# infinite horizon


def truncated_infinite_cost(problem: ControlProblem, control: PiecewiseConstantControl, t0: float, x0, T: float,
                            step: float = None) -> float:
    """``int_{t0}^{T} L + psi(T, x(T))``: the horizon-truncated infinite-horizon cost.

    Returns +inf when ``x(T)`` is not in the target neighborhood (where psi lives).
    """
    if problem.target_neighborhood is None:
        raise ValueError("problem has no target neighborhood")
    tr = integrate(problem, control, t0, x0, T, step)
    tT, xT = tr.times[-1:], tr.states[-1:]
    if tr.exited or not bool(problem.target_neighborhood.contains(tT, xT)[0]):
        return math.inf
    return float(tr.costs[-1] + np.asarray(problem.final_cost(tT, xT), float).ravel()[0])
