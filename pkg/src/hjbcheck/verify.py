"""Numerical audits of the hypotheses of the verification theorems.

Every check samples, so it can only refute: a pass means no violation was
found at the stated resolution, a failure carries a witness point.
"""

from __future__ import annotations

import dataclasses
import math
import time
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import (
    DIST_TOL,
    CandidateValueFunction,
    ControlProblem,
    HypothesisRecord,
    PiecewiseConstantControl,
    RectifiableSet,
    SetSpec,
    Trajectory,
    VerificationReport,
    make_record,
)
from .integrate import IntegrationBlowup, PreconditionError, integrate, march
from .value import ValueGrid, dp_backup, enumerate_controls

THEOREMS = ("teo1", "teo2", "corollary_eps")
BOUNDARY_MODES = ("strict_levelset", "remark_liminf")
H_LIST = (1e-2, 1e-3, 1e-4)
# down to about 1e-6: the proxy overshoots by roughly |dW/dx| * r_min / 2, and sampled points of a steep
# exceptional set can carry slopes near 1e4
ANNULI = tuple(0.1 * 0.5**j for j in range(18))


class ExcludedPoint(ValueError):
    """The point is within the exclusion radius of the exceptional set."""


@dataclass(frozen=True)
class HypothesisCheckSpec:
    """Resolution, tolerances and mode of a hypothesis audit.

    ``window = (tlo, thi, xlo, xhi)`` bounds the sampled part of Q.  Time
    layers come from ``t_slices`` if set, else from ``t_mesh`` (default
    ``mesh``).  ``eps``, ``g`` and ``g_l1`` only matter in ``corollary_eps``
    mode, where hypothesis thresholds are relaxed by ``eps * g(t)``.
    """

    window: tuple
    theorem: str = "teo1"
    mesh: float = 1.0 / 64
    t_mesh: Optional[float] = None
    t_slices: Optional[int] = None
    exclusion_radius: Optional[float] = None  # default 2 * mesh
    hjb_tol: float = 1e-6
    target_tol: float = 1e-6
    boundary_tol: float = 1e-6
    ndj_tol: float = 1e-3
    liminf_tol: float = 1e-2
    k: int = 21
    eps: float = 0.0
    g: Optional[Callable] = None  # default g = 1
    g_l1: float = 0.0
    boundary_mode: str = "strict_levelset"
    target_samples: int = 2000
    boundary_samples: int = 2000
    ndj_trajectories: int = 16
    ndj_horizon: float = 1.0
    liminf_points: int = 24
    liminf_samples: int = 1000
    seed: int = 0
    refinement: int = 2
    chunk: int = 1 << 16

    def __post_init__(self):
        if self.theorem not in THEOREMS:
            raise ValueError(f"unknown theorem mode {self.theorem!r}")
        if self.boundary_mode not in BOUNDARY_MODES:
            raise ValueError(f"unknown boundary mode {self.boundary_mode!r}")
        if len(self.window) != 4:
            raise ValueError("window must be (tlo, thi, xlo, xhi)")
        if not self.window[1] > self.window[0]:
            raise ValueError("window time range is empty")
        for name in ("mesh", "hjb_tol", "target_tol", "boundary_tol", "ndj_tol", "liminf_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.t_mesh is not None and not self.t_mesh > 0:
            raise ValueError("t_mesh must be positive")
        if self.t_slices is not None and self.t_slices < 1:
            raise ValueError("t_slices must be >= 1")
        if self.rho < self.mesh:
            raise ValueError("exclusion radius must be at least the grid mesh")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.eps < 0 or self.g_l1 < 0:
            raise ValueError("eps and g_l1 must be nonnegative")
        if self.eps > 0 and self.theorem != "corollary_eps":
            raise ValueError("eps only applies in corollary_eps mode")

    @classmethod
    def for_entry(cls, entry, **overrides) -> "HypothesisCheckSpec":
        """Spec from a gallery entry's window, theorem and check settings."""
        kw = {"window": entry.window, "theorem": entry.theorem}
        kw.update(entry.check)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)

    def replace(self, **kw) -> "HypothesisCheckSpec":
        return dataclasses.replace(self, **kw)

    @property
    def rho(self) -> float:
        return 2.0 * self.mesh if self.exclusion_radius is None else float(self.exclusion_radius)

    @property
    def relaxed(self) -> bool:
        return self.theorem == "corollary_eps"

    def slack(self, t) -> np.ndarray:
        """``eps * g(t)`` in corollary mode, zero otherwise."""
        t = np.asarray(t, dtype=float)
        if not self.relaxed or self.eps == 0:
            return np.zeros(t.shape)
        g = np.ones(t.shape) if self.g is None else np.asarray(self.g(t), float) * np.ones(t.shape)
        return self.eps * g

    def tolerances(self) -> dict:
        return {k: getattr(self, k) for k in ("hjb_tol", "target_tol", "boundary_tol", "ndj_tol", "liminf_tol")}


def grid_axes(spec: HypothesisCheckSpec):
    tlo, thi, xlo, xhi = spec.window
    if spec.t_slices is not None:
        t_axis = np.linspace(tlo, thi, spec.t_slices) if spec.t_slices > 1 else np.array([float(tlo)])
    else:
        dt = spec.mesh if spec.t_mesh is None else spec.t_mesh
        t_axis = np.linspace(tlo, thi, int(round((thi - tlo) / dt)) + 1)
    x_axes = [np.linspace(a, b, int(round((b - a) / spec.mesh)) + 1)
              for a, b in zip(np.atleast_1d(xlo), np.atleast_1d(xhi))]
    return t_axis, x_axes


def grid_points(spec: HypothesisCheckSpec):
    """All grid points as ``(t (N,), X (N, n))``, time slowest."""
    t_axis, x_axes = grid_axes(spec)
    mesh = np.meshgrid(t_axis, *x_axes, indexing="ij")
    flat = [m.ravel() for m in mesh]
    return flat[0], np.column_stack(flat[1:])


def _grid_info(spec: HypothesisCheckSpec) -> dict:
    t_axis, x_axes = grid_axes(spec)
    return {
        "mesh": spec.mesh,
        "t_axis": [float(t_axis[0]), float(t_axis[-1]), int(len(t_axis))],
        "x_axes": [[float(a[0]), float(a[-1]), int(len(a))] for a in x_axes],
        "exclusion_radius": spec.rho,
        "k": spec.k,
        "refinement": spec.refinement,
    }


def _witness(t, x, **more) -> dict:
    w = {"t": float(t), "x": [float(v) for v in np.atleast_1d(x)]}
    for key, val in more.items():
        if isinstance(val, str):
            w[key] = val
        else:
            w[key] = [float(v) for v in np.atleast_1d(val)] if np.ndim(val) else float(val)
    return w


# --------------------------------------------------------------------------
# HJB residual


def hjb_residuals(W: CandidateValueFunction, problem: ControlProblem, t, X, controls):
    """``W_s + min_w [W_y . f(t, x, w) + L(t, x, w)]`` at many points.

    Returns ``(residual, argmin)``; the residual is NaN where the gradient
    is not finite.
    """
    t = np.asarray(t, dtype=float)
    X = np.asarray(X, dtype=float)
    N = len(t)
    ws, wy = W.grad(t, X)
    ws = np.asarray(ws, float) * np.ones(N)
    wy = np.asarray(wy, float).reshape(N, -1)
    best = np.full(N, np.inf)
    arg = np.zeros(N, dtype=int)
    for j, w in enumerate(np.atleast_2d(controls)):
        U = np.broadcast_to(w, (N, len(w)))
        f = np.asarray(problem.dynamics(t, X, U), float).reshape(N, -1)
        L = np.asarray(problem.running_cost(t, X, U), float) * np.ones(N)
        with np.errstate(invalid="ignore"):
            h = np.sum(np.where(f == 0, 0.0, wy * f), axis=-1) + L
        better = h < best
        best = np.where(better, h, best)
        arg = np.where(better, j, arg)
    bad = ~(np.isfinite(ws) & np.all(np.isfinite(wy), axis=-1))
    return np.where(bad, np.nan, ws + best), arg


def hjb_residual(W: CandidateValueFunction, problem: ControlProblem, point, k: int = 21,
                 exclusion_radius: float = 0.0, refinement: int = 2) -> float:
    """Residual at one point ``(t, x)``; raises ``ExcludedPoint`` within ``exclusion_radius`` of A."""
    t, x = point
    x = np.atleast_1d(np.asarray(x, dtype=float))
    A = W.exceptional_set
    if A.pieces and exclusion_radius > 0:
        d = float(A.distance(np.array([t]), x[None], refinement)[0])
        if d <= exclusion_radius:
            raise ExcludedPoint(f"({t}, {x.tolist()}) is within {exclusion_radius} of the exceptional set (d={d:.3g})")
    res, _ = hjb_residuals(W, problem, np.array([float(t)]), x[None], problem.control_set.sample(k))
    return float(res[0])


# --------------------------------------------------------------------------
# no downward jumps and essential lower limits


@dataclass
class NDJResult:
    worst: float  # max over t of min_h W(t - h, x(t - h)) - W(t, x(t)); positive = downward jump
    t: float
    x: list
    samples: int
    omega: Optional[list] = None


def check_ndj(W: CandidateValueFunction, problem: ControlProblem, omega, trajectory: Trajectory,
              h_list: Sequence[float] = H_LIST) -> NDJResult:
    """Backward-offset test of the no-downward-jump property along a trajectory.

    Sample times closer than ``max(h_list)`` to the start are skipped.
    """
    h = np.asarray(h_list, dtype=float)
    if np.any(h <= 0):
        raise ValueError("offsets must be positive")
    om = None if omega is None else [float(v) for v in np.atleast_1d(omega)]
    times = trajectory.times
    keep = times - h.max() >= times[0] - 1e-12
    ts = times[keep]
    if len(ts) == 0:
        return NDJResult(-math.inf, math.nan, [], 0, om)
    xs = trajectory.states[keep]
    cur = W(ts, xs)
    back = np.full(len(ts), np.inf)
    for hh in h:
        tb = np.maximum(ts - hh, times[0])
        back = np.minimum(back, W(tb, trajectory.state_at(tb)))
    with np.errstate(invalid="ignore"):
        diff = back - cur
    diff = np.where(np.isposinf(cur) | np.isnan(diff), -np.inf, diff)
    j = int(np.argmax(diff))
    return NDJResult(float(diff[j]), float(ts[j]), [float(v) for v in xs[j]], int(len(ts)), om)


@dataclass
class LiminfResult:
    passed: bool
    proxy: float  # min over annuli of the annulus quantile of W
    value: float  # W(t, x)
    excess: float  # proxy - value
    coverage: float
    quantiles: list


def annulus_samples(x, r: float, m: int, rng: np.random.Generator):
    """``m`` points uniform (by volume) in ``r/2 < |y - x| <= r``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = len(x)
    d = rng.normal(size=(m, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    inner = 0.5**n
    rad = r * (inner + (1.0 - inner) * rng.uniform(size=m)) ** (1.0 / n)
    return x + rad[:, None] * d


def check_ess_liminf(W: CandidateValueFunction, t: float, x, annuli: Sequence[float] = ANNULI, m: int = 1000,
                     quantile: float = 0.05, decay: float = 0.5, liminf_tol: float = 1e-2,
                     rng: np.random.Generator = None, domain: SetSpec = None) -> LiminfResult:
    """Quantile proxy for the essential lower limit of ``W(t, .)`` at ``x``.

    On the j-th annulus the quantile level is ``quantile * decay**j``: a
    positive level ignores null sets, and letting it shrink with the radius
    lets the proxy reach values that are approached only on small sets.
    Samples outside ``domain`` are redrawn (up to three times).
    """
    radii = np.asarray(annuli, dtype=float)
    if len(radii) == 0 or np.any(np.diff(radii) >= 0) or np.any(radii <= 0):
        raise ValueError("annuli radii must be positive and decreasing")
    if m < 30:
        raise ValueError("need at least 30 samples per annulus")
    rng = np.random.default_rng(0) if rng is None else rng
    x = np.atleast_1d(np.asarray(x, dtype=float))
    value = float(W(np.array([t]), x[None])[0])
    quants = []
    inside_total = 0
    for j, r in enumerate(radii):
        ys = annulus_samples(x, r, m, rng)
        if domain is not None:
            ok = domain.contains(np.full(m, t), ys)
            for _ in range(3):
                if ok.all():
                    break
                redo = annulus_samples(x, r, int(np.sum(~ok)), rng)
                ys[~ok] = redo
                ok[~ok] = domain.contains(np.full(len(redo), t), redo)
            ys = ys[ok]
        inside_total += len(ys)
        if len(ys) == 0:
            continue
        vals = W(np.full(len(ys), t), ys)
        quants.append(float(np.quantile(vals, quantile * decay**j)))
    coverage = inside_total / (m * len(radii))
    if coverage < 0.5:
        warnings.warn(f"ess-liminf sampling at ({t}, {x.tolist()}) covered only {coverage:.0%} of the annuli")
    proxy = min(quants) if quants else math.inf
    if math.isinf(value) and value > 0:
        return LiminfResult(True, proxy, value, -math.inf, coverage, quants)
    excess = proxy - value
    return LiminfResult(bool(excess <= liminf_tol), proxy, value, excess, coverage, quants)


# --------------------------------------------------------------------------
# hypothesis audits


def _ndj_part(W, problem, spec, rng, q_t, q_x, controls):
    tlo, thi = spec.window[0], spec.window[1]
    H = min(spec.ndj_horizon, 0.5 * (thi - tlo))
    results = []
    skipped = 0
    if len(q_t) == 0 or spec.ndj_trajectories == 0:
        return results, skipped
    idx = rng.choice(len(q_t), size=spec.ndj_trajectories, replace=len(q_t) < spec.ndj_trajectories)
    for i in idx:
        w = controls[rng.integers(len(controls))]
        t0 = float(rng.uniform(tlo, thi - H))
        ctrl = PiecewiseConstantControl.constant(w, t0, t0 + H)
        try:
            traj = integrate(problem, ctrl, t0, q_x[i], t0 + H, H / 400, domain=problem.Q)
        except (IntegrationBlowup, PreconditionError):
            skipped += 1
            continue
        results.append(check_ndj(W, problem, w, traj))
    return results, skipped


def _liminf_part(W, problem, spec, rng, q_t, q_x):
    tlo, thi, xlo, xhi = spec.window
    pts = []
    if len(q_t):
        idx = rng.choice(len(q_t), size=min(spec.liminf_points, len(q_t)), replace=False)
        pts += [(float(q_t[i]), q_x[i]) for i in idx]
    A = W.exceptional_set
    if A.pieces:
        at, ax = A.sample_points(max(1, 4 * spec.liminf_points // len(A.pieces)), rng)
        inside = (at >= tlo) & (at <= thi) & np.all((ax >= xlo) & (ax <= xhi), axis=1)
        inside &= problem.Q.contains(at, ax)
        cand = np.flatnonzero(inside)
        if len(cand):
            pick = rng.choice(cand, size=min(spec.liminf_points, len(cand)), replace=False)
            pts += [(float(at[i]), ax[i]) for i in pick]
    out = []
    for t, x in pts:
        out.append(((t, x), check_ess_liminf(W, t, x, m=spec.liminf_samples, liminf_tol=spec.liminf_tol, rng=rng,
                                              domain=problem.domain)))
    return out


def _record_i(ndj, ndj_skipped, liminf, spec) -> tuple:
    excess, wit = [], []
    for r in ndj:
        excess.append(r.worst - spec.ndj_tol)
        wit.append(_witness(r.t, r.x, kind="ndj") if r.samples else None)
    for (t, x), r in liminf:
        excess.append(r.excess - spec.liminf_tol)
        wit.append(_witness(t, x))
    extras = {
        "ndj": {
            "trajectories": len(ndj),
            "skipped": ndj_skipped,
            "worst": max((r.worst for r in ndj), default=None),
            "h_list": list(H_LIST),
        },
        "liminf": {
            "points": len(liminf),
            "worst_excess": max((r.excess for _, r in liminf), default=None),
            "min_coverage": min((r.coverage for _, r in liminf), default=None),
            "annuli": list(ANNULI),
        },
    }
    for part in extras.values():
        for key in ("worst", "worst_excess"):
            if key in part and part[key] is not None and not math.isfinite(part[key]):
                part[key] = None
    if not excess:
        return HypothesisRecord("i", "pass", 0.0, 0.0, None, 0, 0, "no points checked"), extras
    ex = np.nan_to_num(np.asarray(excess, float), nan=-np.inf)
    j = int(np.argmax(ex))
    worst = float(ex[j])
    verdict = "fail" if worst > 0 else "pass"
    note = ("excess over tolerance of the backward-offset jump test (ndj_tol) and of the annulus quantile "
            "proxy (liminf_tol); positive = violation")
    return HypothesisRecord("i", verdict, worst, 0.0, wit[j], len(excess), 0, note), extras


def _grid_records(W, problem, spec, rng):
    """Records ii-v and the residual field; ``ii`` uses S, or S1 in teo2 mode."""
    controls = problem.control_set.sample(spec.k)
    ts, X = grid_points(spec)
    A = W.exceptional_set
    Q = problem.Q
    in_q = Q.contains(ts, X) & problem.domain.contains(ts, X)
    q_t, q_x = ts[in_q], X[in_q]
    # iv: HJB inequality on Q minus A
    res_all = np.full(len(q_t), np.nan)
    excluded = np.zeros(len(q_t), dtype=bool)
    vacuous = np.zeros(len(q_t), dtype=bool)
    w_all = np.full(len(q_t), np.nan)
    for s in range(0, len(q_t), spec.chunk):
        sl = slice(s, s + spec.chunk)
        tc, xc = q_t[sl], q_x[sl]
        wv = W(tc, xc)
        w_all[sl] = wv
        if A.pieces:
            excluded[sl] = A.distance(tc, xc, spec.refinement) <= spec.rho
        vac = ~np.isfinite(wv) & ~excluded[sl]
        vacuous[sl] = vac
        use = ~excluded[sl] & ~vac
        if use.any():
            r, _ = hjb_residuals(W, problem, tc[use], xc[use], controls)
            tmp = res_all[sl]
            tmp[use] = r
            res_all[sl] = tmp
    checked = ~excluded & ~vacuous & np.isfinite(res_all)
    undefined = int(np.sum(~excluded & ~vacuous & ~np.isfinite(res_all)))
    viol = -(res_all[checked] + spec.slack(q_t[checked]))
    note = []
    if vacuous.any():
        note.append(f"{int(vacuous.sum())} points with W = +inf (vacuous)")
    if undefined:
        note.append(f"{undefined} points with undefined gradient skipped")
    rec_iv = make_record("iv", viol, q_t[checked], q_x[checked], spec.hjb_tol, int(excluded.sum()) + undefined,
                         "; ".join(note))
    records = {"iv": rec_iv}

    # ii: W <= psi on the target (S1 for infinite horizon)
    ii_set = problem.target_neighborhood if spec.theorem == "teo2" else problem.target
    if ii_set.sampler is not None:
        st, sx = ii_set.sample(spec.target_samples, rng, spec.window)
        if len(st):
            wv = W(st, sx)
            psi = np.asarray(problem.final_cost(st, sx), float) * np.ones(len(st))
            with np.errstate(invalid="ignore"):
                v = wv - psi - (spec.eps if spec.relaxed else 0.0)
            records["ii"] = make_record("ii", np.nan_to_num(v, nan=np.inf), st, sx, spec.target_tol,
                                        note="" if spec.theorem != "teo2" else "checked on the target neighbourhood")
        else:
            records["ii"] = HypothesisRecord("ii", "pass", 0.0, spec.target_tol, None, 0, 0, "no target points in window")
    else:
        records["ii"] = HypothesisRecord("ii", "skipped", 0.0, spec.target_tol, None, 0, 0, "target has no sampler")

    # iii and v are dropped when Q is the whole domain
    if problem.q_is_omega:
        records["iii"] = HypothesisRecord("iii", "skipped", 0.0, spec.boundary_tol, note="Q = Omega")
        records["v"] = HypothesisRecord("v", "skipped", 0.0, spec.hjb_tol, note="Q = Omega")
    else:
        fin = np.isfinite(w_all)
        sup_w = float(np.max(w_all[fin])) if fin.any() else -math.inf
        bt, bx = Q.sample(spec.boundary_samples, rng, spec.window)
        note = "window-limited" if not Q.bounded else ""
        if len(bt) == 0:
            records["iii"] = HypothesisRecord("iii", "pass", 0.0, spec.boundary_tol, None, 0, 0, "no boundary points in window")
        elif spec.boundary_mode == "strict_levelset":
            with np.errstate(invalid="ignore"):
                v = np.abs(W(bt, bx) - sup_w)
            records["iii"] = make_record("iii", np.nan_to_num(v, nan=np.inf), bt, bx, spec.boundary_tol, note=note)
        else:
            lows = np.full(len(bt), np.inf)
            n = bx.shape[1]
            for j in range(6):
                r = spec.mesh * 0.5**j
                for _ in range(8):
                    d = rng.normal(size=bx.shape)
                    d /= np.linalg.norm(d, axis=1, keepdims=True)
                    y = bx + r * rng.uniform(size=(len(bt), 1)) ** (1.0 / n) * d
                    ok = Q.contains(bt, y)
                    wy = np.where(ok, W(bt, y), np.inf)
                    lows = np.minimum(lows, wy)
            with np.errstate(invalid="ignore"):
                v = np.where(np.isfinite(lows), sup_w - lows, 0.0)
            records["iii"] = make_record("iii", v, bt, bx, spec.boundary_tol,
                                         note=("approach minima versus grid sup; " + note).strip("; "))
        # v: L >= 0 on the whole window of Omega
        in_dom = problem.domain.contains(ts, X)
        dt_, dx_ = ts[in_dom], X[in_dom]
        lmin = np.full(len(dt_), np.inf)
        larg = np.zeros(len(dt_), dtype=int)
        for j, w in enumerate(controls):
            U = np.broadcast_to(w, (len(dt_), len(w)))
            L = np.asarray(problem.running_cost(dt_, dx_, U), float) * np.ones(len(dt_))
            better = L < lmin
            lmin = np.where(better, L, lmin)
            larg = np.where(better, j, larg)
        viol = -(lmin + spec.slack(dt_))
        rec_v = make_record("v", viol, dt_, dx_, spec.hjb_tol)
        if rec_v.witness is not None:
            jw = int(np.nanargmax(viol))
            rec_v.witness["u"] = [float(v) for v in controls[larg[jw]]]
            rec_v.witness["L"] = float(lmin[jw])
        records["v"] = rec_v

    fields = {"t": q_t, "x": q_x, "residual": res_all, "excluded": excluded}
    return records, fields, q_t[~excluded], q_x[~excluded], controls


def _finish(theorem, records, extras, spec, fields, t_start) -> VerificationReport:
    extras = dict(extras)
    if spec.relaxed:
        extras["eps"] = spec.eps
        extras["g_l1"] = spec.g_l1
    return VerificationReport(
        theorem=theorem,
        hypotheses=records,
        tolerances=spec.tolerances(),
        grid=_grid_info(spec),
        seed=spec.seed,
        wall_ms=1000.0 * (time.perf_counter() - t_start),
        extras=extras,
        residuals=fields,
    )


def check_hypotheses(W: CandidateValueFunction, problem: ControlProblem, spec: HypothesisCheckSpec,
                     probe_controls=None) -> VerificationReport:
    """Audit hypotheses i-v on the grid window of ``spec``.

    ``teo2`` mode is forwarded to ``check_infinite_horizon`` (with
    ``probe_controls``); in ``corollary_eps`` mode the thresholds are
    relaxed by ``eps * g``.
    """
    if spec.theorem == "teo2":
        return check_infinite_horizon(W, problem, spec, probe_controls=probe_controls)
    t_start = time.perf_counter()
    rng = np.random.default_rng(spec.seed)
    recs, fields, q_t, q_x, controls = _grid_records(W, problem, spec, rng)
    ndj, skipped = _ndj_part(W, problem, spec, rng, q_t, q_x, controls)
    liminf = _liminf_part(W, problem, spec, rng, q_t, q_x)
    rec_i, extras = _record_i(ndj, skipped, liminf, spec)
    records = [rec_i, recs["ii"], recs["iii"], recs["iv"], recs["v"]]
    return _finish(spec.theorem, records, extras, spec, fields, t_start)


# --------------------------------------------------------------------------
# infinite horizon


def check_infinite_horizon(W: CandidateValueFunction, problem: ControlProblem, spec: HypothesisCheckSpec,
                           horizons: Sequence[float] = None, probe_controls: Sequence[PiecewiseConstantControl] = None,
                           probe_starts: int = 8, step: float = None) -> VerificationReport:
    """Finite-horizon checks on the window plus the late-time target property and a tail comparison.

    ``probe_controls`` must cover the window's time range; by default they
    are the constant controls at the extreme points of U.  A probe whose
    target distance does not decrease over the second half of the horizons
    is reported inconclusive.
    """
    if problem.horizon_mode != "infinite":
        raise PreconditionError("check_infinite_horizon needs an infinite-horizon problem")
    if spec.theorem != "teo2":
        spec = spec.replace(theorem="teo2")
    t_start = time.perf_counter()
    rng = np.random.default_rng(spec.seed)
    tlo, thi, xlo, xhi = spec.window
    recs, fields, q_t, q_x, controls = _grid_records(W, problem, spec, rng)
    ndj, skipped = _ndj_part(W, problem, spec, rng, q_t, q_x, controls)
    liminf = _liminf_part(W, problem, spec, rng, q_t, q_x)
    rec_i, extras = _record_i(ndj, skipped, liminf, spec)
    T = np.linspace(tlo, thi, 9)[1:] if horizons is None else np.asarray(horizons, dtype=float)
    if np.any(np.diff(T) <= 0):
        raise ValueError("horizons must increase")

    # (*): the target has points at arbitrarily late times
    miss = []
    for Tj in T:
        if problem.target.sampler is None:
            miss.append(math.nan)
            continue
        st, sx = problem.target.sample(16, rng, (Tj, thi, xlo, xhi))
        ok = len(st) > 0 and bool(np.any(problem.target.contains(st, sx) & (st >= Tj)))
        miss.append(0.0 if ok else 1.0)
    miss = np.nan_to_num(np.asarray(miss), nan=1.0)
    rec_star = make_record("star", miss, T, np.zeros((len(T), 1)), 0.5,
                           note="target sampled on [T, window end] for each horizon T")
    rec_star.witness = None if rec_star.verdict == "pass" else rec_star.witness

    # tail comparison along probe trajectories
    if probe_controls is None:
        probe_controls = [PiecewiseConstantControl.constant(w, tlo, thi) for w in problem.control_set.extreme_points]
    step = (thi - tlo) / 2000 if step is None else step
    starts = q_x[rng.choice(len(q_x), size=min(probe_starts, len(q_x)), replace=False)] if len(q_x) else np.empty((0, problem.dim))
    j0 = len(T) // 2
    tail_v, tail_t, tail_x = [], [], []
    inconclusive = 0
    for ctrl in probe_controls:
        for x0 in starts:
            try:
                traj = integrate(problem, ctrl, tlo, x0, T[-1], step)
            except (IntegrationBlowup, PreconditionError):
                inconclusive += 1
                continue
            if traj.times[-1] < T[-1] - 1e-12:
                inconclusive += 1
                continue
            xs = traj.state_at(T)
            d = problem.target.dist(T, xs)
            if not (d[j0] == 0 or d[-1] < d[j0]):
                inconclusive += 1
                continue
            wv = W(T, xs)
            psi = np.asarray(problem.final_cost(T, xs), float) * np.ones(len(T))
            tail_v.append(float(np.max(wv[j0:]) - np.max(psi[j0:])))
            tail_t.append(float(T[-1]))
            tail_x.append(xs[-1])
    if tail_v:
        rec_tail = make_record("tail", tail_v, tail_t, np.asarray(tail_x), spec.ndj_tol,
                               note=f"{inconclusive} probe trajectories inconclusive" if inconclusive else "")
    else:
        rec_tail = HypothesisRecord("tail", "inconclusive", 0.0, spec.ndj_tol, None, 0, inconclusive,
                                    "no probe trajectory approached the target")
    extras["tail"] = {"horizons": [float(v) for v in T], "probes": len(probe_controls) * len(starts),
                      "inconclusive": inconclusive}
    records = [rec_i, recs["ii"], recs["iii"], recs["iv"], recs["v"], rec_star, rec_tail]
    return _finish("teo2", records, extras, spec, fields, t_start)


# --------------------------------------------------------------------------
# corollary bound


@dataclass
class Certificate:
    certified: bool
    bound: Optional[float]
    text: str


def corollary_eps_bound(report: VerificationReport, eps: float, g_l1: float) -> Certificate:
    """``W <= V + eps (1 + ||g||_1)`` when every relaxed hypothesis passed."""
    if report.theorem != "corollary_eps":
        raise ValueError(f"report was produced in {report.theorem!r} mode, not corollary_eps")
    if eps < 0 or g_l1 < 0:
        raise ValueError("eps and g_l1 must be nonnegative")
    rep_eps = report.extras.get("eps")
    if rep_eps is not None and not math.isclose(rep_eps, eps, rel_tol=1e-12, abs_tol=0.0):
        raise ValueError(f"report used eps = {rep_eps}, not {eps}")
    if not report.conclusion:
        return Certificate(False, None, f"no certificate: relaxed hypotheses {', '.join(report.failed())} failed")
    bound = eps * (1.0 + g_l1)
    return Certificate(True, bound, f"W <= V + {bound:.6g} on Q (no violation of the relaxed hypotheses found "
                                    f"at this resolution)")


# --------------------------------------------------------------------------
# monotonicity along trajectories


@dataclass
class MonotoneResult:
    worst: float  # max_i phi(t_i) - phi(t_{i+1}); positive = decrease
    t: float
    times: np.ndarray
    phi: np.ndarray
    stopped: str  # tf | target | exit


def check_monotone_cost(W: CandidateValueFunction, problem: ControlProblem, control: PiecewiseConstantControl,
                        t0: float, x0, tf: float, step: float = None, hit_tol: float = DIST_TOL) -> MonotoneResult:
    """Largest drop of ``W(t, x(t)) + int_t0^t L`` between consecutive step-grid samples.

    The trajectory is followed until the target, an exit from Q, or ``tf``.
    """
    traj = integrate(problem, control, t0, x0, tf, step, target=problem.target, hit_tol=hit_tol, domain=problem.Q)
    phi = W(traj.times, traj.states) + traj.costs
    stopped = "target" if traj.hit_time is not None else ("exit" if traj.exited else "tf")
    if len(phi) < 2:
        return MonotoneResult(0.0, float(traj.times[0]), traj.times, phi, stopped)
    with np.errstate(invalid="ignore"):
        drops = phi[:-1] - phi[1:]
    drops = np.nan_to_num(drops, nan=np.inf)
    j = int(np.argmax(drops))
    return MonotoneResult(float(drops[j]), float(traj.times[j]), traj.times, phi, stopped)


# --------------------------------------------------------------------------
# crossing statistic


@dataclass
class CrossingTable:
    deltas: np.ndarray
    fractions: np.ndarray
    slope: float
    intercept: float
    r2: float
    trials: int

    def rows(self) -> list:
        return [(float(d), float(f)) for d, f in zip(self.deltas, self.fractions)]


def linear_fit(x, y):
    """Least-squares line ``y = a x + b``; returns ``(a, b, R^2)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    a, b = np.polyfit(x, y, 1)
    ss_res = float(np.sum((y - (a * x + b)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    return float(a), float(b), r2


def crossing_tube_statistic(A: RectifiableSet, problem: ControlProblem, omega, t0: float, starts, deltas,
                            duration: float, step: float = None, refinement: int = 2) -> CrossingTable:
    """Mean fraction of time each trajectory spends within ``delta`` of A.

    Trajectories run under the constant control ``omega`` from the rows of
    ``starts``; a trial that leaves the domain contributes its shorter window.
    """
    X0 = np.atleast_2d(np.asarray(starts, dtype=float))
    N, n = X0.shape
    w = np.atleast_1d(np.asarray(omega, dtype=float))
    tf = t0 + duration
    step = duration / 2000 if step is None else step
    vals = np.broadcast_to(w, (N, 1, len(w)))
    res = march(problem, [t0, tf], vals, t0, X0, tf, step, domain=problem.domain, record=True)
    K = len(res.times)
    pts = res.states.reshape(-1, n)
    tt = np.repeat(res.times, N)
    ok = np.all(np.isfinite(pts), axis=1)
    d = np.full(len(pts), np.inf)
    d[ok] = A.distance(tt[ok], pts[ok], refinement)
    d = d.reshape(K, N)
    ok = ok.reshape(K, N)
    deltas = np.asarray(deltas, dtype=float)
    counts = np.maximum(ok.sum(axis=0), 1)
    fr = np.array([float(np.mean(np.sum((d <= dl) & ok, axis=0) / counts)) for dl in deltas])
    a, b, r2 = linear_fit(deltas, fr) if len(deltas) > 1 else (math.nan, math.nan, math.nan)
    return CrossingTable(deltas, fr, a, b, r2, N)


# --------------------------------------------------------------------------
# semicontinuous envelopes


def _ball(ndim: int, radius: int = 1) -> np.ndarray:
    ax = np.arange(-radius, radius + 1)
    g = np.meshgrid(*([ax] * ndim), indexing="ij")
    return sum(a * a for a in g) <= radius * radius


def envelope(values, mode: str = "lower", radius_sequence: Sequence[float] = (1,)) -> np.ndarray:
    """Discrete lower (``mode="lower"``) or upper semicontinuous envelope of a grid field.

    On a uniform grid every radius of at least one cell contains
    neighbours, so the one-cell ball at the end of the sequence is the one
    used.  The lower envelope is the grey opening (erosion, then dilation)
    and the upper one the grey closing: both are idempotent, bracket the
    field, and are exchanged by negation.  Cells outside the grid are
    ignored (padded with +-inf).
    """
    v = np.asarray(values, dtype=float)
    radii = list(radius_sequence)
    if not radii or any(b >= a for a, b in zip(radii, radii[1:])) or radii[-1] != 1:
        raise ValueError("radius sequence must decrease and end at one cell")
    if np.isnan(v).any():
        raise ValueError("field contains NaN")
    fp = _ball(v.ndim, 1)
    if mode == "lower":
        e = ndimage.grey_erosion(v, footprint=fp, mode="constant", cval=np.inf)
        return ndimage.grey_dilation(e, footprint=fp, mode="constant", cval=-np.inf)
    if mode == "upper":
        d = ndimage.grey_dilation(v, footprint=fp, mode="constant", cval=-np.inf)
        return ndimage.grey_erosion(d, footprint=fp, mode="constant", cval=np.inf)
    raise ValueError(f"unknown envelope mode {mode!r}")


# --------------------------------------------------------------------------
# dynamic programming residuals


@dataclass
class DPPResult:
    residual: float  # W(t0, x0) - best; <= 0 is consistent with W <= V
    best: float
    control: Optional[PiecewiseConstantControl]
    searched: int
    dropped: int


def dpp_residual(W: CandidateValueFunction, problem: ControlProblem, t0: float, x0, T1: float, pieces: int = 2,
                 k: int = 2, step: float = None, hit_tol: float = DIST_TOL) -> DPPResult:
    """``W(t0, x0) - min_u [int_t0^T1 L + W(T1, x(T1))]`` over ``k^pieces`` step controls.

    Controls that reach the target (or leave the domain) before ``T1`` are
    dropped.
    """
    if T1 <= t0:
        raise PreconditionError("T1 must exceed t0")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    vals = enumerate_controls(problem, pieces, k)
    bp = np.linspace(t0, T1, pieces + 1)
    X0 = np.repeat(x0[None], len(vals), axis=0)
    step = (T1 - t0) / 400 if step is None else step
    res = march(problem, bp, vals, t0, X0, T1, step, target=problem.target, hit_tol=hit_tol, domain=problem.domain)
    keep = ~res.hit & ~res.exited & ~res.blown
    if not keep.any():
        raise PreconditionError("every searched control reaches the target before T1; use a smaller T1")
    tot = np.full(len(vals), np.inf)
    tot[keep] = res.final_costs[keep] + W(np.full(int(keep.sum()), T1), res.final_states[keep])
    j = int(np.argmin(tot))
    w0 = float(W(np.array([t0]), x0[None])[0])
    return DPPResult(w0 - float(tot[j]), float(tot[j]), PiecewiseConstantControl(bp, vals[j]), len(vals),
                     int(np.sum(~keep)))


def dp_grid_residual(problem: ControlProblem, grid: ValueGrid, k: int = 21) -> float:
    """Max over layers and nodes of ``|V_i - backup(V_{i+1})|`` for a backward-induction grid."""
    if len(grid.t_axis) < 2:
        raise ValueError("grid needs at least two time layers")
    nodes = grid.nodes()
    controls = problem.control_set.sample(k)
    worst = 0.0
    for i in range(len(grid.t_axis) - 1):
        dt = grid.t_axis[i + 1] - grid.t_axis[i]
        v, _, _ = dp_backup(problem, grid.t_axis[i], dt, grid.values[i + 1], grid.lo, grid.steps, nodes, controls)
        ti = np.full(len(nodes), grid.t_axis[i])
        inS = problem.target.contains(ti, nodes)
        if inS.any():
            v = np.where(inS, np.asarray(problem.final_cost(ti, nodes), float) * np.ones(len(nodes)), v)
        stored = grid.values[i].ravel()
        both_inf = np.isinf(v) & np.isinf(stored) & (np.sign(v) == np.sign(stored))
        with np.errstate(invalid="ignore"):
            diff = np.where(both_inf, 0.0, np.abs(v - stored))
        worst = max(worst, float(np.nanmax(diff)) if diff.size else 0.0)
    return worst


# --------------------------------------------------------------------------
# divergence probe


@dataclass
class DivergenceReport:
    budgets: list
    costs: list
    decreasing: bool
    slope: float  # cost change per unit budget between the last two budgets
    text: str


def divergence_probe(problem: ControlProblem, control_for_budget: Callable, t0: float, x0, budgets: Sequence[float],
                     step: float = 1e-2, hit_tol: float = DIST_TOL) -> DivergenceReport:
    """Costs of a family of admissible controls indexed by a budget (e.g. a dwell time).

    ``control_for_budget(B)`` returns ``(control, horizon)``.  Costs that
    keep decreasing as the budget grows are reported as "decreasing below
    every tested bound"; no finite computation certifies an infinite value.
    """
    costs = []
    for B in budgets:
        control, horizon = control_for_budget(B)
        traj = integrate(problem, control, t0, x0, t0 + horizon, step, target=problem.target, hit_tol=hit_tol,
                         domain=problem.domain)
        if traj.hit_time is None:
            costs.append(math.inf)
            continue
        psi = float(np.asarray(problem.final_cost(traj.times[-1:], traj.states[-1:]), float).ravel()[0])
        costs.append(float(traj.costs[-1]) + psi)
    c = np.asarray(costs)
    decreasing = bool(len(c) > 1 and np.all(np.isfinite(c)) and np.all(np.diff(c) < 0))
    slope = float((c[-1] - c[-2]) / (budgets[-1] - budgets[-2])) if len(c) > 1 and np.all(np.isfinite(c[-2:])) else math.nan
    if decreasing:
        text = (f"cost decreases with every budget; {c[-1]:.6g} at budget {budgets[-1]:g} "
                f"(slope {slope:.4g} per unit): unbounded below at the tested budgets")
    else:
        text = "no sustained decrease observed"
    return DivergenceReport([float(b) for b in budgets], costs, decreasing, slope, text)
