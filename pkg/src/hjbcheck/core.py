"""Domain types shared by the integrator, the value estimators and the verifier.

Every callable attached to a problem follows one broadcasting convention:
``t`` is a scalar or an array of shape ``(N,)``, ``x`` has shape ``(..., n)``
and ``u`` has shape ``(..., q)``.  Dynamics return ``(..., n)``, costs and
distances return ``(...)``.  Gallery problems are written against this
convention so that grids and batches of trajectories evaluate in one call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

DIST_TOL = 1e-9
GRAD_TOL = 1e-4
H_GRAD = 1e-5


class OutOfDomainError(ValueError):
    """A control was evaluated outside ``(t0, tm]``."""


class AssumptionProbeError(RuntimeError):
    def __init__(self, message: str, point):
        super().__init__(f"{message} at point {point}")
        self.point = point


def as_points(t, x, dim: int):
    """Normalise ``(t, x)`` into arrays of shape ``(N,)`` and ``(N, dim)``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = x.reshape(-1, dim)
    t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],)).copy()
    return t, x, single


# --------------------------------------------------------------------------
# sets


@dataclass(frozen=True)
class SetSpec:
    """A set in time-state space accessed through membership, distance and sampling.

    ``distance`` is 0 on the set and positive off it.  ``crossing`` is an
    optional continuous function whose sign change along a path marks a
    crossing of a thin (codimension one) part of the set that membership
    tests would never see exactly.  ``sampler(n, rng, window)`` returns
    ``(t, x)`` arrays of points of the set (targets) or of its boundary
    (domains) inside ``window = (tlo, thi, xlo, xhi)``.
    """

    membership: Callable
    distance: Callable
    sampler: Optional[Callable] = None
    crossing: Optional[Callable] = None
    nearest: Optional[Callable] = None
    name: str = ""
    bounded: bool = False

    def contains(self, t, x):
        return np.asarray(self.membership(t, x), dtype=bool)

    def dist(self, t, x):
        return np.asarray(self.distance(t, x), dtype=float)

    def sample(self, n: int, rng: np.random.Generator, window):
        if self.sampler is None:
            raise ValueError(f"set {self.name!r} has no sampler")
        return self.sampler(n, rng, window)


def whole_space(name: str = "R x R^n") -> SetSpec:
    def member(t, x):
        return np.ones(np.shape(x)[:-1], dtype=bool)

    def dist(t, x):
        return np.zeros(np.shape(x)[:-1])

    def boundary(n, rng, window):
        return np.empty(0), np.empty((0, len(window[2])))

    return SetSpec(member, dist, boundary, name=name)


def state_slab(lo, hi, name: str = "") -> SetSpec:
    """The open set ``R x {lo < x < hi}`` with its boundary sampler."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)

    def member(t, x):
        x = np.asarray(x, dtype=float)
        return np.all((x > lo) & (x < hi), axis=-1)

    def dist(t, x):
        x = np.asarray(x, dtype=float)
        out = np.maximum(lo - x, x - hi)
        outside = np.linalg.norm(np.maximum(out, 0.0), axis=-1)
        return np.where(np.all(out < 0, axis=-1), 0.0, outside)

    def boundary(n, rng, window):
        tlo, thi, xlo, xhi = window
        dim = lo.size
        t = rng.uniform(tlo, thi, n)
        x = rng.uniform(np.maximum(lo, xlo), np.minimum(hi, xhi), (n, dim))
        face = rng.integers(0, dim, n)
        side = rng.integers(0, 2, n)
        x[np.arange(n), face] = np.where(side == 0, lo[face], hi[face])
        return t, x

    return SetSpec(member, dist, boundary, name=name or f"slab {lo}..{hi}")


def state_point_target(center, tol: float = DIST_TOL, name: str = "") -> SetSpec:
    """``R x {center}``: the state must reach a point, at any time."""
    center = np.asarray(center, dtype=float)

    def dist(t, x):
        return np.linalg.norm(np.asarray(x, dtype=float) - center, axis=-1)

    def member(t, x):
        return dist(t, x) <= tol

    def sample(n, rng, window):
        tlo, thi = window[0], window[1]
        return rng.uniform(tlo, thi, n), np.tile(center, (n, 1))

    def nearest(t, x):
        return t, np.broadcast_to(center, np.shape(x)).copy()

    return SetSpec(member, dist, sample, nearest=nearest, name=name or f"R x {{{center.tolist()}}}")


@dataclass(frozen=True)
class ControlSetSpec:
    """A control set U touched only through samples.

    ``lattice(k)`` returns ``k`` points covering U; ``extreme_points`` are
    appended to every sample.  ``lower``/``upper`` describe a box hull when
    U is an interval or box, used for clipping perturbed controls.
    """

    dimension: int
    lattice: Callable[[int], np.ndarray]
    extreme_points: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def sample(self, k: int) -> np.ndarray:
        pts = np.asarray(self.lattice(k), dtype=float).reshape(-1, self.dimension)
        if self.extreme_points is not None:
            ext = np.asarray(self.extreme_points, dtype=float).reshape(-1, self.dimension)
            pts = np.vstack([pts, ext])
        # stable dedup, keeps lattice order
        _, idx = np.unique(np.round(pts, 14), axis=0, return_index=True)
        return pts[np.sort(idx)]

    def contains(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float).reshape(-1, self.dimension)
        if self.lower is None:
            return np.ones(u.shape[0], dtype=bool)
        return np.all((u >= self.lower - 1e-12) & (u <= self.upper + 1e-12), axis=1)

    def clip(self, u) -> np.ndarray:
        if self.lower is None:
            return np.asarray(u, dtype=float)
        return np.clip(u, self.lower, self.upper)

    def project(self, u, k: int = 2001) -> np.ndarray:
        """Nearest sampled control point to each row of ``u``."""
        pts = self.sample(k)
        u = np.asarray(u, dtype=float).reshape(-1, self.dimension)
        _, idx = cKDTree(pts).query(u)
        return pts[idx]


def interval_controls(lo: float, hi: float, extremes: bool = True) -> ControlSetSpec:
    def lattice(k):
        if k <= 1:
            return np.array([[0.5 * (lo + hi)]])
        return np.linspace(lo, hi, k)[:, None]

    ext = np.array([[lo], [hi]]) if extremes else None
    return ControlSetSpec(1, lattice, ext, np.array([lo], float), np.array([hi], float))


# --------------------------------------------------------------------------
# problem


@dataclass(frozen=True)
class ControlProblem:
    dim: int
    dynamics: Callable
    running_cost: Callable
    final_cost: Callable
    target: SetSpec
    domain: SetSpec
    control_set: ControlSetSpec
    verification_domain: Optional[SetSpec] = None  # None means Q = Omega
    control_norm_exponent: float = 1.0
    horizon_mode: str = "finite"
    target_neighborhood: Optional[SetSpec] = None
    name: str = ""

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.control_norm_exponent < 1:
            raise ValueError("control_norm_exponent must be >= 1")
        if self.horizon_mode not in ("finite", "infinite"):
            raise ValueError(f"unknown horizon mode {self.horizon_mode!r}")
        if self.horizon_mode == "infinite" and self.target_neighborhood is None:
            raise ValueError("infinite-horizon problems need a target neighborhood")

    @property
    def q_is_omega(self) -> bool:
        return self.verification_domain is None

    @property
    def Q(self) -> SetSpec:
        return self.domain if self.verification_domain is None else self.verification_domain

    @property
    def control_dim(self) -> int:
        return self.control_set.dimension

    def consistency_report(self, window, n: int = 2000, seed: int = 0) -> dict:
        """Sampled check of S ⊆ Q ⊆ Ω (and S ⊆ S1 ⊆ Q in infinite mode)."""
        rng = np.random.default_rng(seed)
        out = {}
        if self.target.sampler is not None:
            t, x = self.target.sample(n, rng, window)
            out["target_in_Q"] = bool(np.all(self.Q.contains(t, x) | (self.Q.dist(t, x) <= DIST_TOL))) if len(t) else True
            out["target_in_domain"] = bool(np.all(self.domain.contains(t, x))) if len(t) else True
            if self.target_neighborhood is not None and len(t):
                out["target_in_S1"] = bool(np.all(self.target_neighborhood.contains(t, x)))
        return out


# --------------------------------------------------------------------------
# controls and trajectories


@dataclass(frozen=True)
class PiecewiseConstantControl:
    """Left-continuous step control: ``values[i]`` is active on ``(t_i, t_{i+1}]``."""

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float).ravel()
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if bp.size < 2 or np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing with at least two entries")
        if vals.shape[0] != bp.size - 1:
            raise ValueError("need exactly one value per interval")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, value, t0: float, tf: float) -> "PiecewiseConstantControl":
        return cls(np.array([t0, tf]), np.atleast_1d(np.asarray(value, dtype=float))[None, :])

    @classmethod
    def equal_pieces(cls, values, t0: float, tf: float) -> "PiecewiseConstantControl":
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        return cls(np.linspace(t0, tf, values.shape[0] + 1), values)

    @property
    def t0(self) -> float:
        return float(self.breakpoints[0])

    @property
    def tf(self) -> float:
        return float(self.breakpoints[-1])

    def __call__(self, t):
        return eval_control(self, t)

    def refine(self, t: float) -> "PiecewiseConstantControl":
        """Insert a breakpoint without changing any evaluation."""
        if t <= self.t0 or t >= self.tf or t in self.breakpoints:
            return self
        i = int(np.searchsorted(self.breakpoints, t))
        bp = np.insert(self.breakpoints, i, t)
        vals = np.insert(self.values, i - 1, self.values[i - 1], axis=0)
        return PiecewiseConstantControl(bp, vals)

    def restrict(self, t0: float, tf: float) -> "PiecewiseConstantControl":
        inner = self.breakpoints[(self.breakpoints > t0) & (self.breakpoints < tf)]
        bp = np.concatenate([[t0], inner, [tf]])
        mids = 0.5 * (bp[:-1] + bp[1:])
        return PiecewiseConstantControl(bp, self(mids))


def eval_control(control: PiecewiseConstantControl, t):
    """Value of a left-continuous step control; vectorised over ``t``."""
    ts = np.asarray(t, dtype=float)
    bp = control.breakpoints
    if np.any(ts <= bp[0]) or np.any(ts > bp[-1]):
        raise OutOfDomainError(f"t={t} outside ({bp[0]}, {bp[-1]}]")
    idx = np.searchsorted(bp, ts, side="left") - 1
    out = control.values[idx]
    return out


@dataclass(frozen=True)
class Trajectory:
    """Sampled trajectory with Hermite interpolation between samples.

    ``rates`` has shape ``(K-1, 2, n)``: the velocity at both ends of each
    step under that step's control (used by the cubic interpolant).
    ``costs`` is the running-cost integral from ``times[0]``.
    """

    times: np.ndarray
    states: np.ndarray
    control: Optional[PiecewiseConstantControl] = None
    costs: Optional[np.ndarray] = None
    rates: Optional[np.ndarray] = None
    exited: bool = False
    exit_time: Optional[float] = None
    hit_time: Optional[float] = None

    def __post_init__(self):
        if len(self.times) < 1 or len(self.times) != len(self.states):
            raise ValueError("times and states must have equal positive length")

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def state_at(self, t):
        """State at time(s) ``t``; exact at the stored sample times."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        ts, xs = self.times, self.states
        if len(ts) == 1:
            return np.repeat(xs[:1], len(t), axis=0)
        i = np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(ts) - 2)
        h = ts[i + 1] - ts[i]
        s = ((t - ts[i]) / h)[:, None]
        x0, x1 = xs[i], xs[i + 1]
        if self.rates is None:
            out = x0 + s * (x1 - x0)
        else:
            # rates[i] = velocities at both ends of step i under that step's control
            m0, m1 = self.rates[i, 0] * h[:, None], self.rates[i, 1] * h[:, None]
            s2, s3 = s * s, s * s * s
            out = (2 * s3 - 3 * s2 + 1) * x0 + (s3 - 2 * s2 + s) * m0 + (-2 * s3 + 3 * s2) * x1 + (s3 - s2) * m1
        exact = np.isin(t, ts)
        if exact.any():
            out[exact] = xs[np.searchsorted(ts, t[exact])]
        return out

    def to_csv(self, path) -> None:
        """Write ``t, x1..xn, u1..uq`` rows (control left-continuous, first row uses the first piece)."""
        n = self.states.shape[1]
        cols = [self.times[:, None], self.states]
        header = ["t"] + [f"x{i + 1}" for i in range(n)]
        if self.control is not None:
            tt = np.clip(self.times, np.nextafter(self.control.t0, np.inf), self.control.tf)
            u = self.control(tt)
            cols.append(u)
            header += [f"u{i + 1}" for i in range(u.shape[1])]
        np.savetxt(path, np.hstack(cols), delimiter=",", header=",".join(header), comments="", fmt="%.17g")


# --------------------------------------------------------------------------
# candidate value functions and exceptional sets


@dataclass(frozen=True)
class ManifoldPiece:
    """One connected C1 piece of an exceptional set.

    ``embed`` maps parameters ``(N, k)`` in the box ``[lower, upper]`` to
    points ``(N, 1 + n)`` in time-state space.  When ``time_range`` is set
    the piece is a cylinder ``[tlo, thi] x M``: ``embed`` then returns state
    points ``(N, n)`` only and time is handled exactly.  ``halo`` widens the
    piece to cover a truncated remainder of the true set.
    """

    lower: Sequence[float]
    upper: Sequence[float]
    embed: Callable[[np.ndarray], np.ndarray]
    ambient_dim: int  # n + 1
    time_range: Optional[tuple] = None
    halo: float = 0.0
    base_count: int = 64
    name: str = ""

    def __post_init__(self):
        k = len(self.lower) + (1 if self.time_range is not None else 0)
        if not k < self.ambient_dim:
            raise ValueError(f"piece {self.name!r} has no positive codimension (k={k}, n+1={self.ambient_dim})")

    @property
    def param_dim(self) -> int:
        return len(self.lower)

    def samples(self, refinement: int):
        """Embedded sample cloud and its mesh (bound on distance from any piece point to the cloud, doubled)."""
        count = self.base_count * 2**refinement + 1
        axes = [np.linspace(lo, hi, count) for lo, hi in zip(self.lower, self.upper)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        shape = grid.shape[:-1]
        pts = np.asarray(self.embed(grid.reshape(-1, self.param_dim)), dtype=float)
        cloud = pts.reshape(*shape, pts.shape[-1])
        chord2 = 0.0
        for ax in range(self.param_dim):
            d = np.diff(cloud, axis=ax)
            chord2 += float(np.max(np.sum(d * d, axis=-1)))
        mesh = 1.1 * math.sqrt(chord2)
        return pts, mesh


@dataclass(frozen=True)
class RectifiableSet:
    """Finite union of manifold pieces; the null part is empty by construction."""

    pieces: tuple = ()
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def _tree(self, i: int, refinement: int):
        key = (i, refinement)
        if key not in self._cache:
            pts, mesh = self.pieces[i].samples(refinement)
            self._cache[key] = (cKDTree(pts), mesh)
        return self._cache[key]

    def mesh(self, refinement: int) -> float:
        if not self.pieces:
            return 0.0
        return max(self._tree(i, refinement)[1] for i in range(len(self.pieces)))

    def _raw_lower(self, t, x, refinement):
        out = np.full(len(t), np.inf)
        for i, piece in enumerate(self.pieces):
            tree, mesh = self._tree(i, refinement)
            if piece.time_range is None:
                d, _ = tree.query(np.column_stack([t, x]))
                lb = np.maximum(d - 0.5 * mesh, 0.0)
            else:
                d, _ = tree.query(x)
                tlo, thi = piece.time_range
                gap = np.maximum(np.maximum(tlo - t, t - thi), 0.0)
                lb = np.hypot(np.maximum(d - 0.5 * mesh, 0.0), gap)
            out = np.minimum(out, np.maximum(lb - piece.halo, 0.0))
        return out

    def distance(self, t, x, refinement: int = 2):
        """Lower bound on the distance from ``(t, x)`` to the set.

        The bound is the best over refinement levels ``0..refinement`` so it
        never decreases as ``refinement`` grows, and it is within ``mesh``
        of the true distance (for pieces without a halo).
        """
        if refinement < 0:
            raise ValueError("refinement must be >= 0")
        dim = self.pieces[0].ambient_dim - 1 if self.pieces else np.shape(x)[-1]
        t, x, single = as_points(t, x, dim)
        if not self.pieces:
            out = np.full(len(t), np.inf)
        else:
            out = self._raw_lower(t, x, 0)
            for r in range(1, refinement + 1):
                out = np.maximum(out, self._raw_lower(t, x, r))
        return float(out[0]) if single else out

    def sample_points(self, n_per_piece: int, rng: np.random.Generator):
        """Random points on the pieces, as ``(t, x)`` arrays."""
        ts, xs = [], []
        for piece in self.pieces:
            p = rng.uniform(piece.lower, piece.upper, (n_per_piece, piece.param_dim))
            e = np.asarray(piece.embed(p), dtype=float)
            if piece.time_range is None:
                ts.append(e[:, 0])
                xs.append(e[:, 1:])
            else:
                ts.append(rng.uniform(*piece.time_range, n_per_piece))
                xs.append(e)
        if not ts:
            return np.empty(0), np.empty((0, 0))
        return np.concatenate(ts), np.vstack(xs)


def distance_to_exceptional(A: RectifiableSet, point, refinement: int = 2) -> float:
    t, x = point
    return A.distance(t, np.atleast_1d(np.asarray(x, dtype=float)), refinement)


@dataclass(frozen=True)
class CandidateValueFunction:
    """Candidate W on the closure of Q, possibly +inf, with optional analytic gradient."""

    value: Callable
    exceptional_set: RectifiableSet = field(default_factory=RectifiableSet)
    gradient: Optional[Callable] = None
    h_grad: float = H_GRAD
    name: str = ""

    def __call__(self, t, x):
        return np.asarray(self.value(t, x), dtype=float)

    def fd_gradient(self, t, x):
        """Central differences with step ``h_grad * max(1, |coordinate|)``."""
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        ht = self.h_grad * np.maximum(1.0, np.abs(t))
        ws = (self.value(t + ht, x) - self.value(t - ht, x)) / (2 * ht)
        wy = np.empty_like(x)
        for i in range(x.shape[-1]):
            hi = self.h_grad * np.maximum(1.0, np.abs(x[..., i]))
            e = np.zeros(x.shape[-1])
            e[i] = 1.0
            xp = x + hi[..., None] * e
            xm = x - hi[..., None] * e
            wy[..., i] = (self.value(t, xp) - self.value(t, xm)) / (2 * hi)
        return ws, wy

    def grad(self, t, x):
        if self.gradient is not None:
            ws, wy = self.gradient(t, x)
            return np.asarray(ws, dtype=float), np.asarray(wy, dtype=float)
        return self.fd_gradient(t, x)


# --------------------------------------------------------------------------
# reports


@dataclass
class HypothesisRecord:
    id: str
    verdict: str  # pass | fail | skipped
    worst_violation: float = 0.0
    tolerance: float = 0.0
    witness: Optional[dict] = None
    points_checked: int = 0
    points_excluded: int = 0
    note: str = ""

    def to_dict(self) -> dict:
        wv = self.worst_violation
        return {
            "id": self.id,
            "verdict": self.verdict,
            "worst_violation": None if wv is None or not math.isfinite(wv) else float(wv),
            "tolerance": float(self.tolerance),
            "witness": self.witness,
            "points_checked": int(self.points_checked),
            "points_excluded": int(self.points_excluded),
            "note": self.note,
        }


def make_record(hid: str, violations, points_t, points_x, tol: float, excluded: int = 0, note: str = "") -> HypothesisRecord:
    """Build a record from per-point violation amounts (positive = bad)."""
    violations = np.asarray(violations, dtype=float)
    if violations.size == 0:
        return HypothesisRecord(hid, "pass", 0.0, tol, None, 0, excluded, note or "no points checked")
    j = int(np.nanargmax(violations))
    worst = float(violations[j])
    witness = {"t": float(points_t[j]), "x": [float(v) for v in np.atleast_1d(points_x[j])]}
    verdict = "fail" if worst > tol else "pass"
    if verdict == "pass" and not note:
        note = "no violation found at this resolution"
    return HypothesisRecord(hid, verdict, worst, tol, witness, int(violations.size), excluded, note)


@dataclass
class VerificationReport:
    theorem: str
    hypotheses: list
    tolerances: dict
    grid: dict
    seed: int = 0
    wall_ms: float = 0.0
    extras: dict = field(default_factory=dict)
    residuals: Optional[dict] = field(default=None, repr=False)  # per-point fields, not serialized

    @property
    def conclusion(self) -> bool:
        return all(h.verdict == "pass" for h in self.hypotheses if h.verdict != "skipped")

    def record(self, hid: str) -> HypothesisRecord:
        for h in self.hypotheses:
            if h.id == hid:
                return h
        raise KeyError(hid)

    def verdicts(self) -> dict:
        return {h.id: h.verdict for h in self.hypotheses}

    def failed(self) -> list:
        return [h.id for h in self.hypotheses if h.verdict == "fail"]

    def to_dict(self) -> dict:
        return {
            "theorem": self.theorem,
            "conclusion": "pass" if self.conclusion else "fail",
            "hypotheses": [h.to_dict() for h in self.hypotheses],
            "global": {
                "tolerances": self.tolerances,
                "grid": self.grid,
                "seed": self.seed,
                "wall_ms": round(self.wall_ms, 3),
            },
            "extras": self.extras,
        }


# --------------------------------------------------------------------------
# assumption probing


@dataclass
class ProbeReport:
    growth_constant: float  # L_K in |f| <= L_K (phi1 + |u|^p)
    one_sided_lipschitz: float  # sup (f(x)-f(y)).(x-y)/|x-y|^2
    modulus_samples: np.ndarray  # rows (|x-y|, |f(x)-f(y)|)
    cost_constant: float  # C_R in |L| <= C_R (phi2 + |u|^p)
    points: int

    def as_dict(self) -> dict:
        return {
            "L_K": self.growth_constant,
            "one_sided_lipschitz": self.one_sided_lipschitz,
            "C_R": self.cost_constant,
            "points": self.points,
            "max_modulus_ratio": float(np.max(self.modulus_samples[:, 1] / np.maximum(self.modulus_samples[:, 0], 1e-300)))
            if len(self.modulus_samples)
            else 0.0,
        }


def assumption_probe(problem: ControlProblem, sample_budget: int, region, seed: int = 0, k: int = 21,
                     phi1: Callable = None, phi2: Callable = None) -> ProbeReport:
    """Observed worst ratios for the growth and continuity bounds on f and L.

    ``region = (tlo, thi, xlo, xhi)``.  Samples are the region's corners and
    a tensor lattice of control samples, plus random points up to the budget.
    Nothing is proved; the constants are the largest ratios seen.
    """
    if sample_budget < 1:
        raise ValueError("sample_budget must be >= 1")
    rng = np.random.default_rng(seed)
    tlo, thi, xlo, xhi = region
    xlo = np.atleast_1d(np.asarray(xlo, float))
    xhi = np.atleast_1d(np.asarray(xhi, float))
    n = problem.dim
    corners = np.array(np.meshgrid(*[[a, b] for a, b in zip(xlo, xhi)], indexing="ij")).reshape(n, -1).T
    m = max(sample_budget - len(corners), 0)
    xs = np.vstack([corners, rng.uniform(xlo, xhi, (m, n))])
    ts = np.concatenate([np.full(len(corners), tlo), rng.uniform(tlo, thi, m)])
    ys = np.clip(xs + rng.normal(scale=0.05 * (xhi - xlo), size=xs.shape), xlo, xhi)
    controls = problem.control_set.sample(k)
    ui = rng.integers(0, len(controls), len(xs))
    ui[: len(corners)] = np.argmin(np.linalg.norm(controls, axis=1))
    us = controls[ui]
    p = problem.control_norm_exponent
    phi1 = phi1 or (lambda t: np.ones_like(t))
    phi2 = phi2 or (lambda t: np.ones_like(t))
    with np.errstate(all="ignore"):
        fx = np.asarray(problem.dynamics(ts, xs, us), float)
        fy = np.asarray(problem.dynamics(ts, ys, us), float)
        lx = np.asarray(problem.running_cost(ts, xs, us), float) * np.ones(len(xs))
    for arr, what in ((fx, "dynamics"), (fy, "dynamics"), (lx, "running cost")):
        bad = ~np.isfinite(arr.reshape(len(xs), -1)).all(axis=1)
        if bad.any():
            j = int(np.argmax(bad))
            raise AssumptionProbeError(f"{what} evaluation failed", (float(ts[j]), xs[j].tolist(), us[j].tolist()))
    unorm = np.linalg.norm(us, axis=1) ** p
    growth = float(np.max(np.linalg.norm(fx, axis=1) / (phi1(ts) + unorm)))
    dxy = xs - ys
    nd = np.sum(dxy * dxy, axis=1)
    ok = nd > 0
    osl = float(np.max(np.sum((fx - fy) * dxy, axis=1)[ok] / nd[ok])) if ok.any() else 0.0
    modulus = np.column_stack([np.sqrt(nd), np.linalg.norm(fx - fy, axis=1)])
    cost_c = float(np.max(np.abs(lx) / (phi2(ts) + unorm)))
    return ProbeReport(growth, max(osl, 0.0), modulus, cost_c, len(xs))
