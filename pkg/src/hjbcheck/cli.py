"""Command-line front end: ``hjbcheck verify | value | compare``.

Exit codes: 0 pass, 2 a hypothesis (or comparison) fails, 1 execution
error, 64 usage error or unknown problem, 65 brute-force size guard,
74 output directory not writable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .config import DEFAULTS, defaults_text, load_config
from .core import DIST_TOL, GRAD_TOL
from .gallery import GALLERY, UnknownProblem, decay_probe_controls, loitering_control
from .integrate import PreconditionError
from .value import (
    MAX_ENUMERATION,
    MAX_PIECES,
    BruteForceTooLarge,
    brute_force_value,
    dp_min_time,
    dp_value_grid,
    truncated_infinite_cost,
    value_from_synthesis,
)
from .verify import HypothesisCheckSpec, check_hypotheses, corollary_eps_bound, divergence_probe

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FAIL = 2
EXIT_USAGE = 64
EXIT_GUARD = 65
EXIT_IO = 74

THEOREM_FLAGS = {"teo1": "teo1", "teo2": "teo2", "eps": "corollary_eps"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run config; flags win over its keys")
    common.add_argument("--problem", help="gallery entry: " + " | ".join(GALLERY))
    common.add_argument("--seed", type=int)
    common.add_argument("--out", metavar="DIR", help="output directory (default: current directory)")

    checks = argparse.ArgumentParser(add_help=False)
    checks.add_argument("--theorem", choices=sorted(THEOREM_FLAGS))
    checks.add_argument("--eps", type=float)
    checks.add_argument("--g-l1", dest="g_l1", type=float)
    checks.add_argument("--grid", nargs="+", type=float, metavar="V",
                        help="tmin tmax xmin... xmax...")
    checks.add_argument("--mesh", type=float)
    checks.add_argument("--tol-hjb", dest="tol_hjb", type=float)
    checks.add_argument("--tol-target", dest="tol_target", type=float)
    checks.add_argument("--boundary-mode", dest="boundary_mode", choices=("strict_levelset", "remark_liminf"))

    parser = _Parser(prog="hjbcheck", description="Audit verification-theorem hypotheses on gallery problems.")
    parser.add_argument("--print-defaults", action="store_true", help="print the numeric defaults table and exit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    sub.add_parser("verify", parents=[common, checks], help="check the hypotheses; writes report.json and residuals.csv")

    p = sub.add_parser("value", parents=[common], help="estimate the value function")
    p.add_argument("--method", choices=("brute", "dp", "synthesis"))
    p.add_argument("--start", nargs="+", type=float, metavar="V", help="x... or t x...")
    p.add_argument("--pieces", type=int)
    p.add_argument("--samples", type=int, help="control samples per piece (brute force) or per node (dp)")
    p.add_argument("--horizon", type=float, help="absolute end time of brute-force controls")
    p.add_argument("--mesh", type=float, help="dp state spacing")

    p = sub.add_parser("compare", parents=[common], help="compare W against value estimates")
    p.add_argument("--points", type=int)
    return parser


# --------------------------------------------------------------------------
# shared plumbing


def resolve(args: argparse.Namespace) -> dict:
    """Merge the config file under the flags."""
    opts = {}
    if getattr(args, "config", None):
        try:
            opts = load_config(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
        except ValueError as exc:  # TOML syntax errors included
            raise UsageError(f"bad config: {exc}") from exc
    for key, val in vars(args).items():
        if key in ("config", "command", "print_defaults"):
            continue
        if val is not None or key not in opts:
            opts[key] = val
    opts.setdefault("params", {})
    return opts


def load_entry(opts: dict):
    name = opts.get("problem")
    if not name:
        raise UsageError("--problem is required")
    if name not in GALLERY:
        raise UnknownProblem(name)
    try:
        return GALLERY[name](**opts["params"])
    except TypeError as exc:
        raise UsageError(f"bad [params] for {name}: {exc}") from exc


def ensure_writable(out) -> str:
    out = out or "."
    os.makedirs(out, exist_ok=True)
    probe = os.path.join(out, ".hjbcheck-write-test")
    with open(probe, "w"):
        pass
    os.remove(probe)
    return out


def jsonable(obj):
    """Numpy-free, strictly valid JSON: non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def _dump(obj) -> str:
    return json.dumps(jsonable(obj), indent=2)


def parse_start(entry, start):
    """``x`` (time = window start) or ``t x``."""
    n = entry.problem.dim
    start = list(start)
    if len(start) == n:
        return float(entry.window[0]), np.array(start, dtype=float)
    if len(start) == n + 1:
        return float(start[0]), np.array(start[1:], dtype=float)
    raise UsageError(f"--start needs {n} or {n + 1} numbers for {entry.name}")


def parse_grid(entry, grid):
    n = entry.problem.dim
    if len(grid) != 2 + 2 * n:
        raise UsageError(f"--grid needs 2 + 2*{n} numbers for {entry.name}")
    return (float(grid[0]), float(grid[1]), np.array(grid[2:2 + n], float), np.array(grid[2 + n:], float))


# --------------------------------------------------------------------------
# verify


def gradient_check(W, window, mesh, rng, grad_tol=GRAD_TOL, n=200):
    """Analytic against central-difference gradients at random points away from A."""
    if W.gradient is None:
        return None
    tlo, thi, xlo, xhi = window
    ts = rng.uniform(tlo, thi, n)
    X = rng.uniform(xlo, xhi, (n, len(xlo)))
    if W.exceptional_set.pieces:
        keep = W.exceptional_set.distance(ts, X) > 2 * mesh
        ts, X = ts[keep], X[keep]
    if len(ts) == 0:
        return None
    ga_t, ga_x = W.gradient(ts, X)
    gf_t, gf_x = W.fd_gradient(ts, X)
    ga = np.column_stack([np.broadcast_to(ga_t, ts.shape), ga_x])
    gf = np.column_stack([np.broadcast_to(gf_t, ts.shape), gf_x])
    ok = np.all(np.isfinite(ga), axis=1) & np.all(np.isfinite(gf), axis=1)
    if not ok.any():
        return None
    rel = np.max(np.abs(ga[ok] - gf[ok]), axis=1) / np.maximum(1.0, np.max(np.abs(ga[ok]), axis=1))
    worst = float(np.max(rel))
    return {"points": int(ok.sum()), "worst_relative": worst, "grad_tol": grad_tol, "consistent": worst <= grad_tol}


def build_check(entry, opts):
    theorem = THEOREM_FLAGS[opts["theorem"]] if opts.get("theorem") else entry.theorem
    if theorem == "teo2" and entry.problem.horizon_mode != "infinite":
        raise UsageError(f"{entry.name} is not an infinite-horizon problem")
    if theorem == "teo1" and entry.problem.horizon_mode == "infinite":
        raise UsageError(f"{entry.name} is an infinite-horizon problem; use --theorem teo2")
    window = parse_grid(entry, opts["grid"]) if opts.get("grid") else entry.window
    eps = opts.get("eps")
    g_l1 = opts.get("g_l1")
    if theorem == "corollary_eps":
        eps = 0.0 if eps is None else eps
        g_l1 = float(window[1] - window[0]) if g_l1 is None else g_l1  # g = 1 on the window
    elif eps:
        raise UsageError("--eps needs --theorem eps")
    return HypothesisCheckSpec.for_entry(
        entry,
        window=window,
        theorem=theorem,
        mesh=opts.get("mesh"),
        hjb_tol=opts.get("tol_hjb"),
        target_tol=opts.get("tol_target"),
        boundary_mode=opts.get("boundary_mode"),
        seed=opts.get("seed"),
        eps=eps,
        g_l1=g_l1,
    )


def write_residuals(path, fields) -> None:
    t, X = fields["t"], fields["x"]
    n = X.shape[1]
    data = np.column_stack([t, X, fields["residual"], fields["excluded"].astype(float)])
    header = ",".join(["t"] + [f"x{i + 1}" for i in range(n)] + ["residual", "excluded"])
    fmt = ["%.17g"] * (n + 2) + ["%d"]
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt=fmt)


def run_verify(opts) -> int:
    entry = load_entry(opts)
    spec = build_check(entry, opts)
    out = ensure_writable(opts.get("out"))
    W = entry.candidate
    if opts.get("h_grad"):
        W = dataclasses.replace(W, h_grad=float(opts["h_grad"]))
    probes = None
    if spec.theorem == "teo2" and "probes" in entry.extras:
        probes = entry.extras["probes"](spec.window[0], spec.window[1])
    report = check_hypotheses(W, entry.problem, spec, probe_controls=probes)
    doc = {"problem": entry.name, "candidate": W.name}
    doc.update(report.to_dict())
    doc["global"]["dist_tol"] = float(opts.get("dist_tol") or DIST_TOL)
    grad = gradient_check(W, spec.window, spec.mesh, np.random.default_rng(spec.seed),
                          float(opts.get("grad_tol") or GRAD_TOL))
    if grad is not None:
        doc["extras"]["gradient_check"] = grad
    if spec.relaxed:
        cert = corollary_eps_bound(report, spec.eps, spec.g_l1)
        doc["certificate"] = {"certified": cert.certified, "bound": cert.bound, "text": cert.text}
    with open(os.path.join(out, "report.json"), "w") as fh:
        fh.write(_dump(doc) + "\n")
    write_residuals(os.path.join(out, "residuals.csv"), report.residuals)
    print(_dump({"problem": entry.name, "theorem": report.theorem, "conclusion": doc["conclusion"],
                 "verdicts": report.verdicts(), "report": os.path.join(out, "report.json")}))
    return EXIT_OK if report.conclusion else EXIT_FAIL


# --------------------------------------------------------------------------
# value


def _hit_tol(entry, opts) -> float:
    return float(opts["dist_tol"]) if opts.get("dist_tol") else entry.hit_tol


def dp_grid_for(entry, dx=None, k=None):
    """The entry's dynamic-programming grid, or None when it has no dp settings."""
    cfg = entry.extras.get("dp")
    if cfg is None:
        return None
    dx = cfg["dx"] if dx is None else dx
    if "t_range" in cfg:
        return dp_value_grid(entry.problem, cfg["t_range"], cfg["dt"], cfg["lo"], cfg["hi"], dx,
                             k=cfg.get("k", 21) if k is None else k)
    return dp_min_time(entry.problem, cfg["lo"], cfg["hi"], dx, cfg["dt"], k=cfg.get("k", 2) if k is None else k,
                       foot=cfg.get("foot", "euler"), substeps=cfg.get("substeps", 1))


def run_value(opts) -> int:
    entry = load_entry(opts)
    method = opts.get("method") or "brute"
    doc = {"problem": entry.name, "method": method}
    if method == "brute":
        pieces = opts.get("pieces") or entry.brute.get("pieces", 2)
        k = opts.get("samples") or entry.brute.get("k", 2)
        if pieces > MAX_PIECES or k**pieces > MAX_ENUMERATION:
            err = BruteForceTooLarge(pieces, k)
            print(_dump({"error": "brute-force size guard", "pieces": pieces, "k": k, "size": err.size,
                         "max_pieces": MAX_PIECES, "max_enumeration": MAX_ENUMERATION}))
            return EXIT_GUARD
        if opts.get("start") is None:
            raise UsageError("--start is required for brute force")
        t0, x0 = parse_start(entry, opts["start"])
        horizon = opts.get("horizon") or entry.brute.get("horizon", entry.window[1])
        res = brute_force_value(entry.problem, t0, x0, pieces, horizon, k, step=entry.brute.get("step"),
                                hit_tol=_hit_tol(entry, opts))
        doc.update({"start": {"t": t0, "x": x0}, "value": res.value, "pieces": pieces, "k": k, "horizon": horizon,
                    "hit_time": res.hit_time, "controls_searched": res.controls_searched, "hits": res.hits})
        if res.control is not None:
            doc["control"] = {"breakpoints": res.control.breakpoints, "values": res.control.values}
    elif method == "synthesis":
        if entry.synthesis is None:
            raise UsageError(f"{entry.name} carries no synthesis")
        if opts.get("start") is None:
            raise UsageError("--start is required for synthesis")
        t0, x0 = parse_start(entry, opts["start"])
        res = value_from_synthesis(entry.problem, entry.synthesis, t0, x0,
                                   chattering_cutoff=entry.extras.get("cutoff", 1e-6),
                                   overshoot=entry.extras.get("overshoot", 0.0))
        doc.update({"start": {"t": t0, "x": x0}, "value": res.value, "hit_time": res.hit_time,
                    "converged": res.converged, "switches": len(res.switch_times)})
    else:
        if "dp" not in entry.extras:
            raise UsageError(f"{entry.name} has no dynamic-programming grid")
        out = ensure_writable(opts.get("out"))
        grid = dp_grid_for(entry, dx=opts.get("mesh"), k=opts.get("samples"))
        path = os.path.join(out, "value_grid.csv")
        grid.to_csv(path)
        doc.update({"grid": {"t_axis": [float(grid.t_axis[0]), float(grid.t_axis[-1]), len(grid.t_axis)],
                             "lo": grid.lo, "steps": grid.steps, "shape": list(grid.shape),
                             "iterations": grid.iterations}, "csv": path})
        if opts.get("start") is not None:
            t0, x0 = parse_start(entry, opts["start"])
            doc.update({"start": {"t": t0, "x": x0}, "value": float(grid.value_at(t0, x0[None])[0])})
    print(_dump(doc))
    return EXIT_OK


# --------------------------------------------------------------------------
# compare


def sample_points(entry, n: int, rng: np.random.Generator, max_tries: int = 200):
    """``n`` random points of Q in the window, off the target and, when the
    entry declares a tube, at least that far from the exceptional set.

    Entries with a state-space dp grid are sampled inside its box.
    """
    tlo, thi, xlo, xhi = entry.window
    xlo, xhi = np.array(xlo, float), np.array(xhi, float)
    dp = entry.extras.get("dp")
    if dp is not None and "t_range" not in dp:
        xlo, xhi = np.maximum(xlo, dp["lo"]), np.minimum(xhi, dp["hi"])
    problem = entry.problem
    A = entry.candidate.exceptional_set
    tube = entry.extras.get("tube", 0.0)
    ts, xs = [], []
    for _ in range(max_tries):
        m = 4 * n
        t = rng.uniform(tlo, thi, m)
        X = rng.uniform(xlo, xhi, (m, len(xlo)))
        ok = problem.Q.contains(t, X) & problem.domain.contains(t, X) & ~problem.target.contains(t, X)
        if tube > 0 and A.pieces:
            ok &= A.distance(t, X) > tube
        ts.extend(t[ok])
        xs.extend(X[ok])
        if len(ts) >= n:
            break
    if len(ts) < n:
        raise PreconditionError(f"could not sample {n} admissible points for {entry.name}")
    return np.array(ts[:n]), np.array(xs[:n])


def estimate_values(entry, ts, X, dist_tol=None):
    """Best available value estimate at each point and where it came from.

    Brute force gives an achieved cost and is used whenever it is finite;
    the dp grid fills in the rest.  Infinite-horizon entries use the least
    truncated cost over the probe controls, and entries with a loitering
    family use the least cost over the loitering budgets.
    """
    problem = entry.problem
    hit_tol = entry.hit_tol if dist_tol is None else dist_tol
    vhat = np.full(len(ts), np.inf)
    source = np.array(["none"] * len(ts), dtype=object)
    extra = {}
    if problem.horizon_mode == "infinite":
        span = entry.window[1] - entry.window[0]
        for i, (t0, x0) in enumerate(zip(ts, X)):
            costs = [truncated_infinite_cost(problem, c, t0, x0, t0 + span)
                     for c in decay_probe_controls(t0, t0 + span)]
            vhat[i] = min(costs)
            source[i] = "probe"
        return vhat, source, extra
    if "loiter" in entry.extras:
        lo = entry.extras["loiter"]
        budgets = list(lo["dwells"])
        tables = []
        for i, (t0, x0) in enumerate(zip(ts, X)):
            rep = divergence_probe(problem,
                                   lambda B, s=float(x0[0]), t0=t0: loitering_control(s, lo["level"], B, t0),
                                   t0, x0, budgets, hit_tol=hit_tol)
            tables.append(rep)
            vhat[i] = min(rep.costs)
            source[i] = "loiter"
        extra["divergence"] = {"budgets": budgets, "costs": [r.costs for r in tables],
                               "decreasing": all(r.decreasing for r in tables)}
        return vhat, source, extra
    b = entry.brute
    if b:
        for i, (t0, x0) in enumerate(zip(ts, X)):
            try:
                res = brute_force_value(problem, t0, x0, b["pieces"], b["horizon"], b["k"], step=b.get("step"),
                                        hit_tol=hit_tol)
            except PreconditionError:
                continue
            if math.isfinite(res.value):
                vhat[i] = res.value
                source[i] = "brute"
    todo = source == "none"
    if todo.any() and "dp" in entry.extras:
        grid = dp_grid_for(entry)
        vhat[todo] = grid.value_at(ts[todo], X[todo])
        source[todo] = "dp"
    return vhat, source, extra


def run_compare(opts) -> int:
    entry = load_entry(opts)
    out = ensure_writable(opts.get("out"))
    n = opts.get("points") or DEFAULTS["compare_points"][0]
    rng = np.random.default_rng(opts.get("seed") or 0)
    ts, X = sample_points(entry, n, rng)
    W = entry.candidate(ts, X)
    vhat, source, extra = estimate_values(entry, ts, X, float(opts["dist_tol"]) if opts.get("dist_tol") else None)
    with np.errstate(invalid="ignore"):
        diff = W - vhat
    d = X.shape[1]
    with open(os.path.join(out, "compare.csv"), "w") as fh:
        fh.write(",".join(["t"] + [f"x{i + 1}" for i in range(d)] + ["W", "V_hat", "W_minus_V_hat", "source"]) + "\n")
        for i in range(n):
            row = [ts[i], *X[i], W[i], vhat[i], diff[i]]
            fh.write(",".join(f"{v:.17g}" for v in row) + f",{source[i]}\n")
    finite = diff[np.isfinite(diff) | (diff == np.inf)]
    worst = float(np.max(finite)) if len(finite) else -math.inf
    passed = worst <= entry.slack
    doc = {"problem": entry.name, "points": n, "seed": opts.get("seed") or 0, "max_w_minus_v_hat": worst,
           "slack": entry.slack, "passed": passed,
           "sources": {s: int(np.sum(source == s)) for s in sorted(set(source))},
           "table": os.path.join(out, "compare.csv")}
    if "divergence" in extra:
        dv = extra["divergence"]
        doc["divergence"] = {"budgets": dv["budgets"], "costs_at_first_point": dv["costs"][0],
                             "decreasing_at_every_point": dv["decreasing"],
                             "note": "estimates keep decreasing with the budget; no certificate"}
    print(_dump(doc))
    return EXIT_OK if passed else EXIT_FAIL


# --------------------------------------------------------------------------


COMMANDS = {"verify": run_verify, "value": run_value, "compare": run_compare}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_defaults:
        print(defaults_text())
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("hjbcheck: error: a command is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        opts = resolve(args)
        return COMMANDS[args.command](opts)
    except UsageError as exc:
        print(f"hjbcheck: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UnknownProblem as exc:
        print(f"hjbcheck: error: unknown problem {exc.args[0]!r} (known: {', '.join(GALLERY)})", file=sys.stderr)
        return EXIT_USAGE
    except BruteForceTooLarge as exc:
        print(_dump({"error": "brute-force size guard", "pieces": exc.pieces, "k": exc.k, "size": exc.size}))
        return EXIT_GUARD
    except OSError as exc:
        print(f"hjbcheck: cannot write output: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - reported as an execution error
        print(f"hjbcheck: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
