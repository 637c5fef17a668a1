"""Numeric defaults and TOML run configuration.

A config file mirrors the command-line flags (``tol-hjb`` or ``tol_hjb``
both work) and may carry the tolerance keys ``dist_tol``, ``grad_tol``,
``h_grad`` and a ``[params]`` table of gallery-builder overrides, e.g.::

    problem = "infinite_decay"
    theorem = "teo2"
    mesh = 0.0078125
    [params]
    eta = 0.4
"""

from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .core import DIST_TOL, GRAD_TOL, H_GRAD
from .value import MAX_ENUMERATION, MAX_PIECES
from .verify import ANNULI, H_LIST

# name -> (default, meaning); gallery entries override the check defaults per problem
DEFAULTS = {
    "dist_tol": (DIST_TOL, "set membership / target hit tolerance (absolute)"),
    "grad_tol": (GRAD_TOL, "analytic vs finite-difference gradient agreement (relative)"),
    "h_grad": (H_GRAD, "central-difference step, times max(1, |coordinate|)"),
    "mesh": (1.0 / 64, "state grid spacing of hypothesis checks"),
    "exclusion_radius": ("2 * mesh", "grid points this close to A are excluded from the HJB check"),
    "hjb_tol": (1e-6, "allowed negative HJB residual and negative running cost"),
    "target_tol": (1e-6, "allowed W - psi on the target"),
    "boundary_tol": (1e-6, "allowed |W - sup W| on the boundary of Q"),
    "ndj_tol": (1e-3, "allowed downward jump along trajectories; tail comparison slack"),
    "liminf_tol": (1e-2, "allowed excess of the ess-liminf proxy over W"),
    "ndj_offsets": (list(H_LIST), "backward time offsets of the jump test"),
    "liminf_annuli": ([float(f"{r:.6g}") for r in ANNULI], "annulus radii of the ess-liminf proxy"),
    "liminf_quantile": ("0.05 * 0.5^j", "quantile level on the j-th annulus"),
    "liminf_samples": (1000, "samples per annulus"),
    "k": (21, "control samples per point (lattice plus extreme points)"),
    "target_samples": (2000, "target points sampled for hypothesis ii"),
    "boundary_samples": (2000, "boundary points sampled for hypothesis iii"),
    "ndj_trajectories": (16, "constant-control trajectories of the jump test"),
    "seed": (0, "random seed"),
    "max_pieces": (MAX_PIECES, "brute-force guard on control pieces"),
    "max_enumeration": (MAX_ENUMERATION, "brute-force guard on k^pieces"),
    "compare_points": (20, "sample points of the compare command"),
}

FLAG_KEYS = {
    "problem", "theorem", "eps", "g_l1", "grid", "mesh", "tol_hjb", "tol_target", "seed", "out",
    "method", "start", "pieces", "samples", "horizon", "points", "boundary_mode",
}
TOLERANCE_KEYS = {"dist_tol", "grad_tol", "h_grad"}


class ConfigError(ValueError):
    pass


def defaults_text() -> str:
    width = max(len(k) for k in DEFAULTS)
    lines = [f"{k:<{width}}  {v!s:<24}  {meaning}" for k, (v, meaning) in DEFAULTS.items()]
    return "\n".join(lines)


def load_config(path) -> dict:
    """Read a TOML run config; keys are normalized to flag names with underscores."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    out = {}
    for key, val in raw.items():
        k = key.replace("-", "_")
        if k == "params":
            if not isinstance(val, dict):
                raise ConfigError("[params] must be a table")
            out["params"] = dict(val)
        elif k in FLAG_KEYS or k in TOLERANCE_KEYS:
            out[k] = val
        else:
            raise ConfigError(f"unknown config key {key!r}")
    for k in TOLERANCE_KEYS & out.keys():
        if not float(out[k]) > 0:
            raise ConfigError(f"{k} must be positive")
    return out
