"""Command line front end: scenario files in, CSV tables and a JSON run manifest out.

    threewave <command> --config scenario.json [--out DIR] [--format csv,json]

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import beams as _beams
from . import causality as _causality
from . import geodesics as _geodesics
from . import manifold as _manifold
from . import relation as _relation
from . import wavesolver as _wavesolver
from .causality import TimelikePath, UnknownVerdict
from .geodesics import CoordinateBox, GeodesicBlowUp, exit_time, integrate_geodesic
from .manifold import (Conformal, Constant, DomainError, ExpLinear, GaussianBump, Minkowski,
                       PerturbedMinkowski, TangentVector, WarpedProduct, classify_vector)

log = logging.getLogger("threewave")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SCHEMA_VERSION = "1.0"
COMMANDS = ("geodesic", "beam", "interact", "wave", "relation", "reconstruct")


class ConfigError(ValueError):
    """The scenario is well formed JSON but cannot be run as written."""


# -- schema ------------------------------------------------------------------------------

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_vec = {"type": "array", "items": _num, "minItems": 2}
_pair = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}
_light = {"type": "object", "required": ["x", "xi"], "additionalProperties": False,
          "properties": {"x": _vec, "xi": _vec}}

_scalar = {
    "type": "object", "required": ["name"],
    "properties": {"name": {"enum": ["constant", "gaussian_bump", "exp_linear"]},
                   "c": _pos, "center": _vec, "width": _pos, "amplitude": _num, "base": _pos,
                   "k": _vec, "b": _num},
    "additionalProperties": False,
}

_metric = {
    "type": "object", "required": ["family"],
    "properties": {"family": {"enum": ["minkowski", "perturbed_minkowski", "conformal", "warped_product"]},
                   "amplitude": _num, "center": _vec, "radii": {"type": "array", "items": _pos},
                   "shape": {"type": "array", "items": {"type": "array", "items": _num}},
                   "base": {"$ref": "#/$defs/metric"}, "c": _scalar, "sigma": _scalar},
    "additionalProperties": False,
}

_path = {
    "type": "object", "required": ["kind"],
    "properties": {"kind": {"enum": ["vertical", "linear"]}, "x": _vec, "t0": _num, "speed": _pos,
                   "origin": _vec, "velocity": _vec},
    "additionalProperties": False,
}

_foliation = {"type": "object", "required": ["path", "delta"], "additionalProperties": False,
              "properties": {"path": _path, "delta": _pos}}

_lams = {"type": "array", "items": _pos}

TOLERANCE_DEFAULTS = {
    "tol_geo": _geodesics.TOL_GEO,
    "atol_geo": _geodesics.ATOL_GEO,
    "eps_null": _manifold.EPS_NULL,
    "h_g": _manifold.H_G,
    "riccati_rtol": _beams.RICCATI_RTOL,
    "riccati_atol": _beams.RICCATI_ATOL,
    "tau_tol": _causality.TAU_TOL,
    "q_floor": _causality.Q_FLOOR,
    "gap_tol": _relation.GAP_TOL,
    "witness_tol": _relation.WITNESS_TOL,
    "span_tol": _relation.SPAN_TOL,
    "n_brackets": _relation.N_BRACKETS,
    "cfl_max": _wavesolver.CFL_MAX,
    "blowup": _wavesolver.BLOWUP,
}

# module globals read at call time; the rest are passed explicitly by the commands
_PATCHES = {
    "tol_geo": [(_relation, "TOL_GEO")],
    "atol_geo": [(_relation, "ATOL_GEO")],
    "h_g": [(_manifold, "H_G")],
    "riccati_rtol": [(_beams, "RICCATI_RTOL")],
    "riccati_atol": [(_beams, "RICCATI_ATOL")],
    "tau_tol": [(_causality, "TAU_TOL"), (_relation, "TAU_TOL")],
    "q_floor": [(_causality, "Q_FLOOR")],
    "cfl_max": [(_wavesolver, "CFL_MAX")],
    "blowup": [(_wavesolver, "BLOWUP")],
}

SCENARIO_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "threewave scenario",
    "type": "object",
    "required": ["schema_version", "n", "metric", "seed"],
    "$defs": {"metric": _metric},
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "n": {"type": "integer", "minimum": 1, "maximum": 3},
        "seed": {"type": "integer", "minimum": 0},
        "metric": {"$ref": "#/$defs/metric"},
        "tolerances": {"type": "object", "additionalProperties": False,
                       "properties": {k: ({"type": "integer", "minimum": 2} if k == "n_brackets" else _pos)
                                      for k in TOLERANCE_DEFAULTS}},
        "geodesic": {
            "type": "object", "required": ["vector", "s_range"], "additionalProperties": False,
            "properties": {"vector": _light, "s_range": _pair,
                           "samples": {"type": "integer", "minimum": 2},
                           "box": {"type": "object", "required": ["lo", "hi"],
                                   "properties": {"lo": _vec, "hi": _vec}}}},
        "beam": {
            "type": "object", "required": ["vector", "s_range"], "additionalProperties": False,
            "properties": {"vector": _light, "s_range": _pair, "kappa": _num, "delta": _pos,
                           "lams": _lams, "hs": _pos}},
        "interact": {
            "type": "object", "required": ["vectors"], "additionalProperties": False,
            "properties": {"vectors": {"type": "array", "items": _light, "minItems": 4, "maxItems": 4},
                           "y": _vec, "kappas": {"type": "array", "items": _num},
                           "lams": _lams, "delta": _pos, "tube": _pos, "m": {"type": "integer", "minimum": 3},
                           "u_f": _num, "s_max": _pos}},
        "wave": {
            "type": "object", "required": ["grid", "sources"], "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["solve", "pairing"]},
                "grid": {"type": "object", "required": ["t0", "t1", "lo", "hi", "dx"],
                         "additionalProperties": False,
                         "properties": {"t0": _num, "t1": _num, "lo": {"type": "array", "items": _num},
                                        "hi": {"type": "array", "items": _num}, "dx": _pos,
                                        "dt": _pos, "cfl": _pos}},
                "sources": {"type": "array", "minItems": 1, "items": {
                    "type": "object", "required": ["center", "widths"], "additionalProperties": False,
                    "properties": {"center": {"type": "array", "items": _num},
                                   "widths": {"type": "array", "items": _pos}, "amplitude": _num,
                                   "kind": {"enum": ["gaussian", "compact"]}}}},
                "observation": {
                    "type": "object", "required": ["center", "widths"], "additionalProperties": False,
                    "properties": {"center": {"type": "array", "items": _num},
                                   "widths": {"type": "array", "items": _pos}, "amplitude": _num,
                                   "kind": {"enum": ["gaussian", "compact"]}}},
                "m": {"type": "integer", "minimum": 2}, "eps": _pos, "stencil": {"enum": [2, 4]}}},
        "relation": {
            "type": "object", "required": ["foliations"], "additionalProperties": False,
            "properties": {
                "foliations": {"type": "object", "required": ["in", "out"],
                               "properties": {"in": _foliation, "out": _foliation}},
                "quads": {"type": "array", "items": {"type": "array", "items": _light,
                                                     "minItems": 4, "maxItems": 4}},
                "battery": {"type": "object", "additionalProperties": False,
                            "properties": {"n_quads": {"type": "integer", "minimum": 0}, "shift": _pos}}}},
        "reconstruct": {
            "type": "object", "required": ["mode"], "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["earliest", "conformal"]},
                "foliations": {"type": "object", "required": ["in", "out"],
                               "properties": {"in": _foliation, "out": _foliation}},
                "v1": _light, "s": _num,
                "neighborhood": {"type": "object", "required": ["r_values"], "additionalProperties": False,
                                 "properties": {"r_values": {"type": "array", "items": _num},
                                                "alphas": {"type": "array", "items": _num},
                                                "radius": _pos}},
                "pitch": _pos, "gap_policy": {"enum": ["strict", "permissive"]},
                "budget": {"type": "integer"}, "rho": _num,
                "c": _scalar, "points": {"type": "array", "items": _vec},
                "m": {"type": "integer", "minimum": 3}, "distance": _pos, "lams": _lams,
                "delta": _pos, "tube": _pos, "probe_amp": _pos}},
    },
    "additionalProperties": False,
}


def validate(config: dict) -> None:
    try:
        jsonschema.validate(config, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"schema violation at {where}: {exc.message}") from None


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# -- building blocks ---------------------------------------------------------------------

def scalar_from_spec(spec: dict):
    name = spec["name"]
    try:
        if name == "constant":
            return Constant(float(spec["c"]))
        if name == "gaussian_bump":
            return GaussianBump(tuple(spec["center"]), float(spec["width"]), float(spec["amplitude"]),
                                float(spec.get("base", 1.0)))
        return ExpLinear(tuple(spec["k"]), float(spec.get("b", 0.0)))
    except KeyError as exc:
        raise ConfigError(f"scalar field '{name}' is missing {exc.args[0]}") from None


def metric_from_spec(spec: dict, n: int):
    fam = spec["family"]
    try:
        if fam == "minkowski":
            return Minkowski(n)
        if fam == "perturbed_minkowski":
            return PerturbedMinkowski(n, float(spec["amplitude"]), spec["center"], spec["radii"],
                                      spec.get("shape"))
        if fam == "conformal":
            base = metric_from_spec(spec.get("base", {"family": "minkowski"}), n)
            return Conformal(base, scalar_from_spec(spec["c"]))
        return WarpedProduct(n, scalar_from_spec(spec["c"]), scalar_from_spec(spec["sigma"]))
    except KeyError as exc:
        raise ConfigError(f"metric family '{fam}' is missing {exc.args[0]}") from None


def _light_vector(spec: dict, d: int) -> TangentVector:
    if len(spec["x"]) != d or len(spec["xi"]) != d:
        raise ConfigError(f"light vectors need {d} components")
    return TangentVector(np.asarray(spec["x"], float), np.asarray(spec["xi"], float))


def path_from_spec(spec: dict, d: int, metric) -> TimelikePath:
    if spec["kind"] == "vertical":
        xs = spec.get("x")
        if xs is None or len(xs) != d - 1:
            raise ConfigError(f"a vertical path needs x with {d - 1} components")
        return TimelikePath.vertical(xs, t0=spec.get("t0", 0.0), speed=spec.get("speed", 1.0), metric=metric)
    o, u = spec.get("origin"), spec.get("velocity")
    if o is None or u is None or len(o) != d or len(u) != d:
        raise ConfigError(f"a linear path needs origin and velocity with {d} components")
    o, u = np.asarray(o, float), np.asarray(u, float)
    return TimelikePath(lambda s: o + s[..., None] * u, lambda s: np.broadcast_to(u, s.shape + u.shape),
                        metric=metric)


def foliations_from_spec(spec: dict, metric):
    d = metric.dim
    out = []
    for side in ("in", "out"):
        f = spec[side]
        out.append(_relation.Foliation(metric, path_from_spec(f["path"], d, metric), f["delta"], side))
    return out


def resolve_tolerances(config: dict) -> dict:
    tol = dict(TOLERANCE_DEFAULTS)
    tol.update(config.get("tolerances", {}))
    return tol


@contextlib.contextmanager
def tolerances_applied(tol: dict):
    saved = []
    try:
        for key, targets in _PATCHES.items():
            for mod, attr in targets:
                saved.append((mod, attr, getattr(mod, attr)))
                setattr(mod, attr, tol[key])
        yield
    finally:
        for mod, attr, val in reversed(saved):
            setattr(mod, attr, val)


def wave_grid_from_spec(spec: dict, n: int, cfl_max: float) -> _wavesolver.WaveGrid:
    if len(spec["lo"]) != n or len(spec["hi"]) != n:
        raise ConfigError(f"grid bounds need {n} spatial components")
    dx = float(spec["dx"])
    if "dt" in spec:
        # a prescribed step is checked against the leapfrog bound dt sqrt(n) / dx <= cfl_max
        courant = float(spec["dt"]) * math.sqrt(n) / dx
        if courant > cfl_max:
            raise ConfigError(f"dt = {spec['dt']} violates the CFL bound dt*sqrt(n)/dx <= {cfl_max} "
                              f"(dt*sqrt(n)/dx = {courant:.6g})")
        cfl = courant
    else:
        cfl = float(spec.get("cfl", 0.5))
        if cfl > cfl_max:
            raise ConfigError(f"cfl = {cfl} exceeds the CFL bound {cfl_max}")
    return _wavesolver.WaveGrid(float(spec["t0"]), float(spec["t1"]), tuple(spec["lo"]), tuple(spec["hi"]),
                                dx, cfl)


# -- commands ----------------------------------------------------------------------------
# each returns (columns, rows, headline metrics); construction problems raise ConfigError

def run_geodesic(cfg: dict, metric, tol: dict):
    blk = _block(cfg, "geodesic")
    v = _light_vector(blk["vector"], metric.dim)
    kind, orient = classify_vector(metric, v, tol["eps_null"])
    if kind == "spacelike":
        raise ConfigError("geodesic initial vector must be causal")
    geo = integrate_geodesic(metric, v, blk["s_range"], tol_geo=tol["tol_geo"], atol=tol["atol_geo"])
    s = np.linspace(blk["s_range"][0], blk["s_range"][1], int(blk.get("samples", 101)))
    st = geo.state(s)
    d = metric.dim
    X, V = st[:, :d], st[:, d:]
    q = np.einsum("ki,kij,kj->k", V, metric.g(X), V)
    cols = ["s"] + [f"x{k}" for k in range(d)] + [f"xi{k}" for k in range(d)] + ["g_vv"]
    rows = [[float(si), *map(float, x), *map(float, w), float(qq)] for si, x, w, qq in zip(s, X, V, q)]
    metrics = {"causal_type": kind, "orientation": orient,
               "max_abs_g_vv_change": float(np.max(np.abs(q - q[0])))}
    if "box" in blk:
        K = CoordinateBox(np.asarray(blk["box"]["lo"], float), np.asarray(blk["box"]["hi"], float))
        metrics["exit_time"] = float(exit_time(geo, K))
    return cols, rows, metrics


def run_beam(cfg: dict, metric, tol: dict):
    blk = _block(cfg, "beam")
    v = _light_vector(blk["vector"], metric.dim)
    lams = [float(x) for x in blk.get("lams", [40.0, 60.0, 90.0, 135.0])]
    beam = _beams.build_beam(metric, v, float(blk.get("kappa", 1.0)), lams[0] if lams else 40.0,
                             delta=float(blk.get("delta", 0.2)), s_range=tuple(blk["s_range"]))
    ric = beam.riccati
    metrics = {"conservation_drift": float(ric.conservation_drift()),
               "symmetry_error": float(ric.symmetry_error()),
               "min_imag_eig": float(ric.min_imag_eig()),
               "predicted_slope": float(_beams.truncated_residual_exponent(metric.n))}
    cols = ["lam", "norm", "slope", "predicted"]
    if not lams:
        return cols, [], metrics
    rep = _beams.beam_residual(metric, beam, lams, hs=float(blk.get("hs", 0.02)))
    metrics["slope"] = float(rep.slope)
    rows = [[float(l), float(nv), float(rep.slope), float(rep.predicted)] for l, nv in zip(rep.lams, rep.norms)]
    return cols, rows, metrics


def run_interact(cfg: dict, metric, tol: dict):
    from .interaction import InteractionConfig, eval_D_semi, prepare_interaction
    blk = _block(cfg, "interact")
    vecs = [_light_vector(w, metric.dim) for w in blk["vectors"]]
    lams = [float(x) for x in blk.get("lams", [40.0, 60.0, 90.0, 135.0])]
    if not lams:
        raise ConfigError("interact needs a non-empty lambda schedule")
    icfg = InteractionConfig(metric, vecs, kappas=blk.get("kappas"), delta=float(blk.get("delta", 0.5)),
                             tube=float(blk.get("tube", 2.0)), u_f=float(blk.get("u_f", 1.0)),
                             m=int(blk.get("m", 3)), s_max=float(blk.get("s_max", 12.0)))
    prep = prepare_interaction(icfg, y=blk.get("y"), lam=lams[0])
    est = eval_D_semi(prep, lams)
    cols = ["lam", "full", "reduced"]
    rows = [[float(l), float(a), float(b)] for l, a, b in zip(est.lams, est.full, est.reduced)]
    metrics = {"y": prep.y.tolist(), "spread": float(prep.spread), "intersecting": bool(prep.intersecting),
               "kappas": prep.kappas.tolist(), "full_limit": float(est.full_limit),
               "full_error": float(est.full_error), "reduced_limit": float(est.reduced_limit),
               "predicted": float(est.predicted), "c0": float(est.c0)}
    return cols, rows, metrics


def _source(spec, d):
    if len(spec["center"]) != d or len(spec["widths"]) != d:
        raise ConfigError(f"sources need center and widths with {d} components")
    make = _wavesolver.compact_source if spec.get("kind") == "compact" else _wavesolver.gaussian_source
    return make(spec["center"], spec["widths"], float(spec.get("amplitude", 1.0)))


def run_wave(cfg: dict, metric, tol: dict):
    blk = _block(cfg, "wave")
    grid = wave_grid_from_spec(blk["grid"], metric.n, tol["cfl_max"])
    d = metric.dim
    fs = [_source(s, d) for s in blk["sources"]]
    m_exp = int(blk.get("m", 3))
    if blk.get("mode", "solve") == "pairing":
        if "observation" not in blk:
            raise ConfigError("pairing mode needs an observation source")
        if len(fs) != m_exp:
            raise ConfigError(f"pairing with m = {m_exp} needs {m_exp} sources, got {len(fs)}")
        rep = _wavesolver.three_fold_pairing(grid, metric, _source(blk["observation"], d), fs,
                                             eps=float(blk.get("eps", 1e-3)), stencil=int(blk.get("stencil", 4)))
        cols = ["lhs", "rhs", "rel_diff", "lhs_half_eps", "eps", "stencil", "solves"]
        rows = [[rep.lhs, rep.rhs, rep.rel_diff, rep.lhs_half, rep.eps, rep.stencil, rep.solves]]
        metrics = {"rel_diff": float(rep.rel_diff), "courant": grid.courant, "nt": grid.nt}
        return cols, rows, metrics
    f = (lambda X: sum(fj(X) for fj in fs))
    field = _wavesolver.solve_semilinear(grid, metric, f, m_exp)
    u = field.values
    axes = tuple(range(1, u.ndim))
    cols = ["k", "t", "max_abs_u", "l2_u"]
    rows = [[int(k), float(t), float(a), float(b)] for k, (t, a, b) in
            enumerate(zip(grid.t, np.max(np.abs(u), axis=axes), np.sqrt(np.sum(u ** 2, axis=axes) * grid.dx ** grid.n)))]
    metrics = {"courant": grid.courant, "dt": grid.dt, "nt": grid.nt,
               "residual": _wavesolver.semilinear_residual(field, f, m_exp),
               "max_abs_u": float(np.max(np.abs(u)))}
    return cols, rows, metrics


def _oracle(blk, metric, tol):
    fin, fout = foliations_from_spec(blk["foliations"], metric)
    return _relation.RelationOracle(fin, fout, gap_tol=tol["gap_tol"], n_brackets=int(tol["n_brackets"]),
                                    witness_tol=tol["witness_tol"], span_tol=tol["span_tol"])


def run_relation(cfg: dict, metric, tol: dict):
    blk = _block(cfg, "relation")
    oracle = _oracle(blk, metric, tol)
    quads, cert = [], []
    for q in blk.get("quads", []):
        quads.append(tuple(_light_vector(w, metric.dim) for w in q))
        cert.append(None)
    if "battery" in blk:
        bq, bc = _relation.minkowski_battery(oracle.fol_in, oracle.fol_out,
                                             n_quads=int(blk["battery"].get("n_quads", 200)), seed=cfg["seed"],
                                             shift=float(blk["battery"].get("shift", 0.3)))
        quads += bq
        cert += [bool(c) for c in bc]
    rows, cols = [], _relation_columns(metric.dim)
    counts = {"member": 0, "nonmember": 0, "unknown": 0}
    violations = 0
    for q, c in zip(quads, cert):
        res = oracle.membership(*q)
        row = res.row()
        row["certified"] = "" if c is None else str(c).lower()
        counts[res.verdict] += 1
        if c is True and res.verdict == "nonmember":
            violations += 1
        rows.append([row[k] for k in cols])
    metrics = {"counts": counts, "certified_nonmember": violations, "n_quads": len(quads),
               "oracle": oracle.tolerances()}
    return cols, rows, metrics


def _relation_columns(d):
    cols = []
    for j in range(4):
        cols += [f"v{j}_x{k}" for k in range(d)] + [f"v{j}_xi{k}" for k in range(d)]
    return cols + ["verdict"] + [f"y{k}" for k in range(d)] + ["min_gap", "span_residual", "reason", "certified"]


def run_reconstruct(cfg: dict, metric, tol: dict):
    from . import reconstruct as rec
    blk = _block(cfg, "reconstruct")
    if blk["mode"] == "conformal":
        for key in ("c", "points"):
            if key not in blk:
                raise ConfigError(f"conformal reconstruction needs '{key}'")
        ccfg = rec.ConformalConfig(metric, scalar_from_spec(blk["c"]), distance=float(blk.get("distance", 1.0)),
                                   lams=tuple(blk.get("lams", (40.0, 60.0, 90.0, 135.0))),
                                   delta=float(blk.get("delta", 0.5)), tube=float(blk.get("tube", 2.0)),
                                   probe_amp=float(blk.get("probe_amp", 1.0)))
        m_exp = int(blk.get("m", 3))
        if abs(rec.conformal_exponent(metric.n, m_exp)) < 1e-15:
            raise ConfigError(f"(n, m) = ({metric.n}, {m_exp}): the exponent of c(y) is identically zero, "
                              "so the interaction data carry no information on c")
        cols = ["y_" + str(k) for k in range(metric.dim)] + ["c", "c_true", "ratio", "ratio_error", "exponent"]
        rows, errs = [], []
        for y in blk["points"]:
            if len(y) != metric.dim:
                raise ConfigError(f"sample points need {metric.dim} coordinates")
            est = rec.recover_conformal_factor(y, metric.n, m_exp, ccfg)
            rows.append([*map(float, est.y), est.c, est.c_true, est.ratio, est.ratio_error, est.exponent])
            errs.append(abs(est.c / est.c_true - 1.0))
        return cols, rows, {"max_rel_error": float(max(errs)) if errs else 0.0, "points": len(rows)}
    for key in ("foliations", "v1", "s", "neighborhood"):
        if key not in blk:
            raise ConfigError(f"earliest-set reconstruction needs '{key}'")
    oracle = _oracle(blk, metric, tol)
    v1 = _light_vector(blk["v1"], metric.dim)
    nb = blk["neighborhood"]
    U = rec.Neighborhood(nb["r_values"], tuple(nb.get("alphas", (0.1, 0.03))), float(nb.get("radius", 2.0)))
    rep = rec.recover_E_family(oracle, v1, float(blk["s"]), U, budget=int(blk.get("budget", 4000)),
                               pitch=float(blk.get("pitch", 0.05)), gap_policy=blk.get("gap_policy", "permissive"))
    cmp = rec.compare_with_direct(rep, oracle, blk.get("rho"))
    cols = ["r", "alpha", "n_E", "f0", "in_W", "recovered", "hausdorff"]
    haus = {p["r"]: p["hausdorff"] for p in cmp.get("pairs", [])}
    rows = [[c.r, c.alpha, len(c.E), c.f0, str(c.in_W).lower(), str(c.recovered).lower(),
             haus.get(c.r, float("nan"))] for c in rep.candidates]
    metrics = {"f_crit": rep.f_crit if np.isfinite(rep.f_crit) else "inf", "flags": rep.flags,
               "recovered": [c.r for c in rep.recovered], "W": [c.r for c in rep.W],
               "monotone": cmp.get("monotone"), "all_pairs_ok": cmp.get("all_pairs_ok"),
               "post_cut_absent": cmp.get("post_cut_absent")}
    return cols, rows, metrics


def _block(cfg, name):
    if name not in cfg:
        raise ConfigError(f"the '{name}' command needs a '{name}' block in the scenario")
    return cfg[name]


RUNNERS = {"geodesic": run_geodesic, "beam": run_beam, "interact": run_interact, "wave": run_wave,
           "relation": run_relation, "reconstruct": run_reconstruct}


# -- output ------------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            if len(r) != len(columns):
                raise ValueError("row length does not match the header")
            w.writerow([_fmt(v) for v in r])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    return obj


def write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, sort_keys=True, indent=2)
        fh.write("\n")


def emit_outputs(out: Path, command: str, columns, rows, manifest: dict, formats) -> list:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        write_csv(out / f"{command}.csv", columns, rows)
        written.append(f"{command}.csv")
    if "json" in formats:
        manifest = dict(manifest, outputs=written + ["manifest.json"])
        write_json(out / "manifest.json", manifest)
        written.append("manifest.json")
    return written


# -- entry point -------------------------------------------------------------------------

def run_scenario(config: dict, command: str, out: Path, formats=("csv", "json")) -> int:
    """Validate, run and emit; returns the exit code."""
    try:
        validate(config)
        metric = metric_from_spec(config["metric"], int(config["n"]))
        tol = resolve_tolerances(config)
    except (ConfigError, DomainError) as exc:
        log.error("invalid config: %s", exc)
        return EXIT_CONFIG
    base = {"schema_version": SCHEMA_VERSION, "tool": "threewave", "tool_version": __version__,
            "command": command, "config_hash": config_hash(config), "seed": config["seed"],
            "metric": metric.describe(), "tolerances": tol}
    try:
        with np.errstate(over="raise", invalid="raise"), tolerances_applied(tol):
            columns, rows, metrics = RUNNERS[command](config, metric, tol)
    except (ConfigError, _wavesolver.SourceSupportError) as exc:
        log.error("invalid config: %s", exc)
        return EXIT_CONFIG
    except (DomainError, GeodesicBlowUp, UnknownVerdict, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure in %s: %s: %s", command, type(exc).__name__, exc)
        emit_outputs(out, command, [], [], dict(base, status="numerical_failure",
                                                diagnostic=f"{type(exc).__name__}: {exc}"), ("json",))
        return EXIT_NUMERIC
    try:
        emit_outputs(out, command, columns, rows, dict(base, status="ok", metrics=metrics), formats)
    except OSError as exc:
        log.error("cannot write outputs to %s: %s", out, exc)
        return EXIT_CONFIG
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="threewave", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"threewave {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path, help="scenario JSON file")
        sp.add_argument("--out", type=Path, default=Path("threewave_out"), help="output directory")
        sp.add_argument("--format", default="csv,json", help="comma separated subset of csv,json")
        sp.add_argument("-v", "--verbose", action="store_true")
    sc = sub.add_parser("schema", help="print the scenario JSON schema")
    sc.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "schema":
        print(json.dumps(SCENARIO_SCHEMA, sort_keys=True, indent=2))
        return EXIT_OK
    formats = {f.strip() for f in args.format.split(",") if f.strip()}
    if not formats or not formats <= {"csv", "json"}:
        log.error("--format must be a comma separated subset of csv,json")
        return EXIT_CONFIG
    try:
        config = json.loads(args.config.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        log.error("cannot read config %s: %s", args.config, exc)
        return EXIT_CONFIG
    return run_scenario(config, args.command, args.out, tuple(sorted(formats)))


if __name__ == "__main__":
    sys.exit(main())
