"""Config-driven command line front end.

Each run is described by a small text config (one ``key = value`` per line,
``#`` starts a comment line).  A run writes exactly one CSV table to the
declared ``output`` path plus a JSON manifest next to it at
``<output>.manifest.json``; nothing else on disk is touched.  The manifest
records the config, the resolved seed, library versions and a sha256 of the
table, so a run can be replayed later and compared byte for byte.

Every config problem is reported with its line number before any sampling
starts, and unknown keys are rejected outright.

Exit codes: 0 when no row failed (and at least one passed), 2 when any row
failed or the config did not parse, 3 when every row was inconclusive.
"""

import csv
import hashlib
import json
import math
import os
import sys
import time

import click
import numpy as np

from . import __version__
from . import cylinder as cyl
from . import geometry as geo
from . import inequalities as ineq
from . import martingale as mg
from . import metricspace as ms
from . import montecarlo as mc
from . import pathspace as ps

TWO_PI = 2.0 * math.pi

EXPERIMENTS = (
    "r2", "r3", "r45", "r6-frequency", "r7-logsob", "be-suite",
    "finite-frequency", "dimensional", "girsanov", "ito-isometry",
    "martingale-moments", "cone-holonomy", "cone-parallelogram",
    "cone-br-probe",
)

VERDICT_COLUMNS = (
    "inequality", "model", "testfn", "kappa", "lhs", "lhs_se", "rhs",
    "rhs_se", "margin", "z", "verdict", "n_paths", "seed",
    "equality", "inner", "note",
)

DEFECT_COLUMNS = (
    "level", "scale", "segment", "e1", "e2", "e3", "e4", "px", "pv",
    "eps", "norm_ratio",
)


# ---------------------------------------------------------------------------
# config parsing


class ConfigError:
    """One problem in a config file, tied to a line number (0 = whole file)."""

    def __init__(self, line, kind, message):
        self.line = int(line)
        self.kind = kind
        self.message = message

    def __str__(self):
        where = "line %d" % self.line if self.line else "config"
        return "%s: %s: %s" % (where, self.kind, self.message)


def _parse_int(text):
    try:
        return int(text)
    except ValueError:
        raise ValueError("expected an integer, got %r" % text)


def _parse_pos_int(text):
    value = _parse_int(text)
    if value <= 0:
        raise ValueError("expected a positive integer, got %r" % text)
    return value


def _parse_float(text):
    try:
        return float(text)
    except ValueError:
        raise ValueError("expected a number, got %r" % text)


def _parse_pos_float(text):
    value = _parse_float(text)
    if not value > 0:
        raise ValueError("expected a positive number, got %r" % text)
    return value


def _parse_nonneg_float(text):
    value = _parse_float(text)
    if value < 0:
        raise ValueError("expected a nonnegative number, got %r" % text)
    return value


def _parse_float_list(text):
    parts = [p.strip() for p in text.split(",")]
    if not any(parts):
        raise ValueError("expected a comma separated list of numbers")
    try:
        return tuple(float(p) for p in parts if p)
    except ValueError:
        raise ValueError("expected a comma separated list of numbers, got %r"
                         % text)


def _parse_point(text):
    try:
        values = [float(p) for p in text.split()]
    except ValueError:
        raise ValueError("expected whitespace separated coordinates, got %r"
                         % text)
    if not values:
        raise ValueError("expected at least one coordinate")
    return np.array(values)


def _parse_str(text):
    return text


# key -> (parser, default).  Defaults of None mean "let the library default
# stand"; handlers only forward keys the config actually set.
_KEYS = {
    "experiment": (_parse_str, None),
    "model": (_parse_str, None),
    "output": (_parse_str, None),
    "seed": (_parse_int, 0),
    "paths": (_parse_pos_int, None),
    "inner": (_parse_pos_int, None),
    "kappa": (_parse_nonneg_float, None),
    "z": (_parse_pos_float, None),
    "functions": (_parse_str, None),
    "u": (_parse_str, None),
    "T": (_parse_pos_float, None),
    "times": (_parse_float_list, None),
    "t": (_parse_pos_float, None),
    "d": (_parse_pos_float, None),
    "eps": (_parse_float_list, None),
    "steps": (_parse_pos_int, None),
    "curves": (_parse_pos_int, None),
    "count": (_parse_pos_int, None),
    "k": (_parse_pos_int, None),
    "base_time": (_parse_pos_float, None),
    "gaps": (_parse_float_list, None),
    "start": (_parse_point, None),
    "x0": (_parse_point, None),
    "x1": (_parse_point, None),
    "direction": (_parse_point, None),
    "scales": (_parse_float_list, None),
    "segments": (_parse_pos_int, None),
    "radius": (_parse_pos_float, None),
    "loops": (_parse_pos_int, None),
    "s": (_parse_pos_float, None),
    "scale": (_parse_pos_float, None),
    "levels": (_parse_pos_int, None),
    "slope_tol": (_parse_pos_float, None),
}

# extra keys each experiment cannot run without (model/output/experiment are
# always required)
_REQUIRED = {
    "r2": ("functions",),
    "r3": ("functions",),
    "r45": ("functions", "times"),
    "r6-frequency": ("times",),
    "r7-logsob": ("T", "eps"),
    "be-suite": ("u", "times"),
    "finite-frequency": ("u", "times"),
    "dimensional": ("functions", "t"),
    "girsanov": ("T",),
    "ito-isometry": ("T",),
    "martingale-moments": ("functions", "k", "base_time", "gaps"),
    "cone-holonomy": (),
    "cone-parallelogram": ("x0", "x1"),
    "cone-br-probe": ("functions", "s"),
}

_CONE_ONLY = ("cone-holonomy", "cone-br-probe")
_SMOOTH_ONLY = ("r2", "r3", "r45", "r6-frequency", "r7-logsob", "be-suite",
                "finite-frequency", "dimensional", "girsanov", "ito-isometry",
                "martingale-moments")


def _parse_family(text):
    """A bare scalar family spec, 'kind:axis=0,coef=1,freq=1,phase=0'."""
    kind, _, rest = text.partition(":")
    kind = kind.strip().lower()
    if kind not in ("linear", "sin", "exp", "quad"):
        raise ValueError("unknown family kind %r" % kind)
    params = {}
    if rest.strip():
        for chunk in rest.split(","):
            key, eq, value = chunk.partition("=")
            if not eq:
                raise ValueError("malformed family parameter %r" % chunk)
            params[key.strip()] = float(value)
    fam = geo.ScalarFamily(kind, axis=int(params.pop("axis", 0)),
                           coef=params.pop("coef", 1.0),
                           freq=params.pop("freq", 1.0),
                           phase=params.pop("phase", 0.0),
                           offset=params.pop("offset", 0.0))
    if params:
        raise ValueError("unknown family parameters %s" % sorted(params))
    return fam


def _point_dim(space):
    if isinstance(space, ms.ConeSpace):
        return 2
    if space.kind == "sphere2":
        return 3
    return space.dim


def _default_start(space):
    if isinstance(space, ms.ConeSpace):
        return np.array([1.0, 0.0])
    if space.kind == "sphere2":
        return np.array([space.radius, 0.0, 0.0])
    return np.zeros(space.dim)


def _check_point(space, value, key):
    pdim = _point_dim(space)
    if len(value) != pdim:
        raise ValueError("%s needs %d coordinates for this model, got %d"
                         % (key, pdim, len(value)))
    if isinstance(space, ms.ConeSpace):
        if value[0] < 0:
            raise ValueError("%s has a negative cone radius" % key)
        return space.point(value[0], value[1])
    if space.kind == "sphere2":
        norm = float(np.linalg.norm(value))
        if abs(norm - space.radius) > 1e-6 * space.radius:
            raise ValueError("%s must lie on the sphere of radius %g"
                             % (key, space.radius))
        return value * (space.radius / norm)
    return value


def parse_config(text):
    """Parse config text into a value dict, or collect every problem.

    Returns (config, errors); config is None whenever errors is nonempty.
    All validation happens here, before a single path is sampled.
    """
    errors = []
    values = {}
    lines = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, eq, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not eq or not key:
            errors.append(ConfigError(lineno, "syntax-error",
                                      "expected 'key = value', got %r" % line))
            continue
        if key not in _KEYS:
            errors.append(ConfigError(lineno, "unknown-key",
                                      "unknown key %r" % key))
            continue
        if key in values:
            errors.append(ConfigError(
                lineno, "duplicate-key",
                "%r already set on line %d" % (key, lines[key])))
            continue
        lines[key] = lineno
        if not value:
            errors.append(ConfigError(lineno, "bad-value",
                                      "empty value for %r" % key))
            continue
        parser, _ = _KEYS[key]
        try:
            values[key] = parser(value)
        except ValueError as exc:
            errors.append(ConfigError(lineno, "type-error",
                                      "%s: %s" % (key, exc)))

    for key in ("experiment", "model", "output"):
        if key not in values and key not in lines:
            errors.append(ConfigError(0, "missing-required",
                                      "required key %r is not set" % key))

    experiment = values.get("experiment")
    if experiment is not None and experiment not in EXPERIMENTS:
        errors.append(ConfigError(
            lines["experiment"], "bad-value",
            "unknown experiment %r; choose one of %s"
            % (experiment, ", ".join(EXPERIMENTS))))
        experiment = None

    space = None
    if "model" in values:
        try:
            space = ms.parse_space(values["model"])
        except (ValueError, KeyError) as exc:
            errors.append(ConfigError(lines["model"], "bad-value",
                                      "model: %s" % exc))

    if experiment is not None:
        for key in _REQUIRED[experiment]:
            if key not in values and key not in lines:
                errors.append(ConfigError(
                    0, "missing-required",
                    "experiment %r needs key %r" % (experiment, key)))

    if experiment is not None and space is not None:
        is_cone = isinstance(space, ms.ConeSpace)
        if experiment in _CONE_ONLY and not is_cone:
            errors.append(ConfigError(lines["model"], "bad-value",
                                      "experiment %r needs a cone model"
                                      % experiment))
        if experiment in _SMOOTH_ONLY and is_cone:
            errors.append(ConfigError(lines["model"], "bad-value",
                                      "experiment %r needs a smooth model"
                                      % experiment))
        if experiment == "girsanov" and not (
                getattr(space, "kind", "") == "euclidean"
                and getattr(space, "kappa_f", 0.0) > 0):
            errors.append(ConfigError(
                lines["model"], "bad-value",
                "girsanov needs a weighted euclidean model (ou:...)"))

    if space is not None and "functions" in values:
        specs = [p.strip() for p in values["functions"].split(";") if p.strip()]
        if not specs:
            errors.append(ConfigError(lines["functions"], "bad-value",
                                      "functions: no function specs given"))
        fns = []
        for idx, spec in enumerate(specs):
            try:
                fns.append(cyl.parse_function(space, spec))
            except (ValueError, KeyError) as exc:
                errors.append(ConfigError(
                    lines["functions"], "bad-value",
                    "functions[%d] %r: %s" % (idx, spec, exc)))
        values["_functions"] = fns

    if "u" in values:
        try:
            values["_u"] = _parse_family(values["u"])
        except (ValueError, KeyError) as exc:
            errors.append(ConfigError(lines["u"], "bad-value",
                                      "u: %s" % exc))

    if space is not None:
        for key in ("start", "x0", "x1"):
            if key in values:
                try:
                    values[key] = _check_point(space, values[key], key)
                except ValueError as exc:
                    errors.append(ConfigError(lines[key], "bad-value",
                                              str(exc)))

    if errors:
        return None, errors
    values["_space"] = space
    values["_lines"] = lines
    return values, []


# ---------------------------------------------------------------------------
# experiment handlers


def _space_spec(space):
    if isinstance(space, ms.ConeSpace):
        return "cone:l=%s" % repr(float(space.length))
    return space.spec_string()


def _start_point(cfg, space):
    if "start" in cfg:
        return cfg["start"]
    return _default_start(space)


def _mc_kwargs(cfg, workers, paths_key="paths"):
    kwargs = {"workers": workers}
    if cfg.get(paths_key) is not None:
        kwargs["n_paths"] = cfg[paths_key]
    if cfg.get("kappa") is not None:
        kwargs["kappa"] = cfg["kappa"]
    if cfg.get("z") is not None:
        kwargs["z_crit"] = cfg["z"]
    kwargs["seed"] = cfg.get("seed", 0)
    return kwargs


def _forward(kwargs, cfg, mapping):
    for dest, key in mapping.items():
        if cfg.get(key) is not None:
            kwargs[dest] = cfg[key]
    return kwargs


def _run_r2(cfg, space, workers):
    x = _start_point(cfg, space)
    rows = []
    for F in cfg["_functions"]:
        rows.extend(ineq.check_r2(space, F, x, **_mc_kwargs(cfg, workers)))
    return rows, None, ()


def _run_r3(cfg, space, workers):
    x = _start_point(cfg, space)
    rows = []
    for F in cfg["_functions"]:
        rows.extend(ineq.check_r3(space, F, x, **_mc_kwargs(cfg, workers)))
    return rows, None, ()


def _run_r45(cfg, space, workers):
    x = _start_point(cfg, space)
    kwargs = _forward(_mc_kwargs(cfg, workers), cfg, {"inner": "inner"})
    rows = []
    for F in cfg["_functions"]:
        rows.extend(ineq.check_r4_r5(space, F, x, cfg["times"], **kwargs))
    return rows, None, ()


def _run_r6(cfg, space, workers):
    x = _start_point(cfg, space)
    kwargs = _forward(_mc_kwargs(cfg, workers), cfg,
                      {"steps": "steps", "curve_count": "curves",
                       "slope_tol": "slope_tol"})
    rows = ineq.check_r6_frequency(space, x, cfg["times"], **kwargs)
    note = ("frequency normalization: N[F] = (malliavin energy"
            " - ricci correction) / variance; the correction is reported"
            " separately in each row note")
    return rows, None, (note,)


def _run_r7(cfg, space, workers):
    x = _start_point(cfg, space)
    kwargs = _forward(_mc_kwargs(cfg, workers), cfg, {"steps": "steps"})
    rows = ineq.check_r7_logsob(space, x, cfg["T"], cfg["eps"], **kwargs)
    return rows, None, ()


def _run_be_suite(cfg, space, workers):
    x = _start_point(cfg, space)
    rows = ineq.check_bakry_emery_suite(space, cfg["_u"], x, cfg["times"],
                                        **_mc_kwargs(cfg, workers))
    return rows, None, ()


def _run_finite_frequency(cfg, space, workers):
    x = _start_point(cfg, space)
    kwargs = _mc_kwargs(cfg, workers)
    kwargs.pop("kappa", None)
    _forward(kwargs, cfg, {"slope_tol": "slope_tol"})
    rows = ineq.check_finite_frequency(space, cfg["_u"], x, cfg["times"],
                                       **kwargs)
    return rows, None, ()


def _run_dimensional(cfg, space, workers):
    x = _start_point(cfg, space)
    kwargs = _forward(_mc_kwargs(cfg, workers), cfg, {"d": "d"})
    rows = []
    for F in cfg["_functions"]:
        rows.extend(ineq.check_dimensional(space, F, x, cfg["t"], **kwargs))
    return rows, None, ()


def _run_girsanov(cfg, space, workers):
    x = _start_point(cfg, space)
    kwargs = _mc_kwargs(cfg, workers)
    kwargs.pop("kappa", None)
    _forward(kwargs, cfg, {"steps": "steps"})
    if cfg.get("_u") is not None:
        kwargs["u"] = cfg["_u"]
    rows = ineq.check_girsanov(space, x, cfg["T"], **kwargs)
    return rows, None, ()


def _run_ito_isometry(cfg, space, workers):
    x = _start_point(cfg, space)
    kwargs = _mc_kwargs(cfg, workers)
    kwargs.pop("kappa", None)
    _forward(kwargs, cfg, {"steps": "steps", "count": "count"})
    rows = ineq.check_ito_isometry(space, x, cfg["T"], **kwargs)
    return rows, None, ()


def _run_martingale_moments(cfg, space, workers):
    x = _start_point(cfg, space)
    kwargs = _mc_kwargs(cfg, workers)
    kwargs.pop("kappa", None)
    _forward(kwargs, cfg, {"inner": "inner"})
    rows = []
    for F in cfg["_functions"]:
        rows.extend(ineq.check_martingale_moments(
            space, F, x, cfg["k"], cfg["base_time"], cfg["gaps"], **kwargs))
    return rows, None, ()


def _wrap_angle(theta):
    return math.remainder(theta, TWO_PI)


def _det_row(cfg, space, inequality, testfn, lhs, rhs, margin, verdict,
             equality, note=""):
    return ineq.VerdictReport(
        experiment=cfg["experiment"], inequality=inequality,
        model=_space_spec(space), testfn=testfn, kappa=0.0,
        lhs=float(lhs), lhs_se=0.0, rhs=float(rhs), rhs_se=0.0,
        margin=float(margin), se=0.0,
        z_score=math.inf if margin >= 0 else -math.inf,
        z_crit=cfg.get("z") or 3.0, verdict=verdict, equality=equality,
        n_paths=0, inner=0, seed=cfg.get("seed", 0), note=note)


def _run_cone_holonomy(cfg, space, workers):
    radius = cfg.get("radius") or 1.0
    segments = cfg.get("segments")
    max_loops = cfg.get("loops") or 2
    rows = []
    for loops in range(1, max_loops + 1):
        measured = ms.cone_holonomy(space, radius=radius, segments=segments,
                                    loops=loops)
        expected = _wrap_angle(loops * (TWO_PI - space.length))
        diff = abs(_wrap_angle(measured - expected))
        margin = 1e-9 - diff
        rows.append(_det_row(
            cfg, space, "cone-holonomy", "loops=%d" % loops, measured,
            expected, margin, "pass" if margin >= 0 else "fail",
            equality=True,
            note="transport angle vs %d*(2pi - l) mod 2pi" % loops))
    return rows, None, ()


def _default_direction(space, x0):
    if isinstance(space, ms.ConeSpace):
        return np.array([0.0, 1.0])
    if space.kind == "sphere2":
        d = np.cross(x0, np.array([0.0, 0.0, 1.0]))
        if np.linalg.norm(d) < 1e-9 * space.radius:
            d = np.cross(x0, np.array([0.0, 1.0, 0.0]))
        return d / np.linalg.norm(d)
    if space.dim < 2:
        raise ValueError("parallelogram probes need at least two dimensions")
    d = np.zeros(_point_dim(space))
    d[1] = 1.0
    return d


def _run_cone_parallelogram(cfg, space, workers):
    x0, x1 = cfg["x0"], cfg["x1"]
    segments = cfg.get("segments") or 16
    scales = cfg.get("scales") or tuple(2.0 ** -j for j in range(4, 10))
    direction = cfg.get("direction")
    if direction is None:
        direction = _default_direction(space, x0)
    chain = ms.geodesic_between(space, x0, x1,
                                ps.Partition.uniform(1.0, segments))
    variation = ms.build_parallel_variation(space, chain, direction, scales)
    reports, normalized = ms.variation_defects(variation)
    ratios = ms.parallel_norm_check(variation)

    table = []
    for j, rep in enumerate(reports):
        for a in range(rep.eps.shape[0]):
            table.append((j, variation.scales[j], a,
                          rep.e[a, 0], rep.e[a, 1], rep.e[a, 2], rep.e[a, 3],
                          rep.px[a], rep.pv[a], rep.eps[a], ratios[j]))

    rows = []
    for j in range(len(reports)):
        margin = 1e-3 - float(ratios[j])
        rows.append(_det_row(
            cfg, space, "parallel-norm", "scale=%g" % variation.scales[j],
            ratios[j], 1e-3, margin, "pass" if margin >= 0 else "fail",
            equality=False,
            note="sup relative spread of the variation norm along the chain"))
    # genuine defects shrink with the scale; defects already at roundoff
    # level pass through the floor instead.  The defect ratio divides by
    # the squared displacement scale, so the roundoff floor grows as the
    # smallest scale shrinks.
    floor = max(1e-9, 1024.0 * np.finfo(float).eps
                / min(variation.scales) ** 2)
    decay = max(float(normalized[0] - normalized[-1]),
                floor - float(normalized[-1]))
    rows.append(_det_row(
        cfg, space, "defect-decay", "scales=%g..%g"
        % (variation.scales[0], variation.scales[-1]),
        normalized[-1], normalized[0], decay,
        "pass" if decay >= 0 else "fail", equality=False,
        note="normalized parallelogram defect at the smallest scale vs the"
             " largest"))
    return rows, (DEFECT_COLUMNS, table), ()


def _run_cone_br_probe(cfg, space, workers):
    F = cfg["_functions"][0]
    s = cfg["s"]
    T = F.horizon
    x0 = cfg.get("x0")
    x1 = cfg.get("x1")
    if x0 is None:
        x0 = space.point(1.0, 0.0)
    if x1 is None:
        # keep the default endpoints apex-avoiding on wide cones
        x1 = space.point(1.0, min(0.3 * space.length, 0.5 * math.pi))
    level_count = cfg.get("levels") or 5
    levels = range(3, 3 + level_count)
    kwargs = {}
    if cfg.get("scale") is not None:
        kwargs["scale"] = cfg["scale"]

    def gamma(t):
        return space.interpolate(x0, x1, t / T)

    try:
        est = ms.parallel_slope_estimate(space, F, gamma, s, levels=levels,
                                         **kwargs)
    except ms.ApexTooClose as exc:
        row = _det_row(cfg, space, "parallel-slope", "s=%g" % s, math.nan,
                       math.nan, -1.0, "fail", equality=False,
                       note="apex clearance gate: %s" % exc)
        return [row], None, ()

    vals = est.values
    rel = abs(vals[-1] - vals[-2]) / max(abs(vals[-1]), 1e-12)
    margin = 0.05 - rel
    note = "richardson ladder " + " ".join("%.6g" % v for v in vals) \
        + " at meshes " + " ".join("%.3g" % m for m in est.meshes)
    rows = [_det_row(cfg, space, "parallel-slope", "s=%g" % s, vals[-1],
                     vals[-2], margin,
                     "pass" if margin >= 0 else "inconclusive",
                     equality=False, note=note)]
    return rows, None, ()


_HANDLERS = {
    "r2": _run_r2,
    "r3": _run_r3,
    "r45": _run_r45,
    "r6-frequency": _run_r6,
    "r7-logsob": _run_r7,
    "be-suite": _run_be_suite,
    "finite-frequency": _run_finite_frequency,
    "dimensional": _run_dimensional,
    "girsanov": _run_girsanov,
    "ito-isometry": _run_ito_isometry,
    "martingale-moments": _run_martingale_moments,
    "cone-holonomy": _run_cone_holonomy,
    "cone-parallelogram": _run_cone_parallelogram,
    "cone-br-probe": _run_cone_br_probe,
}


# ---------------------------------------------------------------------------
# output writing


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def _config_comments(cfg):
    """Echo the physics-relevant config keys in file order.

    The output path and worker count are deliberately excluded so a replay
    to a different location reproduces the table byte for byte.
    """
    ordered = sorted((line, key) for key, line in cfg["_lines"].items()
                     if key != "output")
    out = []
    for _, key in ordered:
        value = cfg[key]
        if isinstance(value, np.ndarray):
            text = " ".join(repr(float(v)) for v in value)
        elif isinstance(value, tuple):
            text = ",".join(repr(float(v)) for v in value)
        else:
            text = _fmt(value)
        out.append("%s = %s" % (key, text))
    return out


def _write_table(path, comments, header, rows):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write("# %s\r\n" % line)
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _verdict_row(report):
    return (report.inequality, report.model, report.testfn, report.kappa,
            report.lhs, report.lhs_se, report.rhs, report.rhs_se,
            report.margin, report.z_score, report.verdict, report.n_paths,
            report.seed, report.equality, report.inner, report.note)


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _exit_code(reports):
    verdicts = [r.verdict for r in reports]
    if "fail" in verdicts:
        return 2
    if "pass" in verdicts:
        return 0
    return 3 if verdicts else 0


def _write_manifest(path, cfg, text, workers, output, code, wall):
    manifest = {
        "tool": "pathcurv",
        "version": __version__,
        "experiment": cfg["experiment"],
        "config": text,
        "seed": cfg.get("seed", 0),
        "workers": workers,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "wall_time_s": round(wall, 3),
        "exit_code": code,
        "outputs": [{"path": os.path.abspath(output),
                     "sha256": _sha256(output)}],
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _print_reports(reports):
    for r in reports:
        line = "  [%s] %s %s margin=%s" % (r.verdict.upper(), r.inequality,
                                           r.testfn, "%.6g" % r.margin)
        if r.se > 0:
            line += " (z=%.2f)" % r.z_score
        click.echo(line)


def _resolve_workers(option):
    if option is not None:
        return max(1, int(option))
    return mc.worker_count(1)


def run_config_text(text, workers, output_override=None, echo=True):
    """Run one config; returns (exit_code, manifest_or_None)."""
    cfg, errors = parse_config(text)
    if errors:
        for err in errors:
            click.echo("config error, %s" % err, err=True)
        return 2, None
    output = output_override or cfg["output"]
    space = cfg["_space"]
    handler = _HANDLERS[cfg["experiment"]]
    started = time.time()
    try:
        reports, table, extra_comments = handler(cfg, space, workers)
    except (mg.LadderTooCoarse, ms.ApexTooClose, ValueError) as exc:
        click.echo("run error: %s: %s" % (type(exc).__name__, exc), err=True)
        return 2, None
    wall = time.time() - started

    comments = ["pathcurv %s table" % ("defect" if table else "verdict"),
                "experiment = %s" % cfg["experiment"]]
    comments += [c for c in _config_comments(cfg)
                 if not c.startswith("experiment =")]
    comments += list(extra_comments)
    comments.append("verdict rule: fail iff margin < -z_crit*se;"
                    " inconclusive iff not predicted an equality and"
                    " margin <= z_crit*se")

    if table is not None:
        header, rows = table
        _write_table(output, comments, header, rows)
    else:
        _write_table(output, comments, VERDICT_COLUMNS,
                     [_verdict_row(r) for r in reports])
    code = _exit_code(reports)
    manifest = _write_manifest(output + ".manifest.json", cfg, text, workers,
                               output, code, wall)
    if echo:
        _print_reports(reports)
        counts = {"pass": 0, "fail": 0, "inconclusive": 0}
        for r in reports:
            counts[r.verdict] += 1
        click.echo("%s on %s: %d pass, %d fail, %d inconclusive -> exit %d"
                   % (cfg["experiment"], _space_spec(space), counts["pass"],
                      counts["fail"], counts["inconclusive"], code))
        click.echo("wrote %s" % output)
    return code, manifest


# ---------------------------------------------------------------------------
# commands


@click.group()
@click.version_option(__version__, prog_name="pathcurv")
def main():
    """Monte Carlo checks of curvature bounds on path space."""


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--workers", type=int, default=None,
              help="process count; default PATHCURV_WORKERS or 1")
@click.option("--output", default=None,
              help="override the declared output path")
def verify(config, workers, output):
    """Run the experiment described by CONFIG and write its table."""
    with open(config) as fh:
        text = fh.read()
    code, _ = run_config_text(text, _resolve_workers(workers), output)
    sys.exit(code)


@main.command()
@click.argument("directory", type=click.Path(exists=True, file_okay=False))
@click.option("--workers", type=int, default=None,
              help="process count; default PATHCURV_WORKERS or 1")
def suite(directory, workers):
    """Run every .conf file under DIRECTORY; worst exit code wins (2 > 3 > 0).

    A config that fails to parse is reported and counted as a failure, and
    the remaining runs still execute.
    """
    paths = sorted(p for p in os.listdir(directory) if p.endswith(".conf"))
    resolved = _resolve_workers(workers)
    results = []
    for name in paths:
        full = os.path.join(directory, name)
        click.echo("== %s" % name)
        with open(full) as fh:
            text = fh.read()
        code, _ = run_config_text(text, resolved)
        results.append((name, code))
    click.echo("suite summary:")
    for name, code in results:
        click.echo("  %s -> exit %d" % (name, code))
    codes = [c for _, c in results]
    if 2 in codes:
        sys.exit(2)
    if 3 in codes:
        sys.exit(3)
    sys.exit(0)


@main.command()
@click.option("--model", required=True, help="model spec, e.g. ou:n=1,kf=1")
@click.option("--horizon", "-T", "horizon", type=float, default=1.0,
              show_default=True, help="time horizon")
@click.option("--steps", type=int, default=16, show_default=True)
@click.option("--paths", type=int, default=8, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--start", default=None,
              help="start point, whitespace separated coordinates")
@click.option("--output", required=True, help="trace CSV path")
@click.option("--workers", type=int, default=None)
def sample(model, horizon, steps, paths, seed, start, output, workers):
    """Draw diffusion paths and write them as a long-format trace CSV."""
    try:
        space = geo.parse_model(model)
    except ValueError as exc:
        click.echo("model error: %s" % exc, err=True)
        sys.exit(2)
    if start is not None:
        x = _check_point(space, _parse_point(start), "start")
    else:
        x = _default_start(space)
    if horizon <= 0 or steps <= 0 or paths <= 0:
        click.echo("horizon, steps and paths must be positive", err=True)
        sys.exit(2)
    part = ps.Partition.uniform(horizon, steps)
    ens = ps.sample_paths(space, x, part, paths, seed, "cli/sample",
                          workers=_resolve_workers(workers))
    grid = part.grid()
    dim = ens.points.shape[2]
    header = ("path", "k", "t") + tuple("x%d" % i for i in range(dim))
    rows = []
    for p in range(paths):
        for k in range(len(grid)):
            rows.append((p, k, grid[k]) + tuple(ens.points[p, k]))
    comments = ["pathcurv trace table",
                "model = %s" % space.spec_string(),
                "T = %s, steps = %d, paths = %d, seed = %d"
                % (repr(float(horizon)), steps, paths, seed)]
    _write_table(output, comments, header, rows)
    click.echo("wrote %s" % output)


@main.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--workers", type=int, default=None,
              help="process count for the replay; the table must not depend"
                   " on it")
@click.option("--output", default=None,
              help="where to write the replayed table;"
                   " default <original>.replay")
def replay(manifest, workers, output):
    """Re-run a manifest's config and compare output hashes byte for byte."""
    with open(manifest) as fh:
        record = json.load(fh)
    text = record["config"]
    recorded = record["outputs"][0]
    target = output or recorded["path"] + ".replay"
    resolved = workers if workers is not None else record.get("workers", 1)
    code, fresh = run_config_text(text, _resolve_workers(resolved), target,
                                  echo=False)
    if fresh is None:
        click.echo("replay failed: config no longer parses", err=True)
        sys.exit(2)
    new_hash = fresh["outputs"][0]["sha256"]
    old_hash = recorded["sha256"]
    if new_hash == old_hash:
        click.echo("replay match: %s" % new_hash)
        sys.exit(0)
    click.echo("replay MISMATCH: recorded %s, got %s" % (old_hash, new_hash),
               err=True)
    sys.exit(2)


if __name__ == "__main__":
    main()
