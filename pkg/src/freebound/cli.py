"""Command line driver: ``freebound {solve,sweep,verify,weights} --config FILE``.

The config is flat ``key = value`` text; dotted keys group related settings::

    dimension = 2
    resolution = 129
    weight.family = power
    weight.beta = -1
    boundary.g = 1
    m_fraction = 0.5
    epsilon.schedule = geometric
    epsilon.k_max = 12
    algorithm = replace_truncate

Exit codes: 0 success, 2 invalid config, 3 non-convergence, 4 failed check.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .elliptic import ConvergenceError, SolverParams, assemble
from .grid import BoundaryData, ScalarField, build_grid, read_field, write_field
from .penalized import (ALGORITHMS, MinimizeConfig, PenaltyParams, geometric_schedule, max_principle_bounds,
                        minimize_penalized, positivity_harmonic_residual, subsolution_residual, sweep_epsilon,
                        default_delta_pos)
from .regularity import campanato_decay, free_boundary_point, holder_seminorm, verify_harnack_on_solution
from .weights import BallSampler, WeightSpec, build_weight_field, check_admissibility, estimate_a2

log = logging.getLogger("freebound")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_CHECK = 0, 2, 3, 4

_FLOAT_KEYS = {
    "weight.value", "weight.beta", "weight.alpha", "weight.s", "m_fraction", "epsilon.value",
    "minimize.smoothing_sigma", "minimize.anneal_factor", "minimize.kink_fraction", "minimize.delta_pos",
    "solver.tolerance", "sweep.measure_tol", "sweep.probe_t", "verify.holder_beta", "verify.holder_K",
}
_INT_KEYS = {
    "dimension", "resolution", "epsilon.k_max", "minimize.outer_iterations", "minimize.inner_iterations",
    "minimize.truncation_scan", "solver.max_iterations", "seed", "a2.center_level", "a2.radius_levels",
    "a2.n_random", "verify.pairs", "verify.harnack_balls",
}
_STR_KEYS = {"weight.family", "weight.points", "weight.segments", "boundary.g", "epsilon.schedule",
             "algorithm", "minimize.step_rule", "output"}
KNOWN_KEYS = _FLOAT_KEYS | _INT_KEYS | _STR_KEYS


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class RunConfig:
    dimension: int = 2
    resolution: int = 129
    weight: WeightSpec = field(default_factory=WeightSpec)
    boundary: BoundaryData = field(default_factory=BoundaryData)
    m_fraction: float = 0.5
    schedule: List[float] = field(default_factory=lambda: geometric_schedule(12))
    epsilon: float = 2.0 ** -8
    minimize: MinimizeConfig = field(default_factory=MinimizeConfig)
    solver: SolverParams = field(default_factory=SolverParams)
    output: str = "out"
    seed: int = 0
    measure_tol: float = 0.02
    probe_t: float = 0.01
    a2_center_level: int = 2
    a2_radius_levels: int = 4
    a2_n_random: int = 0
    holder_K: float = 0.5
    holder_beta: float = 0.5
    pairs: int = 20000
    harnack_balls: int = 16


def _parse_points(text: str, key: str, width: Optional[int] = None) -> tuple:
    out = []
    for chunk in filter(None, (c.strip() for c in text.split(";"))):
        try:
            vals = tuple(float(v) for v in chunk.split(","))
        except ValueError:
            raise ConfigError(key, f"cannot parse {chunk!r} as comma-separated numbers") from None
        if width is not None and len(vals) != width:
            raise ConfigError(key, f"expected {width} coordinates per entry, got {len(vals)}")
        out.append(vals)
    return tuple(out)


def parse_config(text: str) -> RunConfig:
    """Parse and validate config text.  Every failure raises ``ConfigError`` naming the key."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";;"),
                                   inline_comment_prefixes=("#",))
    try:
        cp.read_string("[run]\n" + text)
    except configparser.DuplicateOptionError as err:
        raise ConfigError(err.option, "given more than once") from None
    except configparser.Error as err:
        raise ConfigError("config", str(err).splitlines()[0]) from None
    raw = dict(cp["run"])
    for key in raw:
        if key not in KNOWN_KEYS:
            raise ConfigError(key, "unknown key")
    vals = {}
    for key, text_val in raw.items():
        text_val = text_val.strip()
        try:
            if key in _FLOAT_KEYS:
                vals[key] = float(text_val)
                if not math.isfinite(vals[key]):
                    raise ValueError
            elif key in _INT_KEYS:
                vals[key] = int(text_val)
            else:
                vals[key] = text_val
        except ValueError:
            raise ConfigError(key, f"invalid value {text_val!r}") from None

    cfg = RunConfig()
    cfg.dimension = vals.get("dimension", 2)
    if cfg.dimension not in (2, 3):
        raise ConfigError("dimension", "must be 2 or 3")
    cfg.resolution = vals.get("resolution", 129)
    if cfg.resolution % 2 == 0 or cfg.resolution < 17:
        raise ConfigError("resolution", "must be odd and at least 17")

    if "weight.family" not in vals:
        raise ConfigError("weight.family", "missing")
    n = cfg.dimension
    wkw = {"family": vals["weight.family"]}
    for k in ("value", "beta", "alpha", "s"):
        if f"weight.{k}" in vals:
            wkw[k] = vals[f"weight.{k}"]
    if "weight.points" in vals:
        wkw["points"] = _parse_points(vals["weight.points"], "weight.points", n)
    if "weight.segments" in vals:
        wkw["segments"] = _parse_points(vals["weight.segments"], "weight.segments", 2 * n)
    try:
        cfg.weight = WeightSpec(**wkw)
        cfg.weight.check_dimension(n)
    except ValueError as err:
        raise ConfigError("weight." + ("family" if "family" in str(err) else _guess_weight_key(err)),
                          str(err)) from None

    cfg.boundary = BoundaryData(vals.get("boundary.g", "1"), n)
    try:
        if not cfg.boundary.gamma > 0:
            raise ConfigError("boundary.g", f"g must be positive on the sphere (inf g = {cfg.boundary.gamma:g})")
    except (ValueError, TypeError, SyntaxError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError("boundary.g", f"cannot evaluate expression: {err}") from None

    cfg.m_fraction = vals.get("m_fraction", 0.5)
    if not 0 < cfg.m_fraction < 1:
        raise ConfigError("m_fraction", f"must lie strictly inside (0, 1), got {cfg.m_fraction}")

    sched = vals.get("epsilon.schedule", "geometric")
    if sched == "geometric":
        k_max = vals.get("epsilon.k_max", 12)
        if k_max < 0:
            raise ConfigError("epsilon.k_max", "must be >= 0")
        cfg.schedule = geometric_schedule(k_max)
    else:
        try:
            cfg.schedule = [float(v) for v in sched.split(",") if v.strip()]
        except ValueError:
            raise ConfigError("epsilon.schedule", "expected 'geometric' or a comma-separated list") from None
        if not cfg.schedule or any(not e > 0 for e in cfg.schedule):
            raise ConfigError("epsilon.schedule", "entries must be positive")
        if any(b >= a for a, b in zip(cfg.schedule, cfg.schedule[1:])):
            raise ConfigError("epsilon.schedule", "must be strictly decreasing")
    cfg.epsilon = vals.get("epsilon.value", cfg.schedule[-1])
    if not cfg.epsilon > 0:
        raise ConfigError("epsilon.value", "must be positive")

    mkw = {}
    if "algorithm" in vals:
        if vals["algorithm"] not in ALGORITHMS:
            raise ConfigError("algorithm", f"must be one of {ALGORITHMS}")
        mkw["algorithm"] = vals["algorithm"]
    for k in ("smoothing_sigma", "anneal_factor", "kink_fraction", "step_rule", "outer_iterations",
              "inner_iterations", "delta_pos", "truncation_scan"):
        if f"minimize.{k}" in vals:
            mkw[k] = vals[f"minimize.{k}"]
    try:
        cfg.minimize = MinimizeConfig(**mkw)
    except ValueError as err:
        bad = next((k for k in mkw if k in str(err)), "algorithm")
        raise ConfigError("algorithm" if bad == "algorithm" else f"minimize.{bad}", str(err)) from None

    skw = {}
    if "solver.tolerance" in vals:
        skw["tolerance"] = vals["solver.tolerance"]
    if "solver.max_iterations" in vals:
        skw["max_iterations"] = vals["solver.max_iterations"]
    try:
        cfg.solver = SolverParams(**skw)
    except ValueError as err:
        raise ConfigError("solver.tolerance" if "tolerance" in str(err) else "solver.max_iterations",
                          str(err)) from None

    cfg.output = vals.get("output", "out")
    cfg.seed = vals.get("seed", 0)
    cfg.measure_tol = vals.get("sweep.measure_tol", 0.02)
    if not cfg.measure_tol > 0:
        raise ConfigError("sweep.measure_tol", "must be positive")
    cfg.probe_t = vals.get("sweep.probe_t", 0.01)
    if not 0 < cfg.probe_t < 1:
        raise ConfigError("sweep.probe_t", "must lie in (0, 1)")
    cfg.a2_center_level = vals.get("a2.center_level", 2)
    cfg.a2_radius_levels = vals.get("a2.radius_levels", 4)
    cfg.a2_n_random = vals.get("a2.n_random", 0)
    for k in ("a2.center_level", "a2.radius_levels", "a2.n_random"):
        if vals.get(k, 1) < 0:
            raise ConfigError(k, "must be >= 0")
    cfg.holder_K = vals.get("verify.holder_K", 0.5)
    if not 0 < cfg.holder_K < 1:
        raise ConfigError("verify.holder_K", "must lie in (0, 1)")
    cfg.holder_beta = vals.get("verify.holder_beta", 0.5)
    if not 0 < cfg.holder_beta < 1:
        raise ConfigError("verify.holder_beta", "must lie in (0, 1)")
    cfg.pairs = vals.get("verify.pairs", 20000)
    cfg.harnack_balls = vals.get("verify.harnack_balls", 16)
    if cfg.pairs < 1 or cfg.harnack_balls < 1:
        raise ConfigError("verify.pairs" if cfg.pairs < 1 else "verify.harnack_balls", "must be >= 1")
    return cfg


def _guess_weight_key(err) -> str:
    msg = str(err)
    for k in ("beta", "alpha", "value", "points", "segments", "scale", "shift"):
        if k in msg:
            return k
    if "point" in msg or "segment" in msg:
        return "points"
    return "s" if "extension" in msg else "family"


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as err:
        raise ConfigError("config", f"cannot read {path}: {err.strerror}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _setup(cfg: RunConfig):
    grid = build_grid(cfg.dimension, cfg.resolution)
    wf = build_weight_field(cfg.weight, grid)
    return grid, wf


def _write(out: str, name: str, text: str) -> str:
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, name)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path


def cmd_solve(cfg: RunConfig, out: str) -> int:
    grid, wf = _setup(cfg)
    p = PenaltyParams.from_fraction(cfg.epsilon, cfg.m_fraction, wf)
    try:
        u, rep = minimize_penalized(grid, wf, cfg.boundary, p, cfg.minimize, cfg.solver)
    except ConvergenceError as err:
        log.error("solve failed: %s", err)
        if err.field is not None:
            os.makedirs(out, exist_ok=True)
            write_field(err.field, os.path.join(out, "field_best.txt"))
        return EXIT_NONCONVERGED
    os.makedirs(out, exist_ok=True)
    write_field(u, os.path.join(out, "field.txt"))
    _write(out, "report.csv", rep.to_csv())
    _write(out, "trace.csv", rep.trace_csv())
    e = rep.final
    print(f"solve: measure={e.measure!r} m={p.m!r} residual={rep.constraint_residual!r} "
          f"total={e.total!r} fb_mean_r={rep.fb_radius_stats[0]!r} converged={rep.converged}")
    return EXIT_OK if rep.converged else EXIT_NONCONVERGED


def cmd_sweep(cfg: RunConfig, out: str) -> int:
    grid, wf = _setup(cfg)
    p = PenaltyParams.from_fraction(cfg.schedule[0], cfg.m_fraction, wf)
    res = sweep_epsilon(cfg.schedule, grid, wf, cfg.boundary, p.m, cfg.minimize, cfg.solver,
                        measure_tol=cfg.measure_tol * wf.total_mass, probe_t=cfg.probe_t,
                        m_fraction=cfg.m_fraction)
    _write(out, "sweep.csv", res.to_csv())
    print("sweep: " + res.summary())
    if res.aborted:
        return EXIT_NONCONVERGED
    return EXIT_OK if all(r.converged for r in res.rows) else EXIT_NONCONVERGED


def _check_row(rows, name, ok, value, threshold):
    status = "skipped" if ok is None else ("pass" if ok else "fail")
    rows.append([name, status, repr(float(value)), repr(float(threshold))])


def cmd_verify(cfg: RunConfig, out: str, field_path: str) -> int:
    grid, wf = _setup(cfg)
    try:
        u = read_field(field_path, grid)
    except ValueError as err:
        raise ConfigError("field", str(err)) from None
    op = assemble(grid, wf)
    bd = cfg.boundary
    delta = default_delta_pos(bd) if cfg.minimize.delta_pos is None else cfg.minimize.delta_pos
    tol = cfg.solver.tolerance
    rows = []
    lo, over = max_principle_bounds(u, bd)
    _check_row(rows, "max_principle_lower", lo >= -1e-12, lo, -1e-12)
    _check_row(rows, "max_principle_upper", over <= 1e-10, over, 1e-10)
    sub = subsolution_residual(u, op)
    _check_row(rows, "subsolution", sub >= -1e-8, sub, -1e-8)
    res, count = positivity_harmonic_residual(u, op, delta)
    _check_row(rows, "positivity_harmonic", None if count == 0 else res <= 10 * tol,
               res, 10 * tol)

    center = free_boundary_point(u, delta)
    if center is None:
        center = np.zeros(grid.n)
    try:
        tr = campanato_decay(u, wf, center, lam=0.49, depth=12)
        ok = None if tr.constant else bool(tr.fitted_alpha > 0)
        _check_row(rows, "campanato_alpha", ok, tr.fitted_alpha if not tr.constant else float("nan"), 0.0)
    except ValueError:
        _check_row(rows, "campanato_alpha", None, float("nan"), 0.0)

    hr = verify_harnack_on_solution(u, op, delta, seed=cfg.seed, n_balls=cfg.harnack_balls, params=cfg.solver)
    if hr.skipped:
        _check_row(rows, "harnack_ratio", None, float("nan"), 1.0)
    else:
        _check_row(rows, "harnack_ratio", hr.worst_ratio >= 1.0 and math.isfinite(hr.worst_ratio),
                   hr.worst_ratio, 1.0)
        _check_row(rows, "harnack_local_harmonic", hr.max_replacement_change <= 1e-6,
                   hr.max_replacement_change, 1e-6)

    he = holder_seminorm(u, cfg.holder_K, cfg.holder_beta, cfg.pairs, cfg.seed, wf)
    _check_row(rows, "holder_seminorm", math.isfinite(he.seminorm), he.seminorm, float("inf"))

    rep = estimate_a2(cfg.weight, _sampler(cfg), grid.n)
    _check_row(rows, "a2_estimate", math.isfinite(rep.a2_estimate) and rep.a2_estimate >= 1 - 1e-12,
               rep.a2_estimate, 1.0)

    _write(out, "verification.csv", _csv([["check", "status", "value", "threshold"]] + rows))
    failed = [r[0] for r in rows if r[1] == "fail"]
    print("verify: " + ("all checks passed" if not failed else "failed: " + ", ".join(failed)))
    return EXIT_CHECK if failed else EXIT_OK


def _sampler(cfg: RunConfig) -> BallSampler:
    return BallSampler(center_level=cfg.a2_center_level, radius_levels=cfg.a2_radius_levels,
                       n_random=cfg.a2_n_random, seed=cfg.seed)


def cmd_weights(cfg: RunConfig, out: str) -> int:
    grid, wf = _setup(cfg)
    rep = estimate_a2(cfg.weight, _sampler(cfg), grid.n)
    if grid.n == 2:
        # superlevel sets of 1 - |x| are the centered discs
        samples = [ScalarField(np.where(grid.exterior, 0.0, 1.0 - grid.node_radius()), grid)]
        rep = check_admissibility(cfg.weight, grid, samples, report=rep, wf=wf)
    else:
        log.warning("isoperimetric column needs level-set perimeters, available in 2D only")
    _write(out, "a2_report.csv", rep.to_csv())
    print(f"weights: a2={rep.a2_estimate!r} D={rep.doubling_D!r} c1={rep.c1_estimate!r} "
          f"tau={rep.tau_lower_bound!r} C0={rep.isoperimetric_C0!r}")
    return EXIT_OK


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="freebound", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (("solve", "minimize the penalized functional at one epsilon"),
                           ("sweep", "epsilon continuation"),
                           ("verify", "property checks on a field dump"),
                           ("weights", "A2 and admissibility estimates for the configured weight")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True, help="key = value config file")
        sp.add_argument("--out", help="output directory (overrides the config 'output' key)")
        sp.add_argument("--seed", type=int, help="sampler seed (overrides the config)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "verify":
            sp.add_argument("--field", required=True, help="field dump written by 'solve'")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        out = args.out or cfg.output
        if args.command == "solve":
            return cmd_solve(cfg, out)
        if args.command == "sweep":
            return cmd_sweep(cfg, out)
        if args.command == "verify":
            return cmd_verify(cfg, out, args.field)
        return cmd_weights(cfg, out)
    except ConfigError as err:
        print(f"error: invalid config: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
