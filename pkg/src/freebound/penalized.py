"""Penalized functional, its minimizers, and the epsilon continuation.

    J_eps(v) = int |grad v|^2 w dx + f_eps(w({v > 0}))
    f_eps(t) = (t - m)^+ / eps

Two minimizers are provided.  ``smoothed_descent`` replaces the indicator
in the measure by a C^1 ramp and runs projected, diagonally scaled descent
while the ramp width is annealed.  ``replace_truncate`` uses only harmonic
solves on a shrinking/growing zero set and the truncation ``u_t``; it needs
no smoothing and serves as an independent cross-check.  Both only ever
accept an iterate that lowers the sharp functional.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .elliptic import (ConvergenceError, SolverParams, StencilOperator, assemble,
                       solve_dirichlet)
from .grid import (BoundaryData, Grid, ScalarField, corner_average, dirichlet_energy,
                   positivity_measure, sample_boundary)
from .regularity import extract_free_boundary
from .weights import WeightField

log = logging.getLogger(__name__)

ALGORITHMS = ("smoothed_descent", "replace_truncate")
STEP_RULES = ("lbfgsb", "projected")


@dataclass(frozen=True)
class PenaltyParams:
    epsilon: float
    m: float
    m_fraction: float = float("nan")

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not self.m > 0:
            raise ValueError(f"m must be positive, got {self.m}")

    @classmethod
    def from_fraction(cls, epsilon: float, m_fraction: float, wf: WeightField) -> "PenaltyParams":
        if not 0 < m_fraction < 1:
            raise ValueError(f"m_fraction must lie strictly inside (0, 1), got {m_fraction}")
        p = cls(epsilon=epsilon, m=m_fraction * wf.total_mass, m_fraction=m_fraction)
        p.validate(wf)
        return p

    def validate(self, wf: WeightField, rel_tol: float = 1e-6) -> None:
        """Reject ``m`` within quadrature noise of ``0`` or ``w(B_1)``."""
        tol = rel_tol * wf.total_mass
        if not tol < self.m < wf.total_mass - tol:
            raise ValueError(f"m = {self.m:g} must lie strictly inside (0, w(B_1) = {wf.total_mass:g})")

    def with_epsilon(self, epsilon: float) -> "PenaltyParams":
        return PenaltyParams(epsilon, self.m, self.m_fraction)


@dataclass(frozen=True)
class EnergyBreakdown:
    dirichlet: float
    penalty: float
    total: float
    measure: float


@dataclass(frozen=True)
class MinimizeConfig:
    algorithm: str = "replace_truncate"
    smoothing_sigma: float = 0.2
    anneal_factor: float = 0.5
    kink_fraction: float = 0.1
    step_rule: str = "lbfgsb"
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 30
    outer_iterations: int = 40
    inner_iterations: int = 1000
    delta_pos: Optional[float] = None
    truncation_scan: int = 24

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if not self.smoothing_sigma > 0:
            raise ValueError("smoothing_sigma must be positive")
        if not 0 < self.anneal_factor < 1:
            raise ValueError("anneal_factor must lie in (0, 1)")
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"step_rule must be one of {STEP_RULES}, got {self.step_rule!r}")
        if not self.kink_fraction > 0:
            raise ValueError("kink_fraction must be positive")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack factor must lie in (0, 1)")
        if self.outer_iterations < 1 or self.inner_iterations < 1:
            raise ValueError("iteration limits must be >= 1")
        if self.delta_pos is not None and self.delta_pos < 0:
            raise ValueError("delta_pos must be nonnegative")


@dataclass
class SolveReport:
    algorithm: str
    start: str
    energy_trace: List[EnergyBreakdown]
    constraint_residual: float
    fb_radius_stats: tuple
    converged: bool
    iterations: int
    solves: int
    m: float
    epsilon: float

    @property
    def final(self) -> EnergyBreakdown:
        return self.energy_trace[-1]

    def to_csv(self) -> str:
        e = self.final
        head = ["algorithm", "start", "epsilon", "m", "measure", "constraint_residual", "dirichlet",
                "penalty", "total", "fb_mean_r", "fb_min_r", "fb_max_r", "converged", "iterations", "solves"]
        row = [self.algorithm, self.start, self.epsilon, self.m, e.measure, self.constraint_residual,
               e.dirichlet, e.penalty, e.total, *self.fb_radius_stats, int(self.converged),
               self.iterations, self.solves]
        return _csv([head, [_fmt(v) for v in row]])

    def trace_csv(self) -> str:
        rows = [["iterate", "dirichlet", "penalty", "total", "measure"]]
        for k, e in enumerate(self.energy_trace):
            rows.append([k] + [_fmt(v) for v in (e.dirichlet, e.penalty, e.total, e.measure)])
        return _csv(rows)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def f_eps(t: float, p: PenaltyParams) -> float:
    """``(t - m)^+ / eps``; the subgradient at the kink is taken as zero."""
    if t < 0:
        raise ValueError("f_eps is defined for t >= 0")
    return max(t - p.m, 0.0) / p.epsilon


def default_delta_pos(bd: BoundaryData) -> float:
    return 1e-8 * bd.sup


def evaluate_J(field: ScalarField, wf: WeightField, p: PenaltyParams, delta_pos: float = 0.0) -> EnergyBreakdown:
    d = dirichlet_energy(field, wf)
    meas = positivity_measure(field, wf, delta_pos)
    pen = f_eps(meas, p)
    return EnergyBreakdown(dirichlet=d, penalty=pen, total=d + pen, measure=meas)


def truncate(field: ScalarField, t: float) -> ScalarField:
    """``(u - t)^+ / (1 - t)`` where ``u <= 1`` and ``u`` where ``u >= 1``."""
    if not 0 <= t < 1:
        raise ValueError(f"truncation level must lie in [0, 1), got {t}")
    u = field.values
    low = np.maximum(u - t, 0.0) / (1.0 - t)
    return field.with_values(np.where(u <= 1.0, low, u))


def find_vr_radius(grid: Grid, wf: WeightField, m: float, iterations: int = 60) -> float:
    """Smallest ``r`` such that the measure of ``{|x| > r}`` (corner counted) is at most ``m``."""
    rad = grid.node_radius()
    live = ~grid.exterior

    def meas(r):
        return wf.measure(corner_average(live & (rad > r)))

    lo, hi = 0.0, 1.0
    if meas(hi) > m:
        raise ValueError(f"m = {m:g} is below the measure resolvable on this grid")
    if meas(lo) <= m:
        raise ValueError(f"m = {m:g} is within quadrature noise of w(B_1) = {wf.total_mass:g}")
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if meas(mid) <= m:
            hi = mid
        else:
            lo = mid
    return hi


def initial_guess_vr(grid: Grid, wf: WeightField, bd: BoundaryData, p: PenaltyParams,
                     solver: SolverParams = SolverParams(), op: Optional[StencilOperator] = None) -> ScalarField:
    """Harmonic function with trace ``g`` vanishing on the central ball whose
    complement has weighted measure at most ``m``; zero inside that ball."""
    op = op or assemble(grid, wf)
    r = find_vr_radius(grid, wf, p.m)
    zero = grid.interior & (grid.node_radius() <= r)
    u, _ = solve_dirichlet(op, sample_boundary(bd, grid), zero, solver)
    return u.with_values(np.where(zero, 0.0, np.maximum(u.values, 0.0)))


# ---------------------------------------------------------------------------
# minimization
# ---------------------------------------------------------------------------

class _Problem:
    """Shared state of one minimization session."""

    def __init__(self, grid, wf, bd, p, cfg, solver, op):
        self.grid, self.wf, self.bd, self.p, self.cfg, self.solver = grid, wf, bd, p, cfg, solver
        self.op = op or assemble(grid, wf)
        self.trace_field = sample_boundary(bd, grid)
        self.delta = default_delta_pos(bd) if cfg.delta_pos is None else cfg.delta_pos
        self.gamma = bd.gamma
        self.solves = 0
        self.inside_mass = wf.node_mass(inside=True)

    def J(self, u: ScalarField) -> EnergyBreakdown:
        return evaluate_J(u, self.wf, self.p, self.delta)

    def clean(self, values) -> ScalarField:
        g = self.grid
        v = np.where(g.interior, np.maximum(values, 0.0), 0.0)
        v = np.where(g.boundary, self.trace_field.values, v)
        return ScalarField(v, g)

    def harmonic(self, zero: Optional[np.ndarray], x0: Optional[ScalarField] = None) -> ScalarField:
        self.solves += 1
        u, _ = solve_dirichlet(self.op, self.trace_field, zero, self.solver, x0)
        vals = u.values if zero is None else np.where(zero, 0.0, u.values)
        return self.clean(vals)

    def zero_set(self, u: ScalarField) -> np.ndarray:
        return self.grid.interior & (u.values <= self.delta)


def _accept(new: EnergyBreakdown, old: EnergyBreakdown) -> bool:
    return new.total < old.total - 1e-12 * max(1.0, abs(old.total))


def _erode(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    n = mask.ndim
    for a in range(n):
        for shift in (1, -1):
            nb = np.roll(mask, shift, axis=a)
            edge = [slice(None)] * n
            edge[a] = 0 if shift == 1 else -1
            nb[tuple(edge)] = False
            out &= nb
    return out


def _fit_level(prob: _Problem, uhat: ScalarField, cap: float = 0.99) -> float:
    """Smallest level (bisected in ``[0, cap]``) whose superlevel set of ``uhat`` has measure ``<= m``."""
    lo, hi = 0.0, cap
    if positivity_measure(uhat, prob.wf, hi) > prob.p.m:
        return cap
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if positivity_measure(uhat, prob.wf, mid) <= prob.p.m:
            hi = mid
        else:
            lo = mid
    return hi


def _truncation_search(prob: _Problem, u: ScalarField):
    """Line search over the truncation level (in units of ``inf g``).

    The scan covers ``(0, max(1/2, t_fit)]`` where ``t_fit`` is the level whose
    superlevel set just fits the measure, so a field with no zero set can
    still be cut down to the constraint.
    """
    gam = prob.gamma
    uhat = u.with_values(u.values / gam)

    def cost(t):
        cand = prob.clean(gam * truncate(uhat, t).values)
        return prob.J(cand).total, cand

    tmin = max(prob.delta / gam, 1e-7)
    ts = np.geomspace(tmin, max(0.5, _fit_level(prob, uhat)), prob.cfg.truncation_scan)
    costs = [cost(t)[0] for t in ts]
    k = int(np.argmin(costs))
    lo = ts[max(k - 1, 0)]
    hi = ts[min(k + 1, len(ts) - 1)]
    best_t, best_c = ts[k], costs[k]
    for _ in range(30):
        m1, m2 = lo + (hi - lo) / 3, hi - (hi - lo) / 3
        c1, c2 = cost(m1)[0], cost(m2)[0]
        if c1 < best_c:
            best_t, best_c = m1, c1
        if c2 < best_c:
            best_t, best_c = m2, c2
        if c1 <= c2:
            hi = m2
        else:
            lo = m1
        if hi - lo < 1e-3 * tmin:
            break
    return best_t, cost(best_t)[1]


def _replace_truncate(prob: _Problem, u: ScalarField):
    J = prob.J(u)
    trace, its, converged = [J], 0, False
    for its in range(1, prob.cfg.outer_iterations + 1):
        moved = False
        # (i) free 1, 2, 4, ... layers of the zero set and solve; an expansion
        # that overshoots the measure is pulled back by the truncation search
        best = None
        zero = prob.zero_set(u)
        shrunk, layers = zero, 0
        while shrunk.any():
            for _ in range(max(layers, 1)):
                shrunk = _erode(shrunk)
            layers = 2 * max(layers, 1)
            cand = prob.harmonic(shrunk if shrunk.any() else None, u)
            if not _accept(prob.J(cand), J):
                cand = _truncation_search(prob, cand)[1]
                if prob.zero_set(cand).any():
                    cand = prob.harmonic(prob.zero_set(cand), cand)
            Jc = prob.J(cand)
            if best is None or Jc.total < best[0].total:
                best = (Jc, cand)
            if layers > prob.grid.N:
                break
        if best is not None and _accept(best[0], J):
            J, u, moved = best[0], best[1], True
            trace.append(J)
        # (ii) truncation at the best level, then reharmonize on the new zero set;
        # the superlevel fit covers fields that truncation cannot reach (u >= inf g)
        for cut in (_truncation_search(prob, u)[1], _level_correction(prob, u)):
            if cut is None:
                continue
            Jt = prob.J(cut)
            if _accept(Jt, J):
                u, J, moved = cut, Jt, True
                trace.append(J)
        if prob.zero_set(u).any():
            cand = prob.harmonic(prob.zero_set(u), u)
            Jc = prob.J(cand)
            if _accept(Jc, J):
                moved = moved or Jc.total < J.total - 1e-9 * max(1.0, abs(J.total))
                u, J = cand, Jc
                trace.append(J)
        if not moved:
            converged = True
            break
    return u, trace, its, converged


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s), 6.0 * s * (1.0 - s)


def _soft_positive(e, kappa):
    """C^1 version of ``max(e, 0)``: quadratic on ``(0, kappa)``; returns value and slope."""
    if e <= 0:
        return 0.0, 0.0
    if e < kappa:
        return e * e / (2 * kappa), e / kappa
    return e - kappa / 2, 1.0


def _level_correction(prob: _Problem, u: ScalarField):
    """Smallest level ``t`` with ``w({u > t}) <= m``, then the harmonic solve on ``{u > t}``."""
    g = prob.grid
    vals = np.unique(u.values[g.interior & (u.values > prob.delta)])
    if vals.size == 0 or positivity_measure(u, prob.wf, prob.delta) <= prob.p.m:
        return None
    lo, hi = 0, vals.size - 1
    if positivity_measure(u, prob.wf, float(vals[hi])) > prob.p.m:
        return None
    while lo < hi:
        mid = (lo + hi) // 2
        if positivity_measure(u, prob.wf, float(vals[mid])) <= prob.p.m:
            hi = mid
        else:
            lo = mid + 1
    return prob.harmonic(prob.zero_set(u) | (g.interior & (u.values <= vals[lo])), u)


def _smoothed_descent(prob: _Problem, u: ScalarField):
    """Descent on the smoothed functional with an annealed ramp width.

    The indicator of ``{v > delta}`` is replaced by a smoothstep of width
    ``sigma`` and the kink of ``(t - m)^+`` by a quadratic of width
    proportional to ``sigma``.  Each stage runs bound-constrained descent on
    the interior values (``v >= 0``; the trace is never a variable), then
    projects back to the sharp problem: a harmonic solve on ``{v <= delta}``
    and, when the measure overshoots ``m``, the smallest superlevel set that
    fits.  A stage result is kept only if it lowers the sharp ``J_eps``.
    """
    from scipy.optimize import minimize

    g, cfg, p = prob.grid, prob.cfg, prob.p
    J = prob.J(u)
    trace, its, converged = [J], 0, False
    interior = g.interior
    fi = np.flatnonzero(interior.ravel())
    hn2 = 2.0 * g.h ** g.n
    K = (prob.op.K[fi][:, fi] * hn2).tocsr()
    fixed = np.where(interior, 0.0, u.values)
    b = (prob.op.K @ fixed.ravel())[fi] * hn2
    D0 = dirichlet_energy(ScalarField(fixed, g), prob.wf)
    mass = prob.inside_mass.ravel()[fi]
    m_fixed = float(np.sum(prob.inside_mass[~interior & (fixed > prob.delta)]))
    sigma = cfg.smoothing_sigma * prob.gamma
    floor = max(prob.delta, 1e-12)
    x = u.values.ravel()[fi].copy()
    last_gain = np.inf

    def objective(x):
        Kx = K @ x
        H, dH = _smoothstep((x - prob.delta) / sigma)
        pen, slope = _soft_positive(float(mass @ H) + m_fixed - p.m, kappa)
        val = 0.5 * float(x @ Kx) + float(b @ x) + D0 + pen / p.epsilon
        return val, Kx + b + mass * dH * (slope / (sigma * p.epsilon))

    def projected_steps(x):
        d = prob.op.diag.ravel()[fi] * hn2
        for _ in range(cfg.inner_iterations):
            f0, grad = objective(x)
            s = 1.0
            for _ in range(cfg.max_backtracks):
                trial = np.maximum(x - s * grad / d, 0.0)
                if objective(trial)[0] <= f0 + cfg.armijo * float(grad @ (trial - x)):
                    break
                s *= cfg.backtrack
            else:
                return x
            if np.max(np.abs(trial - x)) < 1e-14 * prob.gamma:
                return trial
            x = trial
        return x

    for its in range(1, cfg.outer_iterations + 1):
        kappa = cfg.kink_fraction * sigma / prob.gamma * prob.wf.total_mass
        if cfg.step_rule == "lbfgsb":
            x = minimize(objective, x, jac=True, method="L-BFGS-B", bounds=[(0.0, None)] * x.size,
                         options={"maxiter": cfg.inner_iterations}).x
        else:
            x = projected_steps(x)
        v = fixed.copy().ravel()
        v[fi] = x
        v = ScalarField(v.reshape(g.shape), g)
        cands = [prob.harmonic(prob.zero_set(v) if prob.zero_set(v).any() else None, v)]
        fit = _level_correction(prob, cands[0])
        if fit is not None:
            cands.append(fit)
        before = J.total
        for cand in cands:
            Jc = prob.J(cand)
            if _accept(Jc, J):
                u, J = cand, Jc
                trace.append(J)
        last_gain = before - J.total
        x = u.values.ravel()[fi].copy()
        sigma *= cfg.anneal_factor
        if sigma < floor:
            converged = True
            break
    else:
        converged = last_gain <= 1e-9 * max(1.0, abs(J.total))
    return u, trace, its, converged


def minimize_penalized(grid: Grid, wf: WeightField, bd: BoundaryData, p: PenaltyParams,
                       cfg: MinimizeConfig = MinimizeConfig(), solver: SolverParams = SolverParams(),
                       op: Optional[StencilOperator] = None, warm_start: Optional[ScalarField] = None,
                       start: str = "best"):
    """Minimize ``J_eps`` with trace ``g``.

    Candidate starts are the ``v_r`` initializer, the unconstrained
    weighted-harmonic extension of ``g`` and ``warm_start`` (as given and
    reharmonized on its zero set).  ``start="best"`` picks the one with the
    lowest ``J_eps``; ``"v_r"``, ``"harmonic"`` or ``"warm"`` force one.
    Returns ``(field, SolveReport)``.
    """
    p.validate(wf)
    prob = _Problem(grid, wf, bd, p, cfg, solver, op)
    cands = {"v_r": prob.clean(initial_guess_vr(grid, wf, bd, p, solver, prob.op).values),
             "harmonic": prob.harmonic(None)}
    prob.solves += 1
    if warm_start is not None:
        cands["warm"] = prob.clean(warm_start.values)
        cands["warm_polished"] = prob.harmonic(
            prob.zero_set(cands["warm"]) if prob.zero_set(cands["warm"]).any() else None, cands["warm"])
    if start == "best":
        energies = {k: prob.J(v).total for k, v in cands.items()}
        start = min(energies, key=energies.get)
    elif start not in cands:
        raise ValueError(f"start must be 'best' or one of {sorted(cands)}, got {start!r}")
    u0 = cands[start]
    run = _smoothed_descent if cfg.algorithm == "smoothed_descent" else _replace_truncate
    try:
        u, trace, its, converged = run(prob, u0)
    except ConvergenceError as err:
        log.warning("minimization stopped: %s", err)
        u, trace, its, converged = u0, [prob.J(u0)], 0, False
    fb = extract_free_boundary(u, prob.delta)
    final = trace[-1]
    report = SolveReport(algorithm=cfg.algorithm, start=start, energy_trace=trace,
                         constraint_residual=final.measure - p.m, fb_radius_stats=fb.radius_stats,
                         converged=converged, iterations=its, solves=prob.solves, m=p.m, epsilon=p.epsilon)
    return u, report


# ---------------------------------------------------------------------------
# epsilon continuation
# ---------------------------------------------------------------------------

SWEEP_HEADER = ("epsilon", "measure", "dirichlet", "penalty", "residual",
                "fb_mean_r", "fb_min_r", "fb_max_r", "converged")


@dataclass
class SweepRow:
    epsilon: float
    measure: float
    dirichlet: float
    penalty: float
    residual: float
    fb_mean_r: float
    fb_min_r: float
    fb_max_r: float
    converged: bool
    total: float = float("nan")
    probe_lhs: float = float("nan")
    probe_rhs: float = float("nan")
    probe_applicable: bool = False
    field: Optional[ScalarField] = field(default=None, repr=False)

    @property
    def probe_ok(self) -> bool:
        return (not self.probe_applicable) or self.probe_lhs <= self.probe_rhs + 1e-8


@dataclass
class SweepResult:
    rows: List[SweepRow]
    m: float
    measure_tol: float
    eps_star: Optional[float]
    aborted: bool = False
    vr_energy: float = float("nan")

    def to_csv(self) -> str:
        out = [list(SWEEP_HEADER)]
        for r in self.rows:
            out.append([_fmt(getattr(r, k)) if k != "converged" else int(r.converged) for k in SWEEP_HEADER])
        return _csv(out)

    def min_energy_monotone(self, slack: float = 1e-8) -> bool:
        tot = [r.total for r in self.rows if r.converged]
        return all(b >= a - slack for a, b in zip(tot, tot[1:]))

    def summary(self) -> str:
        star = "none" if self.eps_star is None else repr(self.eps_star)
        return (f"rows={len(self.rows)} m={self.m!r} eps_star={star} "
                f"final_residual={self.rows[-1].residual if self.rows else float('nan')!r}"
                f"{' ABORTED' if self.aborted else ''}")


def geometric_schedule(k_max: int = 12, base: float = 0.5) -> List[float]:
    return [base ** k for k in range(k_max + 1)]


def truncation_probe(u: ScalarField, wf: WeightField, p: PenaltyParams, vr_energy: float,
                     gamma: float = 1.0, t: float = 0.01, delta_pos: float = 0.0):
    """Both sides of the small-level energy estimate for the truncation competitor.

    With ``uh = u / gamma`` (so that the trace is at least 1) and the matching
    parameter ``eps * gamma**2``::

        lhs = int_{0<uh<t} |grad uh|^2 w + w({0 < uh < t}) / (eps gamma^2)
        rhs = (2t - t^2) / (1 - t)^2 * int |grad v_r|^2 w / gamma^2

    The first term is computed as the energy of ``min(uh, t)``.  The estimate
    is derived under ``w({uh > t}) > m``; ``applicable`` reports whether that
    hypothesis holds for this field.
    """
    uh = u.with_values(u.values / gamma)
    low = uh.with_values(np.minimum(uh.values, t))
    m_pos = positivity_measure(uh, wf, delta_pos / gamma)
    m_t = positivity_measure(uh, wf, t)
    lhs = dirichlet_energy(low, wf) + (m_pos - m_t) / (p.epsilon * gamma ** 2)
    rhs = (2 * t - t * t) / (1 - t) ** 2 * vr_energy / gamma ** 2
    return lhs, rhs, m_t > p.m


def sweep_epsilon(schedule: Sequence[float], grid: Grid, wf: WeightField, bd: BoundaryData, m: float,
                  cfg: MinimizeConfig = MinimizeConfig(), solver: SolverParams = SolverParams(),
                  measure_tol: Optional[float] = None, probe_t: float = 0.01, keep_fields: bool = False,
                  m_fraction: float = float("nan")) -> SweepResult:
    """Run warm-started minimizations along a strictly decreasing schedule of ``eps``."""
    sched = [float(e) for e in schedule]
    if not sched or any(e <= 0 for e in sched):
        raise ValueError("epsilon schedule must be nonempty and positive")
    if any(b >= a for a, b in zip(sched, sched[1:])):
        raise ValueError("epsilon schedule must be strictly decreasing")
    measure_tol = 0.02 * wf.total_mass if measure_tol is None else measure_tol
    op = assemble(grid, wf)
    base = PenaltyParams(sched[0], m, m_fraction)
    base.validate(wf)
    delta = default_delta_pos(bd) if cfg.delta_pos is None else cfg.delta_pos
    vr = initial_guess_vr(grid, wf, bd, base, solver, op)
    vr_energy = dirichlet_energy(vr, wf)
    rows: List[SweepRow] = []
    fields: List[ScalarField] = []

    def make_row(u, p, converged):
        e = evaluate_J(u, wf, p, delta)
        lhs, rhs, ok = truncation_probe(u, wf, p, vr_energy, bd.gamma, probe_t, delta)
        fb = extract_free_boundary(u, delta)
        return SweepRow(p.epsilon, e.measure, e.dirichlet, e.penalty, e.measure - m, *fb.radius_stats,
                        converged=converged, total=e.total, probe_lhs=lhs, probe_rhs=rhs,
                        probe_applicable=ok, field=u if keep_fields else None)

    warm, aborted = None, False
    for eps in sched:
        p = base.with_epsilon(eps)
        try:
            u, rep = minimize_penalized(grid, wf, bd, p, cfg, solver, op, warm)
        except (ConvergenceError, FloatingPointError) as err:
            log.error("sweep aborted at eps=%g: %s", eps, err)
            aborted = True
            break
        rows.append(make_row(u, p, rep.converged))
        fields.append(u)
        # J_eps(v) is nonincreasing in eps, so a field found later that beats an
        # earlier row on that row's own functional replaces it there
        for k in range(len(rows) - 2, -1, -1):
            cand = make_row(u, base.with_epsilon(rows[k].epsilon), rows[k].converged)
            if not cand.total < rows[k].total - 1e-12 * max(1.0, abs(rows[k].total)):
                break
            rows[k], fields[k] = cand, u
        warm = u
    eps_star = next((r.epsilon for r in rows if abs(r.residual) <= measure_tol), None)
    return SweepResult(rows=rows, m=m, measure_tol=measure_tol, eps_star=eps_star,
                       aborted=aborted, vr_energy=vr_energy)


# ---------------------------------------------------------------------------
# properties of computed minimizers
# ---------------------------------------------------------------------------

def max_principle_bounds(field: ScalarField, bd: BoundaryData):
    """``(min u, max u - max g)`` over all nodes; both should be ~0 or below/above."""
    return float(field.values.min()), float(field.values.max()) - bd.sup


def subsolution_residual(field: ScalarField, op: StencilOperator) -> float:
    """Smallest normalized stencil value ``(L u)_p / diag_p`` over interior nodes,
    divided by ``max |u|`` (a weak subsolution has this >= 0 up to round-off)."""
    scale = max(float(np.abs(field.values).max()), 1e-300)
    return float(op.normalized_residual(field)[op.grid.interior].min()) / scale


def positivity_harmonic_residual(field: ScalarField, op: StencilOperator, delta_pos: float = 0.0):
    """Largest ``|L u| / diag`` relative to ``max |u|`` on interior nodes where ``u``
    and every lattice neighbor exceed ``delta_pos``.  Returns ``(residual, nodes)``;
    the residual is ``nan`` when no such node exists."""
    g = field.grid
    pos = field.values > delta_pos
    inner = pos & g.interior
    for a in range(g.n):
        for shift in (1, -1):
            nb = np.roll(pos, shift, axis=a)
            edge = [slice(None)] * g.n
            edge[a] = 0 if shift == 1 else -1
            nb[tuple(edge)] = False
            inner &= nb
    if not inner.any():
        return float("nan"), 0
    scale = max(float(np.abs(field.values).max()), 1e-300)
    return float(np.abs(op.normalized_residual(field)[inner]).max()) / scale, int(inner.sum())
