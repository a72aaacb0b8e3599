"""Regularity diagnostics: Campanato decay, Hölder seminorms, Harnack ratios
on solutions, free-boundary extraction, and the constants of the
small-oscillation iteration.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import List, Optional

import numpy as np
from scipy import ndimage

from .grid import Grid, ScalarField, corner_reduce

_TINY = 100 * np.finfo(float).eps


def _ball_nodes(grid: Grid, center, radius):
    x = grid.node_coords()
    c = np.asarray(center, dtype=float).reshape((-1,) + (1,) * grid.n)
    return np.sqrt(((x - c) ** 2).sum(axis=0)) <= radius


# ---------------------------------------------------------------------------
# Campanato decay
# ---------------------------------------------------------------------------

@dataclass
class CampanatoTrace:
    center: tuple
    lam: float
    rho0: float
    levels: List[tuple]  # (j, radius, a_j, d_j, |a_j - a_{j-1}|)
    fitted_alpha: float
    constant: bool
    used_levels: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["j", "a_j", "d_j"])
        for j, _, a, d, _ in self.levels:
            w.writerow([j, repr(float(a)), repr(float(d))])
        return buf.getvalue()


def campanato_decay(field: ScalarField, wf, center=None, lam: float = 0.5, depth: int = 8,
                    rho0: Optional[float] = None, op=None, use_replacement: bool = False,
                    params=None) -> CampanatoTrace:
    """Weighted mean-square deviations on the balls ``B_{rho0 lam^j}(center)``.

    ``d_j = w(B)^{-1} int_B |u - a_j|^2 w`` with ``a_j`` the weighted mean on
    the ball (or, with ``use_replacement``, the central value of the
    weighted-harmonic replacement on that ball, which needs ``op``).
    ``fitted_alpha`` is the least-squares slope of ``log d_j`` against
    ``j log lam`` over levels with ``d_j`` above the round-off floor.
    Levels whose radius drops below ``4h`` are dropped.
    """
    g = field.grid
    if not 0 < lam < 1:
        raise ValueError("lam must lie in (0, 1)")
    c = np.zeros(g.n) if center is None else np.asarray(center, dtype=float)
    rho0 = 1.0 - float(np.linalg.norm(c)) if rho0 is None else float(rho0)
    if rho0 <= 0 or np.linalg.norm(c) + rho0 > 1.0 + 1e-12:
        raise ValueError("the top-level ball must lie inside the unit ball")
    mass = wf.node_mass()
    u = field.values
    scale = max(float(np.max(u ** 2)), 1e-300)
    levels = []
    prev = None
    for j in range(depth + 1):
        rho = rho0 * lam ** j
        if rho < 4 * g.h:
            break
        ball = _ball_nodes(g, c, rho) & g.interior
        m = mass[ball]
        if m.sum() <= 0:
            break
        if use_replacement:
            from .elliptic import harmonic_replacement

            if op is None:
                raise ValueError("use_replacement needs the stencil operator")
            kw = {} if params is None else {"params": params}
            rep = harmonic_replacement(field, c, rho * (1 - 1e-9), op, **kw)
            idx = tuple(np.clip(np.rint((c + 1) / g.h).astype(int), 0, g.N - 1))
            a = float(rep.values[idx])
        else:
            a = float(np.sum(m * u[ball]) / m.sum())
        d = float(np.sum(m * (u[ball] - a) ** 2) / m.sum())
        levels.append((j, rho, a, d, float("nan") if prev is None else abs(a - prev)))
        prev = a
    if len(levels) < 2:
        raise ValueError(f"fewer than two usable levels (radius falls below 4h = {4 * g.h:g})")
    ds = np.array([lv[3] for lv in levels])
    constant = bool(np.all(ds <= _TINY * scale))
    ok = ds > _TINY * scale
    alpha = float("nan")
    if ok.sum() >= 2:
        js = np.array([lv[0] for lv in levels])[ok]
        alpha = float(np.polyfit(js * math.log(lam), np.log(ds[ok]), 1)[0])
    return CampanatoTrace(center=tuple(c), lam=lam, rho0=rho0, levels=levels,
                          fitted_alpha=alpha, constant=constant, used_levels=int(ok.sum()))


# ---------------------------------------------------------------------------
# Hölder seminorm
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HolderEstimate:
    seminorm: float
    l2_norm: float
    ratio: float
    pairs: int
    exhaustive: bool


def holder_seminorm(field: ScalarField, K: float = 0.5, beta: float = 0.5, pair_sample: int = 20000,
                    seed: int = 0, wf=None, chunk: int = 4096) -> HolderEstimate:
    """Max of ``|u(x) - u(y)| / |x - y|^beta`` over node pairs in ``B_K``.

    All pairs are used when there are at most ``pair_sample`` of them;
    otherwise pairs are drawn in fixed-size chunks from ``seed``, so a larger
    sample always contains a smaller one.  ``ratio`` divides by
    ``||u||_{L^2(B_1, w)}`` when ``wf`` is given.
    """
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    if not 0 < K < 1:
        raise ValueError("K must lie in (0, 1)")
    g = field.grid
    mask = g.interior & (g.node_radius() <= K)
    pts = g.node_coords()[:, mask].T
    vals = field.values[mask]
    k = len(vals)
    total = k * (k - 1) // 2
    best = 0.0
    if total <= pair_sample:
        for i in range(k - 1):
            dist = np.sqrt(((pts[i + 1:] - pts[i]) ** 2).sum(axis=1))
            q = np.abs(vals[i + 1:] - vals[i]) / dist ** beta
            if q.size:
                best = max(best, float(q.max()))
        used, exhaustive = total, True
    else:
        rng = np.random.default_rng(seed)
        used = 0
        while used < pair_sample:
            ij = rng.integers(0, k, size=(chunk, 2))
            ij = ij[: pair_sample - used]
            i, j = ij[:, 0], ij[:, 1]
            keep = i != j
            dist = np.sqrt(((pts[i[keep]] - pts[j[keep]]) ** 2).sum(axis=1))
            q = np.abs(vals[i[keep]] - vals[j[keep]]) / dist ** beta
            if q.size:
                best = max(best, float(q.max()))
            used += len(ij)
        exhaustive = False
    l2 = float("nan")
    ratio = float("nan")
    if wf is not None:
        l2 = math.sqrt(float(np.sum(wf.node_mass(inside=True) * field.values ** 2)))
        ratio = best / l2 if l2 > 0 else float("nan")
    return HolderEstimate(seminorm=best, l2_norm=l2, ratio=ratio, pairs=used, exhaustive=exhaustive)


# ---------------------------------------------------------------------------
# Harnack on the positivity set
# ---------------------------------------------------------------------------

@dataclass
class HarnackReport:
    ratios: List[float]
    centers: List[tuple]
    radii: List[float]
    worst_ratio: float
    mean_ratio: float
    max_replacement_change: float
    skipped: bool


def verify_harnack_on_solution(field: ScalarField, op, delta_pos: float = 0.0, seed: int = 0,
                               n_balls: int = 16, params=None, harmonic_tol: float = 1e-6) -> HarnackReport:
    """Sup/inf ratios on half balls of sampled balls inside ``{u > delta_pos}``.

    For each ball the weighted-harmonic replacement is computed first; its
    largest change relative to ``max u`` is reported (local harmonicity), and
    the ratio is taken on the replaced field.
    """
    from .elliptic import SolverParams, harmonic_ratio_on_ball

    g = field.grid
    pos = (field.values > delta_pos) & g.interior
    # distance (in h) to the nearest node that is not in the positivity set
    dist = ndimage.distance_transform_edt(pos) * g.h
    rad = g.node_radius()
    reach = np.minimum(dist - g.h, 1.0 - rad - g.h)
    ok = pos & (reach >= 4 * g.h)
    if not ok.any():
        return HarnackReport([], [], [], float("nan"), float("nan"), float("nan"), True)
    cand = np.argwhere(ok)
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(cand), size=min(n_balls, len(cand)), replace=False)
    params = params or SolverParams()
    ratios, centers, radii, change = [], [], [], 0.0
    x = g.node_coords()
    for p in sorted(pick):
        idx = tuple(cand[p])
        c = x[(slice(None),) + idx]
        r = float(reach[idx])
        ratio, delta = harmonic_ratio_on_ball(field, op, c, r, params)
        ratios.append(ratio)
        centers.append(tuple(float(v) for v in c))
        radii.append(r)
        change = max(change, delta)
    scale = max(float(np.abs(field.values).max()), 1e-300)
    return HarnackReport(ratios, centers, radii, float(max(ratios)), float(np.mean(ratios)),
                         change / scale, False)


# ---------------------------------------------------------------------------
# Free boundary
# ---------------------------------------------------------------------------

@dataclass
class FreeBoundary:
    cells: np.ndarray  # (k, n) integer cell indices
    radii: np.ndarray
    radius_stats: tuple  # (mean, min, max)
    empty: bool

    @property
    def raggedness(self) -> float:
        return self.radius_stats[2] - self.radius_stats[1] if not self.empty else float("nan")


def extract_free_boundary(field: ScalarField, delta_pos: float = 0.0) -> FreeBoundary:
    """Cells inside the ball with a corner above ``delta_pos`` and a corner at or below it."""
    g = field.grid
    pos = field.values > delta_pos
    straddle = corner_reduce(pos, np.logical_or) & ~corner_reduce(pos, np.logical_and) & g.cells_inside
    cells = np.argwhere(straddle)
    if len(cells) == 0:
        nan = float("nan")
        return FreeBoundary(cells, np.zeros(0), (nan, nan, nan), True)
    radii = g.cell_radius()[straddle]
    return FreeBoundary(cells, radii, (float(radii.mean()), float(radii.min()), float(radii.max())), False)


def free_boundary_point(field: ScalarField, delta_pos: float = 0.0) -> Optional[np.ndarray]:
    """Center of the free-boundary cell whose radius is closest to the mean radius (``None`` if empty)."""
    fb = extract_free_boundary(field, delta_pos)
    if fb.empty:
        return None
    k = int(np.argmin(np.abs(fb.radii - fb.radius_stats[0])))
    return -1.0 + field.grid.h * (fb.cells[k] + 0.5)


# ---------------------------------------------------------------------------
# constants of the small-oscillation iteration
# ---------------------------------------------------------------------------

ALPHA_CLAMP = (1e-3, 0.999)


@dataclass(frozen=True)
class RegularityConstants:
    n: int
    epsilon: float
    C_P: float
    D: float
    c1: float
    Cbar: float
    alpha: float
    alpha_raw: float
    C_star: float
    lam: float
    eta0: float
    eta_bound_energy: float
    eta_bound_measure: float

    def radius_condition(self):
        """``(lhs, rhs)`` of ``4 Cbar^2 (D + 1) lam^(2 alpha) <= lam^alpha / 2``."""
        lhs = 4 * self.Cbar ** 2 * (self.D + 1) * self.lam ** (2 * self.alpha)
        return lhs, 0.5 * self.lam ** self.alpha

    def eta_condition(self):
        """``(eta0, bound)`` with the bound recomputed from the stored inputs."""
        b1 = 1.0 / (self.C_star * self.lam ** (2 * (1 - self.alpha / 2)))
        b2 = self.c1 / (4 * self.C_star) * self.lam ** self.alpha * (2 * self.lam) ** (2 * self.n)
        return self.eta0, min(b1, b2)

    def satisfied(self) -> bool:
        lhs, rhs = self.radius_condition()
        eta, bound = self.eta_condition()
        return lhs <= rhs and 0 < eta <= bound and eta < 1 and 0 < self.lam < 0.25

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in asdict(self).items())


def compute_constants(a2report, epsilon: float, C_P: float, Cbar: float, alpha: float,
                      n: int = 2, k_max: int = 200) -> RegularityConstants:
    """Constants of the small-oscillation iteration.

    ``C_star = C_P D / (4 eps)``; ``lam`` is the largest ``2^-k < 1/4`` with
    ``4 Cbar^2 (D+1) lam^(2 alpha) <= lam^alpha / 2``; ``eta0`` is the minimum
    of ``1 / (C_star lam^(2 - alpha))`` and
    ``c1 / (4 C_star) lam^alpha (|B_lam| / |B_1/2|)^2``, capped at 1/2 so
    that it stays in ``(0, 1)``.  ``alpha`` is clamped to ``[1e-3, 0.999]``.
    """
    if not epsilon > 0 or not C_P > 0 or not Cbar > 0:
        raise ValueError("epsilon, C_P and Cbar must be positive")
    D, c1 = float(a2report.doubling_D), float(a2report.c1_estimate)
    a = float(np.clip(alpha, *ALPHA_CLAMP))
    C_star = C_P * D / (4 * epsilon)
    lam = None
    for k in range(3, k_max + 1):
        t = 2.0 ** -k
        if 4 * Cbar ** 2 * (D + 1) * t ** (2 * a) <= 0.5 * t ** a:
            lam = t
            break
    if lam is None:
        t = 2.0 ** -k_max
        raise ValueError(
            f"no dyadic radius down to 2^-{k_max} satisfies 4*Cbar^2*(D+1)*lam^(2a) <= lam^a/2 "
            f"(at 2^-{k_max}: {4 * Cbar ** 2 * (D + 1) * t ** (2 * a):.3e} > {0.5 * t ** a:.3e})")
    b1 = 1.0 / (C_star * lam ** (2 * (1 - a / 2)))
    b2 = c1 / (4 * C_star) * lam ** a * (2 * lam) ** (2 * n)
    eta0 = min(b1, b2, 0.5)
    if not eta0 >= np.finfo(float).tiny:
        raise ValueError(f"eta0 underflows double precision (lam = 2^-{k}, alpha = {a:g})")
    return RegularityConstants(n=n, epsilon=epsilon, C_P=C_P, D=D, c1=c1, Cbar=Cbar, alpha=a,
                               alpha_raw=float(alpha), C_star=C_star, lam=lam, eta0=eta0,
                               eta_bound_energy=b1, eta_bound_measure=b2)


def empirical_holder_inputs(op, wf, params=None, beta_pairs: int = 20000, seed: int = 0):
    """Empirical ``(alpha, Cbar, alpha_raw)`` from positive weighted-harmonic test fields.

    The test fields are the extensions of ``2 + x_i`` from the sphere.
    ``alpha_raw`` is the smallest Campanato fit at the origin; ``Cbar`` is the
    largest value of ``(sup |h| + [h]_alpha) / (avg h^2 w)^{1/2}`` on ``B_1/2``.
    """
    from .elliptic import SolverParams, solve_dirichlet

    g = op.grid
    params = params or SolverParams()
    x = g.node_coords()
    rad = np.maximum(g.node_radius(), 1e-300)
    fits, cbars = [], []
    for i in range(g.n):
        bd = np.where(g.boundary, 2.0 + x[i] / rad, 0.0)
        h, _ = solve_dirichlet(op, ScalarField(bd, g), None, params)
        tr = campanato_decay(h, wf, lam=0.5, depth=12)
        fits.append(tr.fitted_alpha)
    alpha_raw = float(np.nanmin(fits))
    a = float(np.clip(alpha_raw, *ALPHA_CLAMP))
    mass = wf.node_mass()
    for i in range(g.n):
        bd = np.where(g.boundary, 2.0 + x[i] / rad, 0.0)
        h, _ = solve_dirichlet(op, ScalarField(bd, g), None, params)
        half = g.interior & (g.node_radius() <= 0.5)
        semi = holder_seminorm(h, 0.5, a, beta_pairs, seed).seminorm
        avg = math.sqrt(float(np.sum(mass * h.values ** 2) / np.sum(mass)))
        cbars.append((float(np.abs(h.values[half]).max()) + semi) / avg)
    return a, float(max(cbars)), alpha_raw
