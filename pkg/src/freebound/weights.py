"""Muckenhoupt A2 weight families, grid averaging, and constant estimation.

Four families are supported, each optionally composed with an affine change
of variables ``x -> shift + scale * x`` (the rescaled weight
``w(x0 + r*y)`` used in blow-up arguments):

=================  =========================================  ==============
family             formula                                    singular set
=================  =========================================  ==============
``constant``       ``value``                                  none
``power``          ``|x|**beta``, ``|beta| < n``              the origin
``distance_power`` ``dist(x, Z)**alpha``, ``alpha >= 0``      ``Z``
``extension``      ``|x_n|**(1 - 2 s)``, ``0 < s < 1``        ``{x_n = 0}``
=================  =========================================  ==============

``Z`` is a finite union of points and segments.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from .grid import Grid, ScalarField, _edge_slices, corner_average

FAMILIES = ("constant", "power", "distance_power", "extension")


class SingularPointError(ValueError):
    """Raised when a weight is point-evaluated on its singular set."""


@dataclass(frozen=True)
class WeightSpec:
    family: str = "constant"
    value: float = 1.0
    beta: float = 0.0
    alpha: float = 0.0
    points: tuple = ()
    segments: tuple = ()
    s: float = 0.5
    shift: Optional[tuple] = None
    scale: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown weight family {self.family!r}; expected one of {FAMILIES}")
        if self.family == "constant" and not self.value > 0:
            raise ValueError("constant weight value must be positive")
        if self.family == "distance_power":
            if self.alpha < 0:
                raise ValueError("distance_power exponent alpha must be >= 0")
            if not self.points and not self.segments:
                raise ValueError("distance_power needs at least one point or segment in Z")
        if self.family == "extension" and not 0 < self.s < 1:
            raise ValueError("extension parameter s must lie in (0, 1)")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "points", tuple(tuple(map(float, p)) for p in self.points))
        object.__setattr__(self, "segments", tuple(tuple(map(float, s)) for s in self.segments))

    def check_dimension(self, n: int) -> None:
        if self.family == "power" and not abs(self.beta) < n:
            raise ValueError(f"power weight needs |beta| < n = {n}, got beta = {self.beta}")
        for p in self.points:
            if len(p) != n:
                raise ValueError("distance point has wrong dimension")
        for sgm in self.segments:
            if len(sgm) != 2 * n:
                raise ValueError("segment must list 2n coordinates")
        if self.shift is not None and len(self.shift) != n:
            raise ValueError("shift has wrong dimension")

    def rescaled(self, x0, r: float) -> "WeightSpec":
        """Spec of ``y -> w(x0 + r*y)``."""
        x0 = np.asarray(x0, dtype=float)
        old = np.zeros_like(x0) if self.shift is None else np.asarray(self.shift)
        return replace(self, shift=tuple(old + self.scale * x0), scale=self.scale * r)

    def _base_coords(self, pts: np.ndarray) -> np.ndarray:
        if self.shift is None and self.scale == 1.0:
            return pts
        shift = 0.0 if self.shift is None else np.asarray(self.shift).reshape((-1,) + (1,) * (pts.ndim - 1))
        return shift + self.scale * pts

    def singular_points(self, n: int) -> np.ndarray:
        """Point singularities in the (possibly rescaled) coordinates, shape ``(k, n)``."""
        if self.family == "power" and self.beta != 0:
            base = [np.zeros(n)]
        elif self.family == "distance_power" and self.alpha != 0:
            base = [np.asarray(p) for p in self.points]
        else:
            return np.zeros((0, n))
        shift = np.zeros(n) if self.shift is None else np.asarray(self.shift)
        return np.array([(b - shift) / self.scale for b in base]).reshape(-1, n)

    def singular_distance(self, pts: np.ndarray) -> np.ndarray:
        """Distance (in unscaled weight coordinates) from ``pts`` (shape ``(n, ...)``) to the singular set."""
        n = pts.shape[0]
        out = np.full(pts.shape[1:], np.inf)
        for z in self.singular_points(n):
            out = np.minimum(out, np.sqrt(sum((pts[i] - z[i]) ** 2 for i in range(n))))
        if self.family == "distance_power" and self.alpha != 0 and self.segments:
            base = self._base_coords(pts)
            for sgm in self.segments:
                out = np.minimum(out, _segment_distance(base, sgm) / self.scale)
        if self.family == "extension" and self.s != 0.5:
            base = self._base_coords(pts)
            out = np.minimum(out, np.abs(base[-1]) / self.scale)
        return out


def _segment_distance(pts: np.ndarray, sgm) -> np.ndarray:
    n = pts.shape[0]
    a = np.asarray(sgm[:n], dtype=float)
    b = np.asarray(sgm[n:], dtype=float)
    d = b - a
    dd = float(d @ d)
    rel = [pts[i] - a[i] for i in range(n)]
    if dd == 0.0:
        t = 0.0
    else:
        t = np.clip(sum(rel[i] * d[i] for i in range(n)) / dd, 0.0, 1.0)
    return np.sqrt(sum((rel[i] - t * d[i]) ** 2 for i in range(n)))


def _weight_values(spec: WeightSpec, pts: np.ndarray, power: float = 1.0) -> np.ndarray:
    """Vectorized ``w(pts)**power`` for ``pts`` of shape ``(n, ...)``; no singularity checks."""
    x = spec._base_coords(pts)
    n = x.shape[0]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if spec.family == "constant":
            return np.full(x.shape[1:], spec.value ** power)
        if spec.family == "power":
            r = np.sqrt(sum(x[i] ** 2 for i in range(n)))
            return r ** (spec.beta * power)
        if spec.family == "distance_power":
            d = np.full(x.shape[1:], np.inf)
            for p in spec.points:
                d = np.minimum(d, np.sqrt(sum((x[i] - p[i]) ** 2 for i in range(n))))
            for sgm in spec.segments:
                d = np.minimum(d, _segment_distance(x, sgm))
            return d ** (spec.alpha * power)
        return np.abs(x[-1]) ** ((1.0 - 2.0 * spec.s) * power)


def eval_weight(spec: WeightSpec, point) -> float:
    """Point value of the weight.

    Raises
    ------
    SingularPointError
        At a point of the singular set, where only cell averages make sense.
    """
    pt = np.asarray(point, dtype=float).reshape(-1, 1)
    spec.check_dimension(pt.shape[0])
    if spec.singular_distance(pt)[0] == 0.0:
        raise SingularPointError(f"weight {spec.family} is singular at {tuple(pt[:, 0])}; use cell averages")
    val = float(_weight_values(spec, pt)[0])
    if not (np.isfinite(val) and val > 0):
        raise SingularPointError(f"weight {spec.family} is not positive and finite at {tuple(pt[:, 0])}")
    return val


@dataclass(frozen=True, eq=False)
class WeightField:
    """Cell- and face-averaged weight on a grid.

    ``face_values[a]`` lives on the lattice edges along axis ``a`` (shape
    ``N-1`` along ``a`` and ``N`` along the other axes).
    """

    grid: Grid
    cell_values: np.ndarray = field(repr=False)
    face_values: tuple = field(repr=False)
    inside: np.ndarray = field(repr=False)
    total_mass: float = 0.0

    def measure(self, indicator) -> float:
        """Weighted measure of a (possibly fractional) cell indicator, restricted to the ball."""
        ind = np.asarray(indicator, dtype=float)
        return float(np.sum(self.cell_values[self.inside] * ind[self.inside])) * self.grid.cell_volume

    def node_mass(self, inside: bool = False) -> np.ndarray:
        """Lumped weighted volume attached to each node (only from cells inside the ball if ``inside``)."""
        g = self.grid
        out = np.zeros(g.shape)
        vals = np.where(self.inside, self.cell_values, 0.0) if inside else self.cell_values
        share = vals * g.cell_volume / 2 ** g.n
        for off in itertools.product((0, 1), repeat=g.n):
            out[tuple(slice(o, o + g.N - 1) for o in off)] += share
        return out


def weighted_measure(wf: WeightField, indicator) -> float:
    """``w(E)`` for a set ``E`` of cells given as a boolean or fractional mask."""
    return wf.measure(indicator)


def _gauss_box(n: int, order: int, sub: int):
    """Tensor Gauss-Legendre nodes/weights on the unit box split into ``sub**n`` subcells."""
    xi, wi = np.polynomial.legendre.leggauss(order)
    xi = (xi + 1) / 2
    wi = wi / 2
    pts1 = np.concatenate([(k + xi) / sub for k in range(sub)])
    w1 = np.concatenate([wi / sub for _ in range(sub)])
    P = np.stack(np.meshgrid(*([pts1] * n), indexing="ij")).reshape(n, -1)
    W = np.prod(np.stack(np.meshgrid(*([w1] * n), indexing="ij")).reshape(n, -1), axis=0)
    return P, W


def build_weight_field(spec: WeightSpec, grid: Grid, quadrature_order: int = 3, refine: int = 4) -> WeightField:
    """Average the weight over every cell and face of ``grid``.

    Cells within half a cell diagonal of the singular set use ``refine**n``
    subcells; Gauss points are strictly inside each subcell so the singular
    set is never hit on the lattice.  Face values are arithmetic means of the
    adjacent cell averages.
    """
    if quadrature_order < 1:
        raise ValueError("quadrature_order must be >= 1")
    spec.check_dimension(grid.n)
    n, h = grid.n, grid.h
    lo = -1.0 + h * np.arange(grid.N - 1)
    corners = np.stack(np.meshgrid(*([lo] * n), indexing="ij")).reshape(n, -1)
    centers = corners + h / 2
    cells = np.empty(corners.shape[1])
    near = spec.singular_distance(centers) <= h * np.sqrt(n) / 2 * (1 + 1e-9)

    for mask, sub in ((~near, 1), (near, refine)):
        if spec.family == "constant":
            cells[:] = spec.value
            break
        if not mask.any():
            continue
        P, W = _gauss_box(n, quadrature_order, sub)
        idx = np.flatnonzero(mask)
        for chunk in np.array_split(idx, max(1, idx.size * W.size // 2_000_000 + 1)):
            pts = corners[:, chunk, None] + h * P[:, None, :]
            vals = _weight_values(spec, pts)
            cells[chunk] = vals @ W
    cell_values = cells.reshape(grid.cell_shape)
    if not np.all(np.isfinite(cell_values)) or np.any(cell_values <= 0):
        raise ValueError(f"weight {spec.family} has a nonpositive or non-finite cell average")

    faces = []
    for a in range(n):
        c = cell_values
        for b in range(n):
            if b == a:
                continue
            pad = [(0, 0)] * n
            pad[b] = (1, 1)
            c = np.pad(c, pad, mode="edge")
            lo_s, hi_s = _edge_slices(n, b, c.shape[b])
            c = 0.5 * (c[lo_s] + c[hi_s])
        faces.append(c)
    inside = grid.cells_inside
    total = float(cell_values[inside].sum()) * grid.cell_volume
    return WeightField(grid=grid, cell_values=cell_values, face_values=tuple(faces),
                       inside=inside, total_mass=total)


# ---------------------------------------------------------------------------
# A2 estimation on sampled balls
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class A2Report:
    a2_estimate: float = float("nan")
    doubling_D: float = float("nan")
    c1_estimate: float = float("nan")
    C2_estimate: float = float("nan")
    SD_estimate: float = float("nan")
    tau_lower_bound: float = 0.0
    isoperimetric_C0: float = 0.0
    samples: int = 0

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(f.name for f in fields(cls))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f.name for f in fields(self)])
        w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(self).values()])
        return buf.getvalue()


@dataclass(frozen=True)
class BallSampler:
    """Finite family of balls used to probe the weight.

    Centers lie on the dyadic lattice of spacing ``2**-center_level`` in
    ``[-1, 1]**n``; radii are ``2**-k`` for ``k = 0..radius_levels-1``.
    Balls centered at point singularities are always added, and
    ``n_random`` extra balls come from ``seed``.  Raising any count yields a
    superset of the previous family.
    """

    center_level: int = 2
    radius_levels: int = 4
    n_random: int = 0
    seed: int = 0
    include_singular: bool = True

    def balls(self, spec: WeightSpec, n: int) -> np.ndarray:
        step = 2.0 ** -self.center_level
        ax = np.arange(-1.0, 1.0 + step / 2, step)
        C = np.stack(np.meshgrid(*([ax] * n), indexing="ij")).reshape(n, -1).T
        radii = 2.0 ** -np.arange(self.radius_levels)
        out = [np.column_stack([np.repeat(C, radii.size, axis=0), np.tile(radii, len(C))])]
        if self.include_singular:
            for z in spec.singular_points(n):
                out.append(np.column_stack([np.tile(z, (radii.size, 1)), radii]))
        if self.n_random:
            out.append(_random_balls(self.seed, self.n_random, n))
        return np.concatenate(out, axis=0)


def _random_balls(seed, count, n, chunk=256):
    rng = np.random.default_rng(seed)
    rows = []
    while sum(len(r) for r in rows) < count:
        c = rng.uniform(-1, 1, size=(chunk, n))
        r = 2.0 ** rng.uniform(-5, 0, size=(chunk, 1))
        rows.append(np.hstack([c, r]))
    return np.concatenate(rows)[:count]


def _directions(n, n_dir):
    if n == 2:
        t = 2 * np.pi * (np.arange(n_dir) + 0.5) / n_dir
        return np.stack([np.cos(t), np.sin(t)], axis=1), np.full(n_dir, 2 * np.pi / n_dir)
    n_pol = max(4, n_dir // 2)
    mu, wmu = np.polynomial.legendre.leggauss(n_pol)
    phi = 2 * np.pi * (np.arange(n_dir) + 0.5) / n_dir
    M, P = np.meshgrid(mu, phi, indexing="ij")
    s = np.sqrt(1 - M ** 2)
    E = np.stack([s * np.cos(P), s * np.sin(P), M], axis=-1).reshape(-1, 3)
    W = np.outer(wmu, np.full(n_dir, 2 * np.pi / n_dir)).ravel()
    return E, W


@dataclass(frozen=True)
class BallQuadrature:
    """Polar quadrature on a ball about a pole: the weight's point singularity
    when one lies in the ball, else the center."""

    n_dir: int = 96
    n_rad: int = 24

    def integrate(self, spec: WeightSpec, center, radius, powers=(1.0, -1.0)):
        n = len(center)
        c = np.asarray(center, dtype=float)
        pole = c
        for z in spec.singular_points(n):
            if np.linalg.norm(z - c) <= radius * (1 + 1e-12):
                pole = z
                break
        E, We = _directions(n, self.n_dir)
        d = pole - c
        de = E @ d
        ell = -de + np.sqrt(np.maximum(radius ** 2 - d @ d + de ** 2, 0.0))
        xi, wi = np.polynomial.legendre.leggauss(self.n_rad)
        s = ell[:, None] * (xi[None, :] + 1) / 2
        jac = We[:, None] * (ell[:, None] / 2) * wi[None, :] * s ** (n - 1)
        pts = pole[:, None, None] + E.T[:, :, None] * s[None]
        vol = float(jac.sum())
        live = jac > 0
        with np.errstate(invalid="ignore"):
            out = [float(np.where(live, _weight_values(spec, pts, p) * jac, 0.0).sum()) for p in powers]
        return vol, out


def _ball_integrals(spec, balls, quad):
    vols, wplus, wminus = [], [], []
    for row in balls:
        v, (a, b) = quad.integrate(spec, row[:-1], row[-1])
        vols.append(v)
        wplus.append(a)
        wminus.append(b)
    return np.array(vols), np.array(wplus), np.array(wminus)


def ball_a2_products(spec: WeightSpec, balls: np.ndarray, quad: BallQuadrature = BallQuadrature()) -> np.ndarray:
    """``(avg w)(avg 1/w)`` on each ball."""
    vols, wp, wm = _ball_integrals(spec, balls, quad)
    prod = (wp / vols) * (wm / vols)
    if not np.all(np.isfinite(prod)):
        raise ValueError("weight or its reciprocal is not integrable on a sampled ball (not A2 at this scale)")
    return prod


def _subsets(row, n, spec):
    """Sub-balls ``E`` of ``B`` for the measure-ratio estimates, ``E = B`` included."""
    c, r = row[:-1], row[-1]
    subs = [(c, r)]
    for k in (1, 2, 3):
        subs.append((c, r / 2 ** k))
    for e in np.eye(n):
        subs.append((c + e * r / 2, r / 2))
        subs.append((c - e * r / 2, r / 2))
    for z in spec.singular_points(n):
        dz = np.linalg.norm(z - c)
        if dz < r:
            rr = min(r - dz, r / 2)
            if rr > 0:
                subs.append((z, rr))
    return subs


def estimate_a2(spec: WeightSpec, sampler: BallSampler = BallSampler(), n: int = 2,
                quad: BallQuadrature = BallQuadrature()) -> A2Report:
    """Sampled lower bounds for the A2 constant and the measure-ratio constants.

    ``a2_estimate`` is the largest ``(avg w)(avg 1/w)`` over the sampled balls.
    The doubling constant compares each ball to its concentric double; ``c1``,
    ``C2`` and ``S_D`` come from sub-ball pairs ``E`` inside each ``B``.
    """
    spec.check_dimension(n)
    balls = sampler.balls(spec, n)
    prod = ball_a2_products(spec, balls, quad)

    doubled = balls.copy()
    doubled[:, -1] *= 2
    _, wb, _ = _ball_integrals(spec, balls, quad)
    _, w2b, _ = _ball_integrals(spec, doubled, quad)
    D = float(np.max(w2b / wb))

    xs, ys = [], []
    for row, wB in zip(balls, wb):
        for c, r in _subsets(row, n, spec):
            _, (wE,) = quad.integrate(spec, c, r, powers=(1.0,))
            xs.append((r / row[-1]) ** n)
            ys.append(wE / wB)
    xs, ys = np.array(xs), np.array(ys)
    if not (np.all(np.isfinite(ys)) and np.isfinite(D)):
        raise ValueError("weight measure overflowed on a sampled ball")
    c1 = float(np.min(ys / xs ** 2))
    proper = xs < 1
    expo = np.log(ys[proper]) / np.log(xs[proper])
    SD = float(np.clip(expo.min(), 1e-6, 1.0))
    C2 = float(max(1.0, np.max(ys / xs ** SD)))
    return A2Report(a2_estimate=float(prod.max()), doubling_D=D, c1_estimate=c1,
                    C2_estimate=C2, SD_estimate=SD, samples=len(balls))


# ---------------------------------------------------------------------------
# admissibility: lower bound and weighted isoperimetric ratio
# ---------------------------------------------------------------------------

def level_set_perimeter(field: ScalarField, wf: WeightField, level: float) -> float:
    """Weighted length of ``{u = level}`` inside the ball by marching squares.

    Each segment is weighted by the mean face value of the two cell edges it
    connects.  Two-dimensional grids only.
    """
    g = field.grid
    if g.n != 2:
        raise ValueError("level-set perimeter is implemented for n = 2 only")
    u = field.values - level
    h = g.h
    c00, c10, c01, c11 = u[:-1, :-1], u[1:, :-1], u[:-1, 1:], u[1:, 1:]
    fx, fy = wf.face_values  # fx on edges along axis 0: shape (N-1, N)
    # cell edges: bottom (c00-c10, along x at j), top (c01-c11, along x at j+1),
    # left (c00-c01, along y at i), right (c10-c11, along y at i+1)
    edges = [
        (c00, c10, np.array([0.0, 0.0]), np.array([1.0, 0.0]), fx[:, :-1]),
        (c01, c11, np.array([0.0, 1.0]), np.array([1.0, 0.0]), fx[:, 1:]),
        (c00, c01, np.array([0.0, 0.0]), np.array([0.0, 1.0]), fy[:-1, :]),
        (c10, c11, np.array([1.0, 0.0]), np.array([0.0, 1.0]), fy[1:, :]),
    ]
    cross, pos, wts = [], [], []
    for a, b, base, dirv, fw in edges:
        hit = (a > 0) != (b > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(hit, a / (a - b), 0.0)
        cross.append(hit)
        pos.append(base[:, None, None] + dirv[:, None, None] * t[None])
        wts.append(fw)
    cross = np.stack(cross)  # (4, N-1, N-1)
    pos = np.stack(pos)  # (4, 2, N-1, N-1)
    wts = np.stack(wts)
    count = cross.sum(axis=0)
    inside = wf.inside
    total = 0.0

    two = (count == 2) & inside
    if two.any():
        idx = np.argsort(~cross[:, two], axis=0, kind="stable")[:2]
        P = pos[:, :, two]
        Wt = wts[:, two]
        k = np.arange(two.sum())
        p0, p1 = P[idx[0], :, k], P[idx[1], :, k]
        seg = np.linalg.norm(p1 - p0, axis=1) * h
        total += float(np.sum(seg * 0.5 * (Wt[idx[0], k] + Wt[idx[1], k])))

    four = (count == 4) & inside
    if four.any():
        center = 0.25 * (c00 + c10 + c01 + c11)[four]
        P = pos[:, :, four]
        Wt = wts[:, four]
        s00 = c00[four] > 0
        # saddle: pair edges so the segments separate the corners whose sign differs from the center
        same = (center > 0) == s00
        pairs_a = np.zeros_like(same, dtype=int), np.where(same, 3, 2)  # (bottom,right) or (bottom,left)
        pairs_b = np.where(same, 2, 3), np.where(same, 1, 1)  # (left,top) or (right,top)
        k = np.arange(four.sum())
        for e0, e1 in (pairs_a, pairs_b):
            seg = np.linalg.norm(P[e1, :, k] - P[e0, :, k], axis=1) * h
            total += float(np.sum(seg * 0.5 * (Wt[e0, k] + Wt[e1, k])))
    return total


def check_admissibility(spec: WeightSpec, grid: Grid, sample_fields: Sequence[ScalarField],
                        levels: int = 16, report: Optional[A2Report] = None,
                        wf: Optional[WeightField] = None) -> A2Report:
    """Fill the lower-bound and isoperimetric entries of an :class:`A2Report`.

    ``tau_lower_bound`` is the smallest cell average inside the ball.
    ``isoperimetric_C0`` is the worst observed ratio
    ``w({u > s})**((n-1)/n) / perimeter_w({u = s})`` over the sample fields
    and ``levels`` interior levels of each.  This is evidence only.
    """
    if not sample_fields:
        raise ValueError("check_admissibility needs at least one sample field")
    if wf is None:
        wf = build_weight_field(spec, grid)
    if report is None:
        report = estimate_a2(spec, n=grid.n)
    tau = float(wf.cell_values[wf.inside].min())
    worst, used = 0.0, 0
    for fld in sample_fields:
        vals = fld.values[grid.interior]
        lo, hi = float(vals.min()), float(vals.max())
        if hi <= lo:
            continue
        for s in lo + (hi - lo) * (np.arange(levels) + 0.5) / levels:
            per = level_set_perimeter(fld, wf, s)
            if per <= 0:
                continue
            vol = wf.measure(corner_average(fld.values > s))
            worst = max(worst, vol ** ((grid.n - 1) / grid.n) / per)
            used += 1
    if used == 0:
        raise ValueError("every sampled level set was empty")
    return replace(report, tau_lower_bound=tau, isoperimetric_C0=worst)
