"""Uniform Cartesian discretization of the unit ball.

Nodes sit at ``x = -1 + i*h`` along every axis with ``h = 2/(N-1)`` and ``N``
odd, so the origin is always a node.  Each node is classified as

* ``INTERIOR``  -- strictly inside the unit ball,
* ``BOUNDARY``  -- outside (or on) the sphere but sharing a cell with an
  interior node; these form the ghost layer that carries the trace of ``g``,
* ``EXTERIOR``  -- everything else; values there are always zero.

Cells are the ``(N-1)**n`` lattice boxes.  A cell counts as inside the ball
when its center does; all weighted measures are sums over those cells.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

EXTERIOR, BOUNDARY, INTERIOR = 0, 1, 2

__all__ = [
    "EXTERIOR", "BOUNDARY", "INTERIOR",
    "Grid", "ScalarField", "BoundaryData",
    "build_grid", "sample_boundary", "dirichlet_energy", "positivity_measure",
    "corner_average", "write_field", "read_field",
]


@dataclass(frozen=True, eq=False)
class Grid:
    n: int
    N: int
    h: float
    node_class: np.ndarray = field(repr=False)

    @property
    def shape(self):
        return (self.N,) * self.n

    @property
    def cell_shape(self):
        return (self.N - 1,) * self.n

    @property
    def axis(self) -> np.ndarray:
        return -1.0 + self.h * np.arange(self.N)

    def node_coords(self) -> np.ndarray:
        """Coordinates of every node, shape ``(n, N, ..., N)``."""
        return np.stack(np.meshgrid(*([self.axis] * self.n), indexing="ij"))

    def node_radius(self) -> np.ndarray:
        return np.sqrt((self.node_coords() ** 2).sum(axis=0))

    def cell_centers(self) -> np.ndarray:
        ax = -1.0 + self.h * (np.arange(self.N - 1) + 0.5)
        return np.stack(np.meshgrid(*([ax] * self.n), indexing="ij"))

    def cell_radius(self) -> np.ndarray:
        return np.sqrt((self.cell_centers() ** 2).sum(axis=0))

    @property
    def interior(self) -> np.ndarray:
        return self.node_class == INTERIOR

    @property
    def boundary(self) -> np.ndarray:
        return self.node_class == BOUNDARY

    @property
    def exterior(self) -> np.ndarray:
        return self.node_class == EXTERIOR

    @property
    def cells_inside(self) -> np.ndarray:
        return self.cell_radius() < 1.0

    @property
    def cell_volume(self) -> float:
        return self.h ** self.n

    def counts(self) -> dict:
        return {
            "interior": int(self.interior.sum()),
            "boundary": int(self.boundary.sum()),
            "exterior": int(self.exterior.sum()),
        }

    def origin_index(self) -> tuple:
        return ((self.N - 1) // 2,) * self.n

    def zeros(self) -> "ScalarField":
        return ScalarField(np.zeros(self.shape), self)


@dataclass(eq=False)
class ScalarField:
    """One real value per node of ``grid``.  Exterior nodes hold zero."""

    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(
                f"field shape {self.values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    def copy(self) -> "ScalarField":
        return ScalarField(self.values.copy(), self.grid)

    def with_values(self, values) -> "ScalarField":
        return ScalarField(values, self.grid)

    @classmethod
    def from_function(cls, grid: Grid, func: Callable, boundary: Optional["ScalarField"] = None):
        """Evaluate ``func(*coords)`` at interior (and boundary) nodes."""
        vals = np.asarray(func(*grid.node_coords()), dtype=float) * np.ones(grid.shape)
        vals = np.where(grid.exterior, 0.0, vals)
        if boundary is not None:
            vals = np.where(grid.boundary, boundary.values, vals)
        return cls(vals, grid)


@dataclass(frozen=True)
class BoundaryData:
    """Smooth boundary datum ``g`` given as a closed-form expression.

    ``expr`` may use ``theta`` (polar angle in the first two coordinates),
    ``x``, ``y``, ``z`` (coordinates of the point on the unit sphere) and the
    usual elementary functions, e.g. ``"2 + cos(theta)"``.
    """

    expr: str = "1"
    n: int = 2

    @property
    def func(self) -> Callable:
        return _compile_expr(self.expr, self.n)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """``points`` has shape ``(n, ...)`` and lies on the unit sphere."""
        theta = np.arctan2(points[1], points[0])
        coords = list(points) + [np.zeros_like(points[0])] * (3 - self.n)
        out = self.func(theta, *coords[:3])
        return np.asarray(out, dtype=float) * np.ones(points.shape[1:])

    @property
    def gamma(self) -> float:
        """Infimum of ``g`` on the sphere, from dense sampling."""
        return float(self(_sphere_samples(self.n)).min())

    @property
    def sup(self) -> float:
        return float(self(_sphere_samples(self.n)).max())


def _sphere_samples(n, count=4096):
    if n == 2:
        t = 2 * np.pi * np.arange(count) / count
        return np.stack([np.cos(t), np.sin(t)])
    # Fibonacci sphere
    k = np.arange(count) + 0.5
    phi = np.arccos(1 - 2 * k / count)
    th = np.pi * (1 + 5 ** 0.5) * k
    return np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)])


_EXPR_CACHE: dict = {}


def _compile_expr(expr: str, n: int):
    key = (expr, n)
    if key not in _EXPR_CACHE:
        import sympy

        syms = sympy.symbols("theta x y z")
        parsed = sympy.sympify(expr, locals={s.name: s for s in syms})
        extra = parsed.free_symbols - set(syms)
        if extra:
            raise ValueError(f"unknown symbols in boundary expression: {sorted(map(str, extra))}")
        _EXPR_CACHE[key] = sympy.lambdify(syms, parsed, modules="numpy")
    return _EXPR_CACHE[key]


def build_grid(n: int = 2, N: int = 129) -> Grid:
    """Build and classify the lattice on ``[-1, 1]**n``.

    Raises
    ------
    ValueError
        If ``N`` is even (the origin must be a node), ``N < 17`` or
        ``n`` is not 2 or 3.
    """
    if n not in (2, 3):
        raise ValueError(f"dimension must be 2 or 3, got {n}")
    if N % 2 == 0:
        raise ValueError(f"N must be odd so that the origin is a node, got {N}")
    if N < 17:
        raise ValueError(f"N must be at least 17, got {N}")
    h = 2.0 / (N - 1)
    ax = -1.0 + h * np.arange(N)
    r2 = sum(c ** 2 for c in np.meshgrid(*([ax] * n), indexing="ij"))
    inside = r2 < 1.0
    # a cell touches the ball if any corner is interior
    cell_touch = corner_reduce(inside, np.logical_or)
    near = np.zeros((N,) * n, dtype=bool)
    for off in itertools.product((0, 1), repeat=n):
        sl = tuple(slice(o, o + N - 1) for o in off)
        near[sl] |= cell_touch
    cls = np.full((N,) * n, EXTERIOR, dtype=np.int8)
    cls[near] = BOUNDARY
    cls[inside] = INTERIOR
    return Grid(n=n, N=N, h=h, node_class=cls)


def corner_reduce(values: np.ndarray, op) -> np.ndarray:
    """Fold ``op`` over the ``2**n`` corners of every cell."""
    n = values.ndim
    N = values.shape[0]
    out = None
    for off in itertools.product((0, 1), repeat=n):
        sl = values[tuple(slice(o, o + N - 1) for o in off)]
        out = sl.copy() if out is None else op(out, sl)
    return out


def corner_average(values: np.ndarray) -> np.ndarray:
    """Average of the ``2**n`` corner values of every cell."""
    return corner_reduce(values.astype(float), np.add) / 2 ** values.ndim


def sample_boundary(bd: BoundaryData, grid: Grid) -> ScalarField:
    """Return a field holding ``g`` at boundary nodes (radial projection) and zero elsewhere."""
    if bd.n != grid.n:
        raise ValueError("boundary data dimension does not match grid")
    if bd.gamma <= 0:
        raise ValueError(f"g must be positive on the sphere (inf g = {bd.gamma:g})")
    x = grid.node_coords()
    mask = grid.boundary
    pts = x[:, mask]
    pts = pts / np.sqrt((pts ** 2).sum(axis=0))
    vals = bd(pts)
    if np.any(vals <= 0):
        raise ValueError("sampled boundary value is not positive")
    out = np.zeros(grid.shape)
    out[mask] = vals
    return ScalarField(out, grid)


def _edge_slices(n, a, N):
    lo = tuple(slice(0, N - 1) if b == a else slice(None) for b in range(n))
    hi = tuple(slice(1, N) if b == a else slice(None) for b in range(n))
    return lo, hi


def dirichlet_energy(field: ScalarField, wf, node_mask: Optional[np.ndarray] = None) -> float:
    """Discrete weighted Dirichlet energy.

    Sums ``face_value * (du/h)**2 * h**n`` over every lattice edge with at
    least one interior endpoint.  With ``node_mask`` the sum is restricted to
    edges touching a masked node (energy localized to a sub-region).
    """
    g = field.grid
    u = field.values
    active = g.interior if node_mask is None else g.interior & node_mask
    total = 0.0
    for a in range(g.n):
        lo, hi = _edge_slices(g.n, a, g.N)
        du = u[hi] - u[lo]
        use = active[lo] | active[hi]
        total += float(np.sum(wf.face_values[a][use] * du[use] ** 2))
    return total * g.h ** (g.n - 2)


def positivity_measure(field: ScalarField, wf, delta_pos: float = 0.0) -> float:
    """Weighted measure of ``{u > delta_pos}`` with fractional corner counting."""
    if delta_pos < 0:
        raise ValueError("delta_pos must be nonnegative")
    frac = corner_average(field.values > delta_pos)
    return wf.measure(frac)


def write_field(field: ScalarField, path) -> None:
    """Text dump: ``n N h`` on the first line, then node values in row-major order."""
    g = field.grid
    with open(path, "w") as fh:
        fh.write(f"{g.n} {g.N} {g.h!r}\n")
        for v in field.values.ravel():
            fh.write(f"{float(v)!r}\n")


def read_field(path, grid: Optional[Grid] = None) -> ScalarField:
    with open(path) as fh:
        head = fh.readline().split()
        n, N, h = int(head[0]), int(head[1]), float(head[2])
        vals = np.array([float(line) for line in fh if line.strip()])
    if grid is None:
        grid = build_grid(n, N)
    elif (grid.n, grid.N) != (n, N):
        raise ValueError(f"dump is n={n}, N={N} but grid is n={grid.n}, N={grid.N}")
    if vals.size != N ** n:
        raise ValueError(f"dump holds {vals.size} values, expected {N ** n}")
    if abs(h - grid.h) > 1e-12:
        raise ValueError("dump spacing does not match grid")
    return ScalarField(vals.reshape(grid.shape), grid)
