"""Weighted divergence-form operator, Dirichlet solves, and constant estimates.

The stencil at an interior node ``p`` is

    (L u)_p = sum_q  (w_pq / h**2) * (u_q - u_p)

over the ``2n`` lattice neighbors, where ``w_pq`` is the face value of the
weight on edge ``pq``.  ``-L`` restricted to free nodes is a symmetric
M-matrix, so the Dirichlet problems are solved with Jacobi-preconditioned
conjugate gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .grid import Grid, ScalarField, _edge_slices, dirichlet_energy
from .weights import WeightField


class ConvergenceError(RuntimeError):
    """An iterative solve stopped at ``max_iterations``; carries the best iterate."""

    def __init__(self, message, residual=float("nan"), field=None):
        super().__init__(message)
        self.residual = residual
        self.field = field


@dataclass(frozen=True)
class SolverParams:
    tolerance: float = 1e-10
    max_iterations: int = 20000

    def __post_init__(self):
        if not 0 < self.tolerance <= 1e-4:
            raise ValueError(f"solver tolerance must lie in (0, 1e-4], got {self.tolerance}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True)
class SolveStats:
    iterations: int
    residual: float
    converged: bool
    free_nodes: int


@dataclass(frozen=True, eq=False)
class StencilOperator:
    grid: Grid
    wf: WeightField
    coef: tuple = field(repr=False)  # face_values / h**2 per axis
    K: sp.csr_matrix = field(repr=False)  # -L on interior rows, all columns
    diag: np.ndarray = field(repr=False)

    def apply(self, u) -> np.ndarray:
        """``L u`` on interior nodes (zero elsewhere)."""
        vals = u.values if isinstance(u, ScalarField) else np.asarray(u)
        return -(self.K @ vals.ravel()).reshape(self.grid.shape)

    def normalized_residual(self, u) -> np.ndarray:
        """``(L u)_p / diag_p``: the defect relative to the local weighted average."""
        Lu = self.apply(u)
        out = np.zeros(self.grid.shape)
        m = self.diag > 0
        out[m] = Lu[m] / self.diag[m]
        return out

    def coupling(self, p: tuple, q: tuple) -> float:
        N = self.grid.N
        i = np.ravel_multi_index(p, (N,) * self.grid.n)
        j = np.ravel_multi_index(q, (N,) * self.grid.n)
        return -float(self.K[i, j])


def assemble(grid: Grid, wf: WeightField) -> StencilOperator:
    if wf.grid is not grid and (wf.grid.n, wf.grid.N) != (grid.n, grid.N):
        raise ValueError("weight field was built on a different grid")
    if any(np.any(f <= 0) for f in wf.face_values):
        raise ValueError("face weights must be positive")
    n, N, h = grid.n, grid.N, grid.h
    idx = np.arange(N ** n).reshape(grid.shape)
    interior = grid.interior
    rows, cols, data = [], [], []
    diag = np.zeros(grid.shape)
    coef = []
    for a in range(n):
        c = wf.face_values[a] / h ** 2
        coef.append(c)
        lo, hi = _edge_slices(n, a, N)
        for p_sl, q_sl in ((lo, hi), (hi, lo)):
            m = interior[p_sl]
            rows.append(idx[p_sl][m])
            cols.append(idx[q_sl][m])
            data.append(-c[m])
            diag[p_sl] += np.where(m, c, 0.0)
    im = interior.ravel()
    rows.append(idx.ravel()[im])
    cols.append(idx.ravel()[im])
    data.append(diag.ravel()[im])
    K = sp.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(N ** n, N ** n))
    return StencilOperator(grid=grid, wf=wf, coef=tuple(coef), K=K, diag=diag)


def pcg(A, b, d, x0, tol, max_iter):
    """Jacobi-preconditioned CG on ``A x = b`` (``d`` = diagonal of ``A``).

    Stops when ``max |r / d| <= tol * max |b / d|``.
    """
    scale = float(np.max(np.abs(b / d))) if b.size else 0.0
    if scale == 0.0:
        return np.zeros_like(b), 0, 0.0, True
    x = x0.copy()
    r = b - A @ x
    z = r / d
    res = float(np.max(np.abs(z))) / scale
    if res <= tol:
        return x, 0, res, True
    p = z.copy()
    rz = float(r @ z)
    for k in range(1, max_iter + 1):
        Ap = A @ p
        alpha = rz / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        z = r / d
        res = float(np.max(np.abs(z))) / scale
        if res <= tol:
            return x, k, res, True
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, max_iter, res, False


def solve_pinned(op: StencilOperator, values: np.ndarray, free: np.ndarray,
                 params: SolverParams = SolverParams(), x0: Optional[np.ndarray] = None):
    """Solve ``L u = 0`` on ``free`` nodes with every other node fixed to ``values``.

    Returns ``(u, stats)``.  ``x0`` (full node array) warm-starts the free unknowns.
    """
    free = free & op.grid.interior
    fi = np.flatnonzero(free.ravel())
    u = np.array(values, dtype=float).ravel()
    fixed = u.copy()
    fixed[fi] = 0.0
    if fi.size == 0:
        return u.reshape(op.grid.shape), SolveStats(0, 0.0, True, 0)
    A = op.K[fi][:, fi]
    b = -(op.K @ fixed)[fi]
    d = op.diag.ravel()[fi]
    start = (x0.ravel()[fi] if x0 is not None else u[fi]).astype(float)
    x, its, res, ok = pcg(A, b, d, start, params.tolerance, params.max_iterations)
    # a small residual does not bound the nodal error; keep iterating at a
    # tighter residual until the discrete maximum principle holds to tol
    data = u[(~free & ~op.grid.exterior).ravel()]
    lo, hi = (float(data.min()), float(data.max())) if data.size else (0.0, 0.0)
    slack = params.tolerance * max(abs(lo), abs(hi), 1.0)
    tol = params.tolerance
    for _ in range(4):
        if not ok or (x.min() >= lo - slack and x.max() <= hi + slack):
            break
        tol /= 10
        x, more, res, ok = pcg(A, b, d, x, tol, max(params.max_iterations - its, 1))
        its += more
    u[fi] = x
    u = u.reshape(op.grid.shape)
    stats = SolveStats(its, res, ok, fi.size)
    if not ok:
        raise ConvergenceError(
            f"CG did not reach tolerance {params.tolerance:g} in {its} iterations "
            f"(relative residual {res:.3e})", residual=res, field=ScalarField(u, op.grid))
    return u, stats


def solve_dirichlet(op: StencilOperator, boundary: ScalarField, zero_set: Optional[np.ndarray] = None,
                    params: SolverParams = SolverParams(), x0: Optional[ScalarField] = None):
    """Weighted-harmonic extension of the boundary trace, pinned to zero on ``zero_set``.

    ``zero_set`` is a boolean node mask.  Returns ``(field, stats)``.
    """
    g = op.grid
    vals = np.where(g.boundary, boundary.values, 0.0)
    free = g.interior.copy()
    if zero_set is not None:
        free &= ~zero_set
    u, stats = solve_pinned(op, vals, free, params, None if x0 is None else x0.values)
    return ScalarField(u, g), stats


def ball_mask(grid: Grid, center, radius: float) -> np.ndarray:
    x = grid.node_coords()
    c = np.asarray(center, dtype=float).reshape((-1,) + (1,) * grid.n)
    return np.sqrt(((x - c) ** 2).sum(axis=0)) < radius


def harmonic_replacement(field: ScalarField, center, radius: float, op: StencilOperator,
                         params: SolverParams = SolverParams()) -> ScalarField:
    """Replace ``field`` inside ``B_radius(center)`` by the discrete weighted-harmonic
    function with the same values on the surrounding nodes."""
    g = field.grid
    c = np.asarray(center, dtype=float)
    if np.linalg.norm(c) + radius > 1.0 + 1e-12:
        raise ValueError("replacement ball must lie inside the unit ball")
    if radius < 4 * g.h:
        raise ValueError(f"replacement radius {radius:g} is below 4h = {4 * g.h:g}")
    free = ball_mask(g, c, radius) & g.interior
    u, _ = solve_pinned(op, field.values, free, params)
    return ScalarField(u, g)


def ball_energy(field: ScalarField, wf: WeightField, center, radius: float) -> float:
    """Dirichlet energy on edges touching interior nodes of the ball."""
    return dirichlet_energy(field, wf, ball_mask(field.grid, center, radius))


# ---------------------------------------------------------------------------
# Poincare (smallest eigenvalue) and Harnack estimates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EigenResult:
    eigenvalue: float
    vector: ScalarField = field(repr=False)
    iterations: int = 0
    radius: float = 1.0


def smallest_eigenpair(op: StencilOperator, wf: WeightField, radius: float = 1.0, center=None,
                       tol: float = 1e-12, max_iter: int = 500) -> EigenResult:
    """Smallest generalized eigenpair of ``(-L, lumped weighted mass)`` on a ball
    with zero Dirichlet data, by inverse power iteration.

    Each step solves with a sparse LU factorization of the stiffness block.
    """
    g = op.grid
    c = np.zeros(g.n) if center is None else np.asarray(center, dtype=float)
    free = (g.interior & ball_mask(g, c, radius)).ravel()
    fi = np.flatnonzero(free)
    # -L scaled by the node volume h**n gives the energy Hessian / 2
    S = (op.K[fi][:, fi] * g.h ** g.n).tocsc()
    M = wf.node_mass().ravel()[fi]
    lu = splu(S)
    x = np.ones(fi.size)
    x /= np.sqrt(x @ (M * x))
    lam = np.inf
    for k in range(1, max_iter + 1):
        y = lu.solve(M * x)
        y /= np.sqrt(y @ (M * y))
        lam_new = float(y @ (S @ y))
        x = y
        if abs(lam_new - lam) <= tol * abs(lam_new):
            lam = lam_new
            break
        lam = lam_new
    else:
        raise ConvergenceError(f"inverse iteration did not converge in {max_iter} steps")
    if x.sum() < 0:
        x = -x
    vec = np.zeros(g.N ** g.n)
    vec[fi] = x
    return EigenResult(eigenvalue=lam, vector=ScalarField(vec.reshape(g.shape), g), iterations=k, radius=radius)


def dense_smallest_eigenvalue(op: StencilOperator, wf: WeightField, radius: float = 1.0) -> float:
    """Dense generalized eigensolve of the same pencil (small grids only)."""
    from scipy.linalg import eigh

    g = op.grid
    fi = np.flatnonzero((g.interior & ball_mask(g, np.zeros(g.n), radius)).ravel())
    S = (op.K[fi][:, fi] * g.h ** g.n).toarray()
    M = np.diag(wf.node_mass().ravel()[fi])
    return float(eigh(S, M, eigvals_only=True, subset_by_index=[0, 0])[0])


def estimate_poincare(op: StencilOperator, wf: WeightField, radius: float = 1.0) -> float:
    """Poincare constant ``C_P = 1 / (lambda_1 R**2)`` on ``B_R``."""
    res = smallest_eigenpair(op, wf, radius)
    return 1.0 / (res.eigenvalue * radius ** 2)


def harnack_ratio(field: ScalarField, op: Optional[StencilOperator] = None, center=None,
                  radius: float = 1.0, tol: float = SolverParams().tolerance) -> float:
    """``sup / inf`` of a nonnegative weighted-harmonic field over ``B_{radius/2}(center)``.

    When ``op`` is given the field is first checked to be discrete
    weighted-harmonic (normalized residual at most ``10 * tol`` times its
    maximum) on the interior nodes of ``B_radius(center)``.
    """
    g = field.grid
    c = np.zeros(g.n) if center is None else np.asarray(center, dtype=float)
    if op is not None:
        inner = g.interior & ball_mask(g, c, radius)
        scale = max(float(np.abs(field.values).max()), 1e-300)
        worst = float(np.abs(op.normalized_residual(field)[inner]).max())
        if worst > 10 * tol * scale:
            raise ValueError(f"field is not discrete weighted-harmonic in the ball (residual {worst:.3e})")
    half = g.interior & ball_mask(g, c, radius / 2)
    vals = field.values[half]
    lo = float(vals.min())
    if lo <= 0:
        raise ValueError("Harnack ratio needs a field positive on the half ball")
    return float(vals.max()) / lo


def harmonic_ratio_on_ball(field: ScalarField, op: StencilOperator, center, radius: float,
                           params: SolverParams = SolverParams()):
    """Harnack ratio of the weighted-harmonic replacement of ``field`` on ``B_radius(center)``.

    Returns ``(ratio, change)`` where ``change`` is the largest nodal change
    made by the replacement (zero for a field already weighted-harmonic there).
    """
    rep = harmonic_replacement(field, center, radius, op, params)
    change = float(np.abs(rep.values - field.values).max())
    return harnack_ratio(rep, None, center, radius), change
