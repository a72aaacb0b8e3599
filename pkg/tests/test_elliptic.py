import numpy as np
import pytest
import scipy.sparse.linalg as spla
from hypothesis import given, settings, strategies as st
from scipy.special import jn_zeros

from freebound.elliptic import (ConvergenceError, SolverParams, assemble, ball_energy, dense_smallest_eigenvalue,
                                estimate_poincare, harmonic_replacement, harnack_ratio, smallest_eigenpair,
                                solve_dirichlet, solve_pinned)
from freebound.grid import BoundaryData, ScalarField, build_grid, dirichlet_energy, sample_boundary
from freebound.weights import WeightSpec, build_weight_field

from conftest import radial_case

J01_SQ = jn_zeros(0, 1)[0] ** 2


def _setup(spec, N):
    g = build_grid(2, N)
    wf = build_weight_field(spec, g)
    return g, wf, assemble(g, wf)


@pytest.mark.parametrize("spec", [WeightSpec("constant", value=1.0), WeightSpec("power", beta=-1.0)])
def test_operator_is_symmetric_m_matrix(spec):
    g, wf, op = _setup(spec, 33)
    fi = np.flatnonzero(g.interior.ravel())
    A = op.K[fi][:, fi]
    assert abs(A - A.T).max() < 1e-12 * abs(A).max()
    off = A - np.diag(A.diagonal())
    assert off.max() <= 0
    # rows over all columns sum to zero: constants are in the kernel of L
    assert np.allclose(op.K @ np.ones(g.N ** 2), 0, atol=1e-9 * op.diag.max())


def test_constant_boundary_gives_constant_solution():
    g, wf, op = _setup(WeightSpec("power", beta=-1.0), 65)
    u, st_ = solve_dirichlet(op, sample_boundary(BoundaryData("3", 2), g))
    assert st_.converged
    assert np.allclose(u.values[g.interior], 3.0, atol=1e-8)


@pytest.mark.parametrize("name", ["constant", "power"])
def test_pinned_radial_solve_matches_exact_profile(name):
    c = radial_case(name)
    g = c.grid
    zero = g.interior & (g.node_radius() <= c.r_star)
    u, _ = solve_dirichlet(c.op, sample_boundary(c.bd, g), zero)
    err = np.abs(u.values - c.exact(g.node_radius()))[g.interior].max()
    assert err <= 5 * g.h


def test_pcg_agrees_with_direct_solve():
    g, wf, op = _setup(WeightSpec("power", beta=-1.0), 65)
    bd = sample_boundary(BoundaryData("2 + cos(theta)", 2), g)
    u, _ = solve_dirichlet(op, bd, params=SolverParams(tolerance=1e-12))
    fi = np.flatnonzero(g.interior.ravel())
    fixed = np.where(g.interior, 0.0, bd.values).ravel()
    direct = spla.spsolve(op.K[fi][:, fi].tocsc(), -(op.K @ fixed)[fi])
    assert np.abs(u.values.ravel()[fi] - direct).max() < 1e-9


def test_discrete_maximum_principle():
    g, wf, op = _setup(WeightSpec("power", beta=-1.0), 65)
    bd = BoundaryData("2 + sin(3*theta)", 2)
    u, _ = solve_dirichlet(op, sample_boundary(bd, g))
    vals = u.values[g.interior]
    tr = u.values[g.boundary]
    assert tr.min() - 1e-10 <= vals.min() and vals.max() <= tr.max() + 1e-10


def test_non_convergence_raises_with_best_iterate():
    g, wf, op = _setup(WeightSpec("constant", value=1.0), 65)
    with pytest.raises(ConvergenceError) as info:
        solve_dirichlet(op, sample_boundary(BoundaryData("2 + x", 2), g),
                        params=SolverParams(max_iterations=2))
    assert info.value.field is not None and info.value.residual > 0


@pytest.mark.parametrize("kw", [dict(tolerance=0.0), dict(tolerance=1e-3), dict(max_iterations=0)])
def test_solver_params_validation(kw):
    with pytest.raises(ValueError):
        SolverParams(**kw)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_harmonic_replacement_does_not_increase_energy(seed):
    g, wf, op = _setup(WeightSpec("power", beta=-1.0), 33)
    rng = np.random.default_rng(seed)
    u = ScalarField(np.where(g.exterior, 0.0, rng.random(g.shape)), g)
    c = rng.uniform(-0.2, 0.2, 2)
    rho = 0.5
    rep = harmonic_replacement(u, c, rho, op)
    assert dirichlet_energy(rep, wf) <= dirichlet_energy(u, wf) + 1e-12
    assert ball_energy(rep, wf, c, rho) <= ball_energy(u, wf, c, rho) + 1e-12
    outside = ~(np.sqrt(((g.node_coords() - c[:, None, None]) ** 2).sum(0)) < rho)
    assert np.array_equal(rep.values[outside], u.values[outside])


def test_harmonic_replacement_preconditions():
    g, wf, op = _setup(WeightSpec("constant", value=1.0), 33)
    u = g.zeros()
    with pytest.raises(ValueError):
        harmonic_replacement(u, (0.6, 0.0), 0.5, op)
    with pytest.raises(ValueError):
        harmonic_replacement(u, (0.0, 0.0), 2 * g.h, op)


def test_eigenvalue_matches_dense_solver_small_grid():
    for spec in (WeightSpec("constant", value=1.0), WeightSpec("power", beta=-1.0)):
        g, wf, op = _setup(spec, 33)
        lam = smallest_eigenpair(op, wf).eigenvalue
        assert lam == pytest.approx(dense_smallest_eigenvalue(op, wf), rel=1e-9)


def test_eigenvalue_bessel_oracle_and_convergence():
    errs = []
    for N in (65, 129):
        g, wf, op = _setup(WeightSpec("constant", value=1.0), N)
        errs.append(abs(smallest_eigenpair(op, wf).eigenvalue - J01_SQ) / J01_SQ)
    assert errs[1] < errs[0] and errs[1] < 0.02


def test_eigenvalue_invariant_under_weight_scaling_and_poincare():
    g, wf1, op1 = _setup(WeightSpec("constant", value=1.0), 33)
    _, wf5, op5 = _setup(WeightSpec("constant", value=5.0), 33)
    l1 = smallest_eigenpair(op1, wf1).eigenvalue
    assert smallest_eigenpair(op5, wf5).eigenvalue == pytest.approx(l1, rel=1e-10)
    assert estimate_poincare(op1, wf1) == pytest.approx(1 / l1, rel=1e-12)
    half = smallest_eigenpair(op1, wf1, radius=0.5)
    assert estimate_poincare(op1, wf1, 0.5) == pytest.approx(1 / (half.eigenvalue * 0.25), rel=1e-12)


def test_eigenvector_is_positive():
    g, wf, op = _setup(WeightSpec("power", beta=-1.0), 33)
    v = smallest_eigenpair(op, wf).vector.values[g.interior]
    assert np.all(v > 0)


def test_harnack_ratio_examples():
    g, wf, op = _setup(WeightSpec("constant", value=1.0), 65)
    one = ScalarField(np.where(g.exterior, 0.0, 1.0), g)
    assert harnack_ratio(one, op) == pytest.approx(1.0)
    u, _ = solve_dirichlet(op, sample_boundary(BoundaryData("2 + cos(theta)", 2), g))
    assert harnack_ratio(u, op) > 1
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        harnack_ratio(u.with_values(u.values + 0.1 * rng.random(g.shape)), op)
    with pytest.raises(ValueError):
        harnack_ratio(g.zeros())


def test_harnack_ratio_oracle_for_poisson_kernel_data():
    # g = 2 + cos(theta) has harmonic extension 2 + x; the oracle is that
    # extension sampled on the same half-ball nodes
    g, wf, op = _setup(WeightSpec("constant", value=1.0), 129)
    u, _ = solve_dirichlet(op, sample_boundary(BoundaryData("2 + cos(theta)", 2), g))
    x = g.node_coords()[0][g.interior & (g.node_radius() < 0.5)]
    exact = (2 + x.max()) / (2 + x.min())
    assert harnack_ratio(u, op) == pytest.approx(exact, rel=0.01)
    assert harnack_ratio(u, op) <= 3.0


def test_solve_pinned_no_free_nodes():
    g, wf, op = _setup(WeightSpec("constant", value=1.0), 17)
    vals = np.random.default_rng(0).random(g.shape)
    u, st_ = solve_pinned(op, vals, np.zeros(g.shape, dtype=bool))
    assert np.array_equal(u, vals) and st_.free_nodes == 0


@pytest.mark.parametrize("spec", [WeightSpec("constant", value=1.0), WeightSpec("power", beta=-1.0)])
def test_unit_data_solution_is_one_to_tolerance(spec):
    g, wf, op = _setup(spec, 129)
    tol = SolverParams().tolerance
    u, _ = solve_dirichlet(op, sample_boundary(BoundaryData("1", 2), g))
    assert np.abs(u.values[g.interior] - 1.0).max() <= tol
