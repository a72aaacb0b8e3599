import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from freebound.elliptic import assemble, solve_dirichlet
from freebound.grid import BoundaryData, ScalarField, build_grid, dirichlet_energy, positivity_measure, sample_boundary
from freebound.penalized import (MinimizeConfig, PenaltyParams, SWEEP_HEADER, evaluate_J, f_eps, find_vr_radius,
                                 geometric_schedule, initial_guess_vr, max_principle_bounds, minimize_penalized,
                                 positivity_harmonic_residual, subsolution_residual, sweep_epsilon, truncate,
                                 truncation_probe)
from freebound.weights import WeightSpec, build_weight_field

from conftest import EPS_SMALL, radial_case, radial_solution


def test_f_eps_examples():
    p = PenaltyParams(0.5, 2.0)
    assert f_eps(1.0, p) == 0.0
    assert f_eps(2.0, p) == 0.0
    assert f_eps(3.0, p) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        f_eps(-1.0, p)


@given(st.floats(0, 10), st.floats(0, 10), st.floats(1e-3, 10), st.floats(0.01, 5))
def test_f_eps_monotone_and_linear_slope(a, b, eps, m):
    p = PenaltyParams(eps, m)
    lo, hi = sorted((a, b))
    assert f_eps(lo, p) <= f_eps(hi, p)
    if lo >= m:
        assert f_eps(hi, p) - f_eps(lo, p) == pytest.approx((hi - lo) / eps, rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("kw", [dict(epsilon=0.0, m=1.0), dict(epsilon=1.0, m=0.0), dict(epsilon=-1.0, m=1.0)])
def test_penalty_params_validation(kw):
    with pytest.raises(ValueError):
        PenaltyParams(**kw)


def test_penalty_params_from_fraction():
    c = radial_case("constant", 33)
    with pytest.raises(ValueError):
        PenaltyParams.from_fraction(1.0, 1.0, c.wf)
    with pytest.raises(ValueError):
        PenaltyParams.from_fraction(1.0, 0.0, c.wf)
    with pytest.raises(ValueError):
        PenaltyParams(1.0, c.wf.total_mass).validate(c.wf)
    p = PenaltyParams.from_fraction(0.25, 0.5, c.wf)
    assert p.m == pytest.approx(0.5 * c.wf.total_mass)


def test_minimize_config_validation():
    with pytest.raises(ValueError):
        MinimizeConfig(algorithm="newton")
    with pytest.raises(ValueError):
        MinimizeConfig(anneal_factor=1.0)
    with pytest.raises(ValueError):
        MinimizeConfig(step_rule="wolfe")


def test_evaluate_J_for_constant_field():
    c = radial_case("constant", 65)
    one = ScalarField(np.where(c.grid.exterior, 0.0, 1.0), c.grid)
    p = PenaltyParams(0.5, c.m)
    e = evaluate_J(one, c.wf, p)
    assert e.dirichlet == 0.0
    assert e.measure == pytest.approx(c.wf.total_mass)
    assert e.penalty == pytest.approx((c.wf.total_mass - c.m) / 0.5)
    e2 = evaluate_J(one, c.wf, p.with_epsilon(1.0))
    assert e2.penalty == pytest.approx(e.penalty / 2)


def test_truncate_examples():
    g = build_grid(2, 17)
    u = ScalarField(np.linspace(0, 2, 17 * 17).reshape(17, 17), g)
    tr = truncate(u, 0.5)
    v = u.values
    assert np.allclose(tr.values[v >= 1], v[v >= 1])
    assert np.all(tr.values[v <= 0.5] == 0)
    assert np.allclose(tr.values[(v > 0.5) & (v < 1)], (v[(v > 0.5) & (v < 1)] - 0.5) / 0.5)
    with pytest.raises(ValueError):
        truncate(u, 1.0)
    assert np.array_equal(truncate(u, 0.0).values, u.values)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.0, 0.95))
def test_truncate_positivity_set_identity(seed, t):
    g = build_grid(2, 17)
    u = ScalarField(np.random.default_rng(seed).uniform(0, 1.5, g.shape), g)
    tr = truncate(u, t)
    assert np.array_equal(tr.values > 0, u.values > t)
    assert np.all(tr.values <= np.maximum(u.values, 1.0) + 1e-15)


def test_vr_radius_matches_exact(case):
    r = find_vr_radius(case.grid, case.wf, case.m)
    assert abs(r - case.r_star) <= 2 * case.grid.h
    with pytest.raises(ValueError):
        find_vr_radius(case.grid, case.wf, 1e-9)


def test_initial_guess_vr_properties(case):
    p = PenaltyParams(1.0, case.m)
    v = initial_guess_vr(case.grid, case.wf, case.bd, p, op=case.op)
    assert v.values.min() >= 0
    assert positivity_measure(v, case.wf) <= case.m + 1e-12
    assert np.allclose(v.values[case.grid.boundary], 1.0)


@pytest.mark.parametrize("algorithm", ["replace_truncate", "smoothed_descent"])
@pytest.mark.parametrize("name", ["constant", "power"])
def test_radial_minimizer_matches_exact(name, algorithm):
    c = radial_case(name)
    u, rep = radial_solution(name, algorithm)
    g = c.grid
    err = np.abs(u.values - c.exact(g.node_radius()))[~g.exterior].max()
    assert err <= 5 * g.h
    assert abs(rep.fb_radius_stats[0] - c.r_star) <= 2 * g.h
    assert abs(rep.constraint_residual) <= 0.02 * c.wf.total_mass
    lo, hi = max_principle_bounds(u, c.bd)
    assert lo >= 0 and hi <= 1e-12
    assert subsolution_residual(u, c.op) >= -1e-8
    res, count = positivity_harmonic_residual(u, c.op, 1e-8)
    assert count > 0 and res <= 1e-9


@pytest.mark.parametrize("name", ["constant", "power"])
def test_algorithms_agree_on_energy(name):
    _, a = radial_solution(name, "smoothed_descent")
    _, b = radial_solution(name, "replace_truncate")
    assert a.final.total == pytest.approx(b.final.total, rel=0.01)


@pytest.mark.parametrize("start", ["v_r", "harmonic"])
@pytest.mark.parametrize("algorithm", ["replace_truncate", "smoothed_descent"])
def test_forced_starts_reach_radial_solution(start, algorithm):
    c = radial_case("power", 65)
    u, rep = minimize_penalized(c.grid, c.wf, c.bd, PenaltyParams(EPS_SMALL, c.m),
                                MinimizeConfig(algorithm=algorithm), op=c.op, start=start)
    assert rep.start == start
    err = np.abs(u.values - c.exact(c.grid.node_radius()))[~c.grid.exterior].max()
    assert err <= 5 * c.grid.h
    tot = [e.total for e in rep.energy_trace]
    assert all(b <= a + 1e-12 * abs(a) for a, b in zip(tot, tot[1:]))


def test_warm_start_from_perturbed_field():
    c = radial_case("constant", 65)
    exact = c.exact(c.grid.node_radius())
    noisy = np.where(c.grid.exterior, 0.0, exact + 0.05 * np.random.default_rng(3).random(c.grid.shape))
    u, rep = minimize_penalized(c.grid, c.wf, c.bd, PenaltyParams(EPS_SMALL, c.m), op=c.op,
                                warm_start=ScalarField(noisy, c.grid), start="warm")
    assert np.abs(u.values - exact)[~c.grid.exterior].max() <= 5 * c.grid.h
    with pytest.raises(ValueError):
        minimize_penalized(c.grid, c.wf, c.bd, PenaltyParams(EPS_SMALL, c.m), op=c.op, start="warm")


def test_large_epsilon_minimizer_is_near_harmonic():
    # the penalty costs at most w(B_1)/eps, so the unconstrained extension wins
    g = build_grid(2, 65)
    wf = build_weight_field(WeightSpec("constant", value=1.0), g)
    op = assemble(g, wf)
    bd = BoundaryData("2 + cos(theta)", 2)
    u, rep = minimize_penalized(g, wf, bd, PenaltyParams(1e6, wf.total_mass / 2), op=op)
    h, _ = solve_dirichlet(op, sample_boundary(bd, g))
    assert np.abs(u.values - h.values).max() < 1e-6
    assert rep.final.measure == pytest.approx(wf.total_mass)


def test_report_csv_headers():
    _, rep = radial_solution("constant", "replace_truncate")
    lines = rep.to_csv().splitlines()
    assert lines[0].startswith("algorithm,start,epsilon,m,measure,constraint_residual")
    assert len(lines) == 2
    trace = rep.trace_csv().splitlines()
    assert trace[0] == "iterate,dirichlet,penalty,total,measure"
    assert len(trace) == len(rep.energy_trace) + 1


def test_geometric_schedule():
    s = geometric_schedule(4)
    assert s == [1.0, 0.5, 0.25, 0.125, 0.0625]


def test_sweep_schedule_validation():
    c = radial_case("constant", 33)
    for bad in ([0.5, 0.5], [0.25, 0.5], [], [1.0, -0.5]):
        with pytest.raises(ValueError):
            sweep_epsilon(bad, c.grid, c.wf, c.bd, c.m)


def test_sweep_monotone_and_csv():
    c = radial_case("power", 65)
    res = sweep_epsilon(geometric_schedule(6), c.grid, c.wf, c.bd, c.m)
    assert res.min_energy_monotone()
    assert all(r.probe_ok for r in res.rows)
    assert res.eps_star is not None
    lines = res.to_csv().splitlines()
    assert lines[0] == ",".join(SWEEP_HEADER)
    assert len(lines) == len(res.rows) + 1
    resid = [abs(r.residual) for r in res.rows]
    assert resid[-1] <= resid[0]


def test_truncation_probe_sides():
    c = radial_case("constant", 65)
    u, _ = radial_solution("constant", "replace_truncate", N=65)
    vr = initial_guess_vr(c.grid, c.wf, c.bd, PenaltyParams(1.0, c.m), op=c.op)
    lhs, rhs, _ = truncation_probe(u, c.wf, PenaltyParams(EPS_SMALL, c.m), dirichlet_energy(vr, c.wf))
    assert 0 <= lhs <= rhs


def test_positivity_residual_without_positive_nodes():
    c = radial_case("constant", 33)
    res, count = positivity_harmonic_residual(c.grid.zeros(), c.op)
    assert count == 0 and math.isnan(res)


@pytest.mark.parametrize("spec", [WeightSpec("constant", value=1.0), WeightSpec("power", beta=-1.0)])
def test_algorithms_agree_on_nonradial_data(spec):
    g = build_grid(2, 65)
    wf = build_weight_field(spec, g)
    op = assemble(g, wf)
    bd = BoundaryData("1 + 0.5*cos(theta)", 2)
    p = PenaltyParams(EPS_SMALL, wf.total_mass / 2)
    tot = []
    for alg in ("smoothed_descent", "replace_truncate"):
        u, rep = minimize_penalized(g, wf, bd, p, MinimizeConfig(algorithm=alg), op=op)
        assert abs(rep.constraint_residual) <= 0.02 * wf.total_mass
        assert rep.final.total < rep.energy_trace[0].total
        tot.append(rep.final.total)
    assert tot[0] == pytest.approx(tot[1], rel=0.01)
