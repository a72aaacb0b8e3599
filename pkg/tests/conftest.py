"""Shared radial test problems.

Two exact configurations on the unit disk with ``g = 1``:

* ``constant``: w = 1, m = pi/2.  Zero set ``B_r*`` with ``r* = 1/sqrt(2)``
  (from ``pi (1 - r*^2) = m``); ``u = log(r/r*) / log(1/r*)`` outside.
* ``power``: w = 1/|x|, m = pi.  ``2 pi (1 - r*) = m`` gives ``r* = 1/2``;
  ``(r * r^-1 * u')' = 0`` gives ``u = 2r - 1`` outside.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import pytest

from freebound.elliptic import StencilOperator, assemble
from freebound.grid import BoundaryData, Grid, build_grid
from freebound.penalized import MinimizeConfig, PenaltyParams, minimize_penalized
from freebound.weights import WeightField, WeightSpec, build_weight_field

EPS_SMALL = 2.0 ** -8


@dataclass(eq=False)
class RadialCase:
    name: str
    spec: WeightSpec
    m: float
    r_star: float
    grid: Grid
    wf: WeightField
    op: StencilOperator
    bd: BoundaryData

    def exact(self, r):
        r = np.asarray(r, dtype=float)
        rs = self.r_star
        if self.name == "constant":
            prof = np.log(np.maximum(r, 1e-300) / rs) / np.log(1 / rs)
        else:
            prof = (r - rs) / (1 - rs)
        return np.where(r > rs, prof, 0.0)


SPECS = {
    "constant": (WeightSpec("constant", value=1.0), np.pi / 2, 2 ** -0.5),
    "power": (WeightSpec("power", beta=-1.0), np.pi, 0.5),
}


@lru_cache(maxsize=None)
def radial_case(name: str, N: int = 129) -> RadialCase:
    spec, m, rs = SPECS[name]
    g = build_grid(2, N)
    wf = build_weight_field(spec, g)
    return RadialCase(name, spec, m, rs, g, wf, assemble(g, wf), BoundaryData("1", 2))


@lru_cache(maxsize=None)
def radial_solution(name: str, algorithm: str, N: int = 129, eps: float = EPS_SMALL):
    c = radial_case(name, N)
    return minimize_penalized(c.grid, c.wf, c.bd, PenaltyParams(eps, c.m),
                              MinimizeConfig(algorithm=algorithm), op=c.op)


@pytest.fixture(params=["constant", "power"])
def case(request) -> RadialCase:
    return radial_case(request.param)


_ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """``criterion(k, ok, detail)`` prints and records one pass/fail line, then asserts ``ok``."""

    def record(k, ok, detail):
        line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        _ACCEPTANCE_LINES.append(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
