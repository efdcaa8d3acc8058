import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from aclab.core import CUBIC, Field, build_grid, inner, solve_profile
from aclab.linop import assemble, fit_decay_rate, project_P, project_perp, semigroup_apply, spectrum


@pytest.fixture(scope="module")
def op30():
    prof = solve_profile(CUBIC, build_grid(30.0, 0.01), scheme="lattice")
    return prof, assemble(prof)


@pytest.fixture(scope="module")
def op_small():
    prof = solve_profile(CUBIC, build_grid(12.0, 0.05), scheme="lattice")
    return prof, assemble(prof)


def test_potential_limits(op30):
    _, op = op30
    assert op.potential.values[0] == pytest.approx(-2.0, abs=1e-12)
    assert op.potential.values[-1] == pytest.approx(-2.0, abs=1e-12)


def test_mprime_in_kernel(fine_profile):
    op = assemble(fine_profile)
    r = op.apply(fine_profile.mp)
    assert np.sqrt(inner(r, r, fine_profile.grid.spacing)) <= 1e-4


def test_quadratic_form_nonnegative_and_symmetric(op_small, rng):
    _, op = op_small
    h = op.grid.spacing
    for _ in range(100):
        phi = rng.standard_normal(op.grid.n_points)
        assert op.quadratic_form(phi, phi) >= -1e-8
    a, b = rng.standard_normal((2, op.grid.n_points))
    assert abs(op.quadratic_form(a, b) - op.quadratic_form(b, a)) <= 1e-12 * abs(op.quadratic_form(a, b)) + 1e-12


def test_spectrum_examples(op30):
    prof, op = op30
    sp = spectrum(op, 5)
    assert abs(sp.eigenvalues[0]) <= 1e-6
    assert abs(sp.eigenvalues[1] - 1.5) <= 2e-3
    assert np.all(np.diff(sp.eigenvalues) > 0)
    h = op.grid.spacing
    phi0, mp = sp.eigenfields[0].values, prof.mp.values
    assert abs(inner(phi0, mp, h)) / np.sqrt(inner(mp, mp, h)) >= 1 - 1e-8
    G = np.array([[inner(a.values, b.values, h) for b in sp.eigenfields] for a in sp.eigenfields])
    assert np.max(np.abs(G - np.eye(5))) <= 1e-10


def test_spectrum_against_dense_oracle(op_small):
    _, op = op_small
    dense = np.linalg.eigvalsh(op.dense())[:4]
    assert np.allclose(spectrum(op, 4).eigenvalues, dense, atol=1e-9)


def test_projection_examples(op_small, rng):
    prof, op = op_small
    g = op.grid
    mp = Field(g, prof.mp.values)
    assert np.max(np.abs(project_P(mp, prof).values - mp.values)) <= 1e-12
    v = Field(g, rng.standard_normal(g.n_points))
    pv = project_P(v, prof)
    assert np.max(np.abs(project_P(pv, prof).values - pv.values)) <= 1e-12
    assert abs(inner(project_perp(v, prof).values, mp.values, g.spacing)) <= 1e-12


def _discrete_kernel_profile(prof, op):
    """Profile whose m' is the ground eigenvector of the assembled operator, scaled like m'."""
    phi = spectrum(op, 1).eigenfields[0].values
    phi = phi * np.sign(inner(phi, prof.mp.values, op.grid.spacing)) * prof.l2_norm_mprime
    return dataclasses.replace(prof, mp=Field(op.grid, phi))


def test_semigroup_examples(op_small, rng):
    prof, op = op_small
    v = rng.standard_normal(op.grid.n_points)
    assert np.array_equal(semigroup_apply(op, 0.0, v), v)
    mp = _discrete_kernel_profile(prof, op).mp.values
    assert np.max(np.abs(semigroup_apply(op, 5.0, mp) - mp)) <= 1e-6


def test_semigroup_fixes_continuum_mprime_to_second_order():
    errs = []
    for h in (0.04, 0.02):
        prof = solve_profile(CUBIC, build_grid(12.0, h), scheme="lattice")
        op = assemble(prof)
        errs.append(np.max(np.abs(semigroup_apply(op, 5.0, prof.mp.values) - prof.mp.values)))
    assert 3.0 <= errs[0] / errs[1] <= 5.0


def test_semigroup_property_and_commutation(op_small, rng):
    prof, op = op_small
    prof = _discrete_kernel_profile(prof, op)
    g = op.grid
    x = g.x
    v = np.exp(-(x - 0.7) ** 2) + 0.3 * np.exp(-(x + 1.5) ** 2 / 2)
    a = semigroup_apply(op, 0.8, semigroup_apply(op, 1.2, v))
    b = semigroup_apply(op, 2.0, v)
    assert np.max(np.abs(a - b)) <= 1e-6
    pa = project_P(Field(g, semigroup_apply(op, 1.0, v)), prof).values
    ap = semigroup_apply(op, 1.0, project_P(Field(g, v), prof).values)
    assert np.max(np.abs(pa - ap)) <= 1e-6


def test_gap_bound(op_small, rng):
    prof, op = op_small
    g = op.grid
    h = g.spacing
    v = np.exp(-(g.x - 0.5) ** 2) * (1 + g.x)
    perp = project_perp(Field(g, v), prof).values
    n0 = np.sqrt(inner(perp, perp, h))
    for t in (1.0, 2.0, 4.0):
        w = semigroup_apply(op, t, v) - project_P(Field(g, v), prof).values
        assert np.sqrt(inner(w, w, h)) <= 1.05 * np.exp(-1.3 * t) * n0


@given(st.floats(-3, 3), st.floats(0.5, 2.0))
def test_decay_rate_at_least_gap(c, w):
    prof, op = _small()
    x = op.grid.x
    v = np.exp(-((x - c) / w) ** 2) * (x - c)
    assert fit_decay_rate(op, v, prof) >= 1.5 * 0.9


_C = {}


def _small():
    if not _C:
        prof = solve_profile(CUBIC, build_grid(10.0, 0.1), scheme="lattice")
        _C["v"] = (prof, assemble(prof))
    return _C["v"]
