import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad

from aclab.core import (CUBIC, ConfigurationError, Field, NumericError, UnsupportedError, build_grid,
                        custom_reaction, eval_reaction, inner, laplacian, load_field, reflect, save_field,
                        shift, solve_profile, weighted_norm)


def test_build_grid_counts():
    assert build_grid(15.0, 0.25).n_points == 121
    assert build_grid(30.0, 0.01).n_points == 6001
    with pytest.raises(ConfigurationError):
        build_grid(10.0, 0.3, "neumann")


@given(st.integers(1, 400), st.sampled_from([0.5, 0.25, 0.1, 0.05]))
def test_grid_point_relation(cells, h):
    g = build_grid(cells * h, h)
    assert g.n_points == 2 * cells + 1
    assert g.x[(g.n_points - 1) // 2] == 0.0


def test_field_rejects_bad_values():
    g = build_grid(1.0, 0.5)
    with pytest.raises(ConfigurationError):
        Field(g, np.zeros(3))
    with pytest.raises(NumericError):
        Field(g, np.array([0, 1, np.nan, 0, 0.0]))


@given(st.floats(-5, 5, allow_nan=False))
def test_laplacian_constant_neumann(c):
    g = build_grid(2.0, 0.1, "neumann")
    assert np.all(laplacian(Field(g, np.full(g.n_points, c))).values == 0.0)


@pytest.mark.parametrize("bc", ["dirichlet_pm1", "dirichlet_zero", "neumann"])
def test_laplacian_quadratic_and_sine(bc):
    g = build_grid(3.0, 0.01, bc)
    lq = laplacian(Field(g, g.x**2)).values
    assert np.allclose(lq[1:-1], 2.0, atol=1e-8)
    ls = laplacian(Field(g, np.sin(g.x))).values
    assert np.max(np.abs(ls[1:-1] + np.sin(g.x[1:-1]))) <= 1e-4


def test_weighted_norm_examples(fine_profile):
    g = build_grid(10.0, 0.01)
    for p, lam in [(1, 0.0), (2, 0.5), (math.inf, 1.0)]:
        assert weighted_norm(Field(g, np.zeros(g.n_points)), p, lam) == 0.0
    assert weighted_norm(Field(g, np.exp(-2 * np.abs(g.x))), math.inf, 1.0) == pytest.approx(1.0, abs=1e-15)
    mp_norm = weighted_norm(fine_profile.mp, 2, 0.0)
    oracle = math.sqrt(quad(lambda x: (1 / math.sqrt(2) / math.cosh(x / math.sqrt(2)) ** 2) ** 2,
                            -40, 40, epsabs=1e-14, limit=200)[0])
    assert mp_norm == pytest.approx(0.970984, abs=1e-6)
    assert fine_profile.l2_sq == pytest.approx(oracle**2, abs=1e-8)
    with pytest.raises(NumericError, match="lambda"):
        weighted_norm(Field(g, np.ones(g.n_points)), 2, 50.0)


def test_reaction_values():
    assert eval_reaction(CUBIC, 1.0, 0) == 0.0
    assert eval_reaction(CUBIC, 0.0, 0) == 0.0
    assert eval_reaction(CUBIC, 0.0, 1) == 1.0
    with pytest.raises(UnsupportedError):
        eval_reaction(CUBIC, 0.0, 4)


def test_reaction_oddness(rng):
    u = rng.uniform(-2, 2, 1000)
    assert np.max(np.abs(eval_reaction(CUBIC, -u) + eval_reaction(CUBIC, u))) <= 1e-14


def test_custom_reaction_validated():
    with pytest.raises(ConfigurationError):
        custom_reaction(lambda u, k: [u + u**2, 1 + 2 * u, 2 + 0 * u, 0 * u][k])
    sine = custom_reaction(lambda u, k: [np.sin(np.pi * u), np.pi * np.cos(np.pi * u),
                                         -np.pi**2 * np.sin(np.pi * u), -np.pi**3 * np.cos(np.pi * u)][k])
    assert sine(0.5, 0) == pytest.approx(1.0)


def test_profile_against_closed_form(fine_profile):
    x = fine_profile.grid.x
    assert np.max(np.abs(fine_profile.m.values - np.tanh(x / math.sqrt(2)))) <= 1e-6
    assert fine_profile.m.values[(x.size - 1) // 2] == 0.0
    assert np.all(np.diff(fine_profile.m.values) > 0)
    assert fine_profile.decay_constant == pytest.approx(math.sqrt(2), rel=0.01)


def test_profile_reflection_and_derivatives(fine_profile):
    m, h = fine_profile.m.values, fine_profile.grid.spacing
    assert np.max(np.abs(m + m[::-1])) <= 1e-12
    fd = np.gradient(fine_profile.mp.values, h)
    assert np.max(np.abs(fd[1:-1] - fine_profile.mpp.values[1:-1])) <= 2 * h**2
    x = fine_profile.grid.x
    for d in (fine_profile.mp, fine_profile.mpp, fine_profile.mppp):
        core = np.abs(x) < 15
        assert np.all(np.abs(d.values[core]) <= fine_profile.decay_prefactor *
                      np.exp(-fine_profile.decay_constant * np.abs(x[core])) * (1 + 1e-6) + 1e-12)


def test_lattice_profile_is_discrete_fixed_point(lattice_profile):
    m, g = lattice_profile.m, lattice_profile.grid
    r = laplacian(m).values + eval_reaction(CUBIC, m.values)
    assert np.max(np.abs(r)) <= 1e-10


def test_profile_requires_pm1_boundary():
    with pytest.raises(ConfigurationError):
        solve_profile(CUBIC, build_grid(5.0, 0.1, "neumann"))


def test_translate_interpolation(fine_profile):
    g = build_grid(8.0, 0.05)
    th = 0.3183
    err = fine_profile.translate(g, th).values - np.tanh((g.x - th) / math.sqrt(2))
    assert np.max(np.abs(err)) <= 1e-6


@given(st.integers(-20, 20))
def test_shift_and_reflect_roundtrip(k):
    g = build_grid(5.0, 0.1)
    v = Field(g, np.tanh(g.x) + 0.1 * np.exp(-g.x**2))
    assert np.array_equal(reflect(reflect(v)).values, v.values)
    w = shift(shift(v, k), -k)
    inner_ = slice(abs(k), g.n_points - abs(k)) if k else slice(None)
    assert np.array_equal(w.values[inner_], v.values[inner_])


def test_field_csv_roundtrip(tmp_path, rng):
    g = build_grid(2.0, 0.1)
    v = Field(g, rng.standard_normal(g.n_points))
    save_field(v, tmp_path / "v.csv")
    assert (tmp_path / "v.csv").read_text().startswith("x,value\n")
    w = load_field(tmp_path / "v.csv")
    assert np.array_equal(w.values, v.values)
    assert inner(w.values, v.values, g.spacing) > 0
