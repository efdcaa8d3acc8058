import numpy as np
import pytest
from hypothesis import given, strategies as st

from aclab.core import CUBIC, Field, SupBoundViolation, build_grid, reflect, shift, solve_profile
from aclab.flow import (NotInNeighborhood, dist_to_manifold, flow, flow_array, linear_center,
                        measure_convergence_rate, step_deterministic, zeta)

from conftest import bumps


def test_step_keeps_profile(lattice_profile):
    g = lattice_profile.grid
    assert np.max(np.abs(step_deterministic(lattice_profile.m).values - lattice_profile.m.values)) <= 1e-8
    mth = lattice_profile.translate(g, 0.7)
    assert np.max(np.abs(step_deterministic(mth).values - mth.values)) <= 1e-6


def test_step_contracts_toward_manifold(lattice_profile):
    g = lattice_profile.grid
    v = Field(g, lattice_profile.m.values + 0.05 * np.exp(-g.x**2))
    w = step_deterministic(v, 0.1)
    assert np.max(np.abs(w.values - lattice_profile.m.values)) < np.max(np.abs(v.values - lattice_profile.m.values))


def test_step_sup_monitor():
    g = build_grid(2.0, 0.1)
    with pytest.raises(SupBoundViolation):
        step_deterministic(Field(g, np.full(g.n_points, 3.0)), 0.01)


def test_semigroup_self_convergence(lattice_profile):
    g = lattice_profile.grid
    v = lattice_profile.m.values + 0.1 * np.exp(-(g.x - 0.5) ** 2)
    errs = []
    ref = flow_array(v, 1.0, g, dt=0.00125)
    for dt in (0.02, 0.01, 0.005):
        errs.append(np.max(np.abs(flow_array(v, 1.0, g, dt=dt) - ref)))
    assert errs[0] / errs[1] > 1.8 and errs[1] / errs[2] > 1.8


def test_translation_equivariance_exact(lattice_profile):
    g = lattice_profile.grid
    v = Field(g, lattice_profile.m.values + 0.05 * np.exp(-g.x**2))
    a = shift(Field(g, flow_array(v.values, 1.0, g)), 7)
    b = flow_array(shift(v, 7).values, 1.0, g)
    # exact up to the truncation of the line: the shifted edge differs from the front by |1 - m(L - 0.7)|
    edge = 1.0 - lattice_profile.m.values[-8]
    assert np.max(np.abs(a.values - b)[10:-10]) <= 2 * edge


def test_linear_center_examples(fine_profile, rng):
    g = build_grid(20.0, 0.05)
    mth = fine_profile.translate(g, 1.3)
    assert linear_center(mth, fine_profile) == pytest.approx(1.3, abs=1e-10)
    bump = np.exp(-(g.x - 1.0) ** 2)
    v = mth + 0.02 * bump
    eta = linear_center(v, fine_profile)
    assert abs(eta - 1.3) <= 2.0 * np.max(np.abs(v.values - mth.values))
    assert linear_center(reflect(v), fine_profile) == pytest.approx(-eta, abs=1e-10)


def test_linear_center_outside_neighbourhood(fine_profile):
    g = build_grid(10.0, 0.05)
    with pytest.raises(NotInNeighborhood):
        linear_center(Field(g, np.ones(g.n_points)), fine_profile)


def test_linear_center_lipschitz(fine_profile, rng):
    g = build_grid(10.0, 0.05)
    ratios = []
    for _ in range(8):
        th = rng.uniform(-2, 2)
        mth = fine_profile.translate(g, th)
        pert = bumps(g.x, rng, amp=0.05)
        ratios.append(abs(linear_center(mth + pert, fine_profile) - th) / np.max(np.abs(pert)))
    assert max(ratios) <= 5.0


def test_dist_examples(fine_profile):
    g = build_grid(20.0, 0.05)
    assert dist_to_manifold(fine_profile.translate(g, 0.37), fine_profile) <= 1e-6
    assert dist_to_manifold(-fine_profile.translate(g, 0.0), fine_profile) == pytest.approx(2.0, abs=1e-6)
    d = dist_to_manifold(fine_profile.translate(g, 0.0) + 0.01, fine_profile)
    assert d == pytest.approx(0.01, rel=0.1)


def test_zeta_examples(lattice_profile, rng):
    g = lattice_profile.grid
    mth = lattice_profile.translate(g, 0.4)
    assert zeta(mth, lattice_profile) == pytest.approx(0.4, abs=1e-6)
    v = Field(g, lattice_profile.m.values + 0.05 * np.exp(-(g.x - 0.5) ** 2))
    z10, z20 = zeta(v, lattice_profile, 10.0), zeta(v, lattice_profile, 20.0)
    assert abs(z10 - z20) <= 1e-7
    assert zeta(reflect(v), lattice_profile) == pytest.approx(-z10, abs=2e-8)
    # translation needs a domain wide enough that the truncated tails stay below tol
    wide = solve_profile(CUBIC, build_grid(24.0, 0.1), scheme="lattice")
    gw = wide.grid
    for _ in range(3):
        w = Field(gw, wide.m.values + bumps(gw.x, rng, amp=0.05))
        k = int(rng.integers(-10, 11))
        assert zeta(shift(w, k), wide) == pytest.approx(zeta(w, wide) + k * gw.spacing, abs=2e-8)


def test_flow_monotone_decay_and_rate(lattice_profile):
    g = lattice_profile.grid
    # odd perturbation: orthogonal to m', and the center stays on a grid point, so the distance is not
    # limited by the O(h^4) interpolation floor of off-grid translates
    v = Field(g, lattice_profile.m.values + 0.05 * g.x * np.exp(-g.x**2))
    fr = flow(v, lattice_profile, 8.0, checkpoint_every=0.5)
    ts = [t for t, _ in fr.checkpoints]
    assert np.all(np.diff(ts) > 0)
    d = [dist_to_manifold(u, lattice_profile) for _, u in fr.checkpoints]
    assert np.all(np.diff(d) <= 1e-10)
    assert fr.converged
    r = measure_convergence_rate(v, lattice_profile)
    assert r.rate == pytest.approx(1.5, rel=0.15)


def test_rate_floor_for_manifold_point(lattice_profile):
    r = measure_convergence_rate(lattice_profile.m, lattice_profile)
    assert r.floor_hit and np.isnan(r.rate)


def test_rate_translation_mode(lattice_profile):
    v = lattice_profile.m + 0.05 * lattice_profile.mp.values
    assert measure_convergence_rate(v, lattice_profile).rate >= 0


@given(st.floats(-0.08, 0.08), st.floats(-2.0, 2.0), st.floats(0.5, 2.0))
def test_flow_reduces_distance(amp, c, w):
    prof = _coarse()
    g = prof.grid
    v = Field(g, prof.m.values + amp * np.exp(-((g.x - c) / w) ** 2))
    d0 = dist_to_manifold(v, prof)
    d1 = dist_to_manifold(Field(g, flow_array(v.values, 2.0, g)), prof)
    assert d1 <= d0 + 1e-10


_CACHE = {}


def _coarse():
    if "p" not in _CACHE:
        _CACHE["p"] = solve_profile(CUBIC, build_grid(8.0, 0.1), scheme="lattice")
    return _CACHE["p"]
