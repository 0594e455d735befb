import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinflock import ConfigError, HerdingFunction, ModelParams, NumericalError
from kinflock.homogeneous import (
    CumulantState,
    MomentState,
    VDensity,
    VGrid,
    cumulant_closed_form,
    cumulants_to_moments,
    entropy,
    entropy_decay_experiment,
    entropy_production,
    evolve,
    gaussian_evolution,
    homogeneous_step,
    implicit_fp_solve,
    integrate_moments,
    mean_path,
    moment_rhs,
    moment_trajectory,
    moments_to_cumulants,
)

P = ModelParams(0.25, HerdingFunction.rational(1.0))
P1 = ModelParams(1.0, HerdingFunction.rational(1.0))


def gaussian_moments(m, s, k):
    c = np.zeros(k)
    c[0] = m
    if k > 1:
        c[1] = s
    return cumulants_to_moments(c).moments


# --- grids and states ------------------------------------------------------


@given(st.floats(0.01, 4.0), st.floats(-3.0, 3.0))
def test_truncation_rule(sigma, mean):
    g = VGrid.for_model(sigma, mean)
    assert g.v_max >= max(abs(mean), 1) + 6 * math.sqrt(sigma)
    assert g.v_min == -g.v_max
    assert g.covers(mean, sigma)


def test_grid_validation():
    with pytest.raises(ConfigError):
        VGrid(0.0, 1.0, 64)
    with pytest.raises(ConfigError):
        VGrid(-1.0, 1.0, 8)


def test_vdensity_invariants():
    g = VGrid.for_model(0.25, 0.0, 64)
    with pytest.raises(NumericalError):
        VDensity(g, np.full(64, 1.0))
    bad = VDensity.gaussian(g, 0.0, 0.25).values.copy()
    bad[0] = -1e-3
    bad[1] += 1e-3
    with pytest.raises(NumericalError):
        VDensity(g, bad)


def test_moment_state_invariants():
    with pytest.raises(ConfigError):
        MomentState([0.9, 0.0, 1.0])
    with pytest.raises(ConfigError):
        MomentState([1.0, 1.0, 0.5])
    with pytest.raises(ConfigError):
        CumulantState([0.0, -0.1])


# --- moment hierarchy ------------------------------------------------------


def test_moment_rhs_equilibria():
    s = 0.25
    np.testing.assert_allclose(moment_rhs(MomentState([1.0, 0.0, s]), P), 0.0, atol=1e-15)
    np.testing.assert_allclose(moment_rhs(MomentState([1.0, 1.0, s + 1]), P), 0.0, atol=1e-15)


def test_moment_rhs_first_component():
    r = moment_rhs(MomentState([1.0, 0.5, 0.5]), P)
    assert r[0] == 0.0
    assert r[1] == pytest.approx(0.3, abs=1e-15)


def test_moment_rhs_rejects_low_order():
    with pytest.raises(ConfigError):
        moment_rhs(MomentState([1.0, 0.5]), P)


@pytest.mark.parametrize("m1,target", [(0.5, 1.0), (-0.5, -1.0)])
def test_moments_select_branch(m1, target):
    s = integrate_moments(MomentState(gaussian_moments(m1, 0.25, 4)), P, 30.0, 1e-2)
    assert abs(s.moments[1] - target) <= 1e-6
    assert abs(s.moments[1]) <= 1.0
    assert s.moments[0] == 1.0


def test_second_moment_closed_form():
    s0 = MomentState([1.0, 0.0, 2.0])
    times, rows = moment_trajectory(s0, P1, 3.0, 1e-3, record_every=100)
    np.testing.assert_allclose(rows[:, 2], 1 + np.exp(-2 * times), atol=1e-12)


@pytest.mark.parametrize("dt", [0.0, -1e-3, 0.2])
def test_moment_dt_rejected(dt):
    with pytest.raises(ConfigError):
        integrate_moments(MomentState([1.0, 0.5, 0.5]), P, 1.0, dt)


@settings(max_examples=25, deadline=None)
@given(st.floats(-1.5, 1.5).filter(lambda x: abs(x) > 1e-3), st.floats(0.05, 1.0))
def test_mean_sign_is_invariant(m1, var):
    times, rows = moment_trajectory(MomentState(gaussian_moments(m1, var, 2)), P, 10.0, 0.05)
    assert np.all(np.sign(rows[:, 1]) == np.sign(m1))


# --- cumulants -------------------------------------------------------------


def test_gaussian_cumulants_vanish():
    c = moments_to_cumulants(gaussian_moments(0.7, 0.3, 6)).cumulants
    np.testing.assert_allclose(c, [0.7, 0.3, 0, 0, 0, 0], atol=1e-14)


def test_third_cumulant_from_zero_mean():
    c = moments_to_cumulants(MomentState([1.0, 0.0, 1.0, 0.5])).cumulants
    assert c[2] == pytest.approx(0.5, abs=1e-15)


def test_poisson_cumulants_are_all_one():
    # Poisson(1) raw moments are the Bell numbers
    bell = [1, 1, 2, 5, 15, 52, 203]
    c = moments_to_cumulants(np.array(bell, float)).cumulants
    np.testing.assert_allclose(c, 1.0, atol=1e-12)


@given(st.lists(st.floats(-2.0, 2.0), min_size=2, max_size=7))
def test_cumulant_round_trip(cs):
    c = np.array(cs)
    c[1] = abs(c[1])
    back = moments_to_cumulants(cumulants_to_moments(c)).cumulants
    np.testing.assert_allclose(back, c, atol=1e-9 * max(1.0, np.abs(cumulants_to_moments(c).moments).max()))


def test_cumulant_closed_form_values():
    c = cumulant_closed_form(CumulantState([0.5, 0.25, 1.0, 2.0]), P, 1.0).cumulants
    assert c[2] == pytest.approx(math.exp(-3), rel=1e-14)
    assert c[1] == pytest.approx(0.25, abs=1e-15)
    c = cumulant_closed_form(CumulantState([0.5, 0.25, 0.0, 2.0]), P, 0.5).cumulants
    assert c[3] == pytest.approx(2 * math.exp(-2), rel=1e-14)
    assert c[3] == pytest.approx(0.27067, abs=1e-5)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.5, 10.0), st.integers(2, 8))
def test_hierarchy_matches_closed_form(seed, t, k):
    rng = np.random.default_rng(seed)
    c0 = np.concatenate([[rng.uniform(-1, 1), rng.uniform(0.05, 1)], rng.uniform(-0.3, 0.3, k - 2)])
    s = integrate_moments(cumulants_to_moments(c0), P, t, 1e-3)
    got = moments_to_cumulants(s).cumulants
    want = cumulant_closed_form(CumulantState(c0), P, t).cumulants
    np.testing.assert_allclose(got[1:], want[1:], atol=1e-6)
    assert got[0] == pytest.approx(want[0], abs=1e-6)


def test_mean_path_is_logistic_free_of_sign_change():
    assert mean_path(0.5, P, 0.0) == 0.5
    assert mean_path(0.0, P, 5.0) == 0.0
    assert 0.5 < mean_path(0.5, P, 1.0) < 1.0


# --- Gaussian evolution system ----------------------------------------------


def test_gaussian_evolution_values():
    assert gaussian_evolution(0.3, 0.25, P, 7.0).variance == pytest.approx(0.25, abs=1e-15)
    assert gaussian_evolution(0.3, 0.5, P, math.log(2) / 2).variance == pytest.approx(0.375, abs=1e-15)
    with pytest.raises(ConfigError):
        gaussian_evolution(0.3, 0.0, P, 1.0)


# --- velocity scheme -------------------------------------------------------


@pytest.mark.parametrize("sigma,mean", [(0.25, 1.0), (0.25, -1.0), (0.25, 0.0), (1.0, 1.0)])
def test_discrete_equilibrium_is_preserved(sigma, mean):
    p = ModelParams(sigma, HerdingFunction.rational(1.0))
    f = VDensity.gaussian(VGrid.for_model(sigma, mean, 256), mean, sigma)
    g = homogeneous_step(f, p, 1e-2)
    assert np.abs(g.values - f.values).sum() * f.grid.dv <= 1e-8


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-1.5, 1.5), st.floats(0.05, 1.0), st.floats(0.1, 1.0)),
                min_size=1, max_size=3),
       st.floats(1e-3, 0.1))
def test_step_conserves_mass_and_sign(components, dt):
    means, variances, weights = zip(*components)
    f = VDensity.mixture(VGrid.for_model(0.25, 1.5, 128), means, variances, weights)
    g = homogeneous_step(f, P, dt)
    assert abs(g.mass() - f.mass()) <= 1e-12
    assert g.values.min() >= 0


def test_batched_solve_matches_columnwise():
    g = VGrid.for_model(0.25, 1.0, 64)
    rng = np.random.default_rng(3)
    vals = rng.random((5, 64))
    a = rng.uniform(-1, 1, 5)
    batched = implicit_fp_solve(vals, g, a, 0.25, 0.05)
    for i in range(5):
        np.testing.assert_allclose(batched[i], implicit_fp_solve(vals[i], g, a[i], 0.25, 0.05), rtol=1e-13)


def test_pde_mean_tracks_moment_ode():
    g = VGrid.for_model(0.25, 0.5, 512)
    traj = evolve(VDensity.gaussian(g, 0.5, 0.25), P, 10.0, 5e-3, record_every=100)
    ref = moment_trajectory(MomentState(gaussian_moments(0.5, 0.25, 2)), P, 10.0, 5e-3, record_every=100)[1]
    assert np.max(np.abs(traj.column("M1") - ref[:, 1])) <= 1e-3
    assert np.max(np.abs(traj.column("C2") - (ref[:, 2] - ref[:, 1] ** 2))) <= 1e-3


def test_linear_ou_variance_first_order_in_dt():
    # frozen G(1) = 1 and B0 = 2 sigma: variance follows the closed form up to O(dt + dv^2)
    g = VGrid.for_model(0.25, 1.0, 512)
    errs = []
    for dt in (2e-2, 1e-2):
        f = VDensity.gaussian(g, 1.0, 0.5)
        for _ in range(int(round(1.0 / dt))):
            f = homogeneous_step(f, P, dt)
        errs.append(abs(f.variance - gaussian_evolution(1.0, 0.5, P, 1.0).variance))
    assert errs[1] < 0.6 * errs[0]
    assert errs[1] < 5e-3


# --- entropy ---------------------------------------------------------------


def test_entropy_closed_forms():
    g = VGrid.for_model(1.0, 1.0, 512)
    assert entropy(VDensity.gaussian(g, 0.0, 1.0), P1) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-10)
    want = -0.5 * math.log(2 * math.pi) + 0.5 - math.log(2)
    assert entropy(VDensity.gaussian(g, 1.0, 1.0), P1) == pytest.approx(want, abs=1e-10)
    assert want == pytest.approx(-1.11208, abs=1e-5)


def test_production_small_at_equilibrium():
    errs = []
    for n in (128, 256):
        g = VGrid.for_model(0.25, 1.0, n)
        errs.append(entropy_production(VDensity.gaussian(g, 1.0, 0.25), P))
        assert errs[-1] <= g.dv**2
    assert errs[1] < errs[0]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-1.5, 1.5), st.floats(0.05, 1.0), st.floats(0.1, 1.0)),
                min_size=1, max_size=3))
def test_production_nonnegative_and_entropy_decreases(components):
    means, variances, weights = zip(*components)
    f = VDensity.mixture(VGrid.for_model(0.25, 1.5, 128), means, variances, weights)
    assert entropy_production(f, P) >= 0
    g = homogeneous_step(f, P, 1e-2)
    s0, s1 = entropy(f, P), entropy(g, P)
    assert s1 <= s0 + 64 * np.finfo(float).eps * max(1.0, abs(s0))


def test_dissipation_identity_one_step():
    g = VGrid.for_model(0.25, 0.5, 512)
    f = VDensity.mixture(g, [-0.2, 0.8], [0.1, 0.3], [0.4, 0.6])
    dt = 1e-4
    lhs = -(entropy(homogeneous_step(f, P, dt), P) - entropy(f, P)) / dt
    assert lhs == pytest.approx(entropy_production(f, P), rel=2e-2)


def test_decay_from_equilibrium_stays_zero():
    g = VGrid.for_model(0.25, 1.0, 256)
    rep = entropy_decay_experiment(VDensity.gaussian(g, 1.0, 0.25), P, 2.0, 1e-2)
    assert np.max(np.abs(rep.relative_entropy)) <= 1e-8
    assert math.isnan(rep.rate)


def test_decay_relative_entropy_nonnegative_and_fast():
    g = VGrid.for_model(0.25, 0.5, 256)
    rep = entropy_decay_experiment(VDensity.gaussian(g, -0.5, 0.25), P, 8.0, 1e-2, window=(4.0, 8.0))
    assert rep.target_mean == -1.0
    assert np.all(rep.relative_entropy >= -1e-12)
    assert rep.rate >= 1.8


def test_decay_rejects_zero_mean():
    g = VGrid.for_model(0.25, 0.0, 128)
    with pytest.raises(ConfigError):
        entropy_decay_experiment(VDensity.gaussian(g, 0.0, 0.25), P, 1.0)


def test_trajectory_columns():
    g = VGrid.for_model(0.25, 0.5, 64)
    traj = evolve(VDensity.gaussian(g, 0.5, 0.25), P, 0.1, 1e-2)
    assert traj.columns == ("t", "M1", "C2", "C3", "C4", "S", "D_S")
    assert len(traj.rows) == 11
    assert traj.column("t")[-1] == pytest.approx(0.1)
