import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinflock import ConfigError, ConvergenceError, HerdingFunction, InteractionKernel, ModelParams
from kinflock.homogeneous import VGrid
from kinflock.pde import DensityField, PhaseGrid, weighted_l1_distance
from kinflock.stationary import (
    Branch,
    cell_averaged_gaussian,
    equilibrium_density,
    momentum_profile,
    perturbed_steady_state,
    residual_scan,
)

H = HerdingFunction.rational(1.0)


def params(sigma=0.25, kernel=None):
    return ModelParams(sigma, H, kernel or InteractionKernel.von_mises(4.0))


def test_zero_branch_moments():
    f = equilibrium_density("zero", params(1.0), VGrid.for_model(1.0, 0.0, 1024))
    assert abs(f.mean) <= 1e-10
    assert f.variance == pytest.approx(1.0, abs=1e-4)


def test_plus_branch_mean():
    f = equilibrium_density(Branch.PLUS, params(), VGrid.for_model(0.25, 1.0, 512))
    assert f.mean == pytest.approx(1.0, abs=1e-10)
    assert f.mass() == pytest.approx(1.0, abs=1e-12)


def test_minus_is_reflection_of_plus():
    g = VGrid.for_model(0.25, 1.0, 512)
    plus = equilibrium_density("plus", params(), g)
    minus = equilibrium_density("minus", params(), g)
    np.testing.assert_allclose(minus.values, plus.values[::-1], rtol=1e-12, atol=1e-300)


def test_phase_equilibrium_is_uniform_in_x():
    g = PhaseGrid.for_model(0.25, 1.0, 16, 128)
    f = equilibrium_density("plus", params(), g)
    np.testing.assert_allclose(f.density(), 1.0, atol=1e-12)
    np.testing.assert_allclose(momentum_profile(f), 1.0, atol=1e-10)


def test_narrow_grid_rejected():
    with pytest.raises(ConfigError):
        equilibrium_density("plus", params(), VGrid(-1.0, 1.0, 256))


def test_unknown_branch_rejected():
    with pytest.raises(ValueError):
        equilibrium_density("sideways", params(), VGrid.for_model(0.25, 1.0))


def test_residual_scan_separates_branches_from_control():
    g = PhaseGrid.for_model(0.25, 1.0, 16, 64)
    scan = residual_scan(params(), g)
    assert scan.control > 10 * max(scan.branches().values())
    assert scan.plus == pytest.approx(scan.minus, rel=1e-10)


def test_residuals_shrink_under_refinement():
    g = PhaseGrid.for_model(0.25, 1.0, 16, 64)
    a = residual_scan(params(), g)
    b = residual_scan(params(), g.refined())
    for name, r in a.branches().items():
        assert b.branches()[name] <= r / 3.5
    assert abs(b.control - a.control) <= 0.1 * a.control


def test_cell_averaged_gaussian_moments():
    g = PhaseGrid.for_model(0.25, 1.0, 16, 256)
    f = cell_averaged_gaussian(g, 1.0, 0.25)
    assert f.mass() == pytest.approx(1.0, abs=1e-12)
    # cell averaging adds dv^2 / 12 to the variance
    vm = f.v_marginal()
    assert vm.variance == pytest.approx(0.25 + g.dv**2 / 12, abs=1e-8)


@settings(max_examples=15, deadline=None)
@given(st.floats(-0.9, 0.9), st.integers(1, 3))
def test_momentum_profile_is_mean_times_density(amp, k):
    g = PhaseGrid.for_model(0.25, 1.0, 32, 128)
    prof = 1 + amp * np.cos(2 * np.pi * k * g.x)
    f = DensityField.gaussian(g, 1.0, 0.25, prof)
    np.testing.assert_allclose(momentum_profile(f), prof, rtol=1e-10)


def test_momentum_profile_constant_for_homogeneous_data():
    g = PhaseGrid.for_model(0.25, 0.5, 16, 128)
    a = momentum_profile(DensityField.gaussian(g, 0.3, 0.25))
    assert np.ptp(a) <= 1e-14


def test_uniform_kernel_perturbed_start_relaxes_to_equilibrium():
    p = params(kernel=InteractionKernel.uniform())
    g = PhaseGrid.for_model(0.25, 1.0, 32, 128)
    r = perturbed_steady_state(p, g, perturbation=0.3)
    assert r.lam == 0 and r.k == 0
    assert r.deviation_l1 <= 1e-8
    assert r.alpha_variation <= 1e-6
    alpha = float(r.alpha.mean())
    assert abs(float(H(alpha)) - alpha) <= 1e-4


@pytest.mark.parametrize("lam", [0.1, 0.5])
def test_cosine_kernel_steady_state_is_flat(lam):
    p = params(kernel=InteractionKernel.cosine(lam, 1))
    g = PhaseGrid.for_model(0.25, 1.0, 32, 128)
    r = perturbed_steady_state(p, g, perturbation=0.3)
    assert r.alpha_variation <= 1e-6
    assert r.deviation_l1 <= 1e-6
    ref = cell_averaged_gaussian(g, 1.0, 0.25)
    assert r.deviation_continuum == pytest.approx(weighted_l1_distance(r.steady, ref)[0])
    assert len(r.row()) == len(r.columns)


def test_perturbed_run_rejects_bad_input():
    g = PhaseGrid.for_model(0.25, 1.0, 16, 64)
    with pytest.raises(ConfigError):
        perturbed_steady_state(params(kernel=InteractionKernel.cosine(0.7, 1)), g)
    with pytest.raises(ConfigError):
        perturbed_steady_state(params(), g)
    with pytest.raises(ConfigError):
        perturbed_steady_state(params(kernel=InteractionKernel.uniform()), g, perturbation=1.0)


def test_perturbed_run_reports_nonconvergence():
    g = PhaseGrid.for_model(0.25, 1.0, 16, 64)
    with pytest.raises(ConvergenceError):
        perturbed_steady_state(params(kernel=InteractionKernel.cosine(0.2, 1)), g, perturbation=0.3, max_steps=3)
