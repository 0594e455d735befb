"""Gaussian equilibria, stationarity residuals, and steady states under a perturbed kernel."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, ConvergenceError
from .homogeneous import VDensity, VGrid, gaussian_values
from .model import KernelFamily, ModelParams
from .pde import DensityField, PhaseGrid, kinetic_step, stationarity_residual, weighted_l1_distance


class Branch(str, Enum):
    ZERO = "zero"
    PLUS = "plus"
    MINUS = "minus"

    @property
    def mean(self) -> float:
        return {"zero": 0.0, "plus": 1.0, "minus": -1.0}[self.value]


def equilibrium_density(branch: Branch | str, p: ModelParams, grid: VGrid | PhaseGrid):
    """Discrete Gaussian ``N(mean, sigma)`` of the branch, uniform in ``x`` on phase grids."""
    branch = Branch(branch)
    vg = grid.vgrid if isinstance(grid, PhaseGrid) else grid
    if not vg.covers(branch.mean, p.sigma, 6.0):
        raise ConfigError([f"velocity grid too narrow for the {branch.value} branch"])
    vals = gaussian_values(vg, branch.mean, p.sigma)
    if isinstance(grid, PhaseGrid):
        return DensityField.product(grid, 1.0, vals)
    return VDensity(vg, vals)


@dataclass
class ResidualScan:
    zero: float
    plus: float
    minus: float
    control: float
    control_mean: float = 0.3

    def branches(self) -> dict[str, float]:
        return {"zero": self.zero, "plus": self.plus, "minus": self.minus}


def residual_scan(p: ModelParams, grid: PhaseGrid, control_mean: float = 0.3) -> ResidualScan:
    """Stationarity residuals of the three equilibria and of a non-stationary Gaussian control."""
    res = {b.value: stationarity_residual(equilibrium_density(b, p, grid), p) for b in Branch}
    ctrl = DensityField.product(grid, 1.0, gaussian_values(grid.vgrid, control_mean, p.sigma))
    return ResidualScan(res["zero"], res["plus"], res["minus"], stationarity_residual(ctrl, p), control_mean)


def momentum_profile(f: DensityField) -> np.ndarray:
    """Per-cell first velocity moment ``alpha(x) = int v f dv``."""
    return f.momentum()


def cell_averaged_gaussian(grid: PhaseGrid, mean: float, var: float) -> DensityField:
    """Exact cell averages of ``N(mean, var)`` (times the uniform law in ``x``)."""
    e = (grid.vgrid.edges - mean) / math.sqrt(var)
    w = np.diff(ndtr(e)) / grid.dv
    return DensityField.product(grid, 1.0, w)


@dataclass
class PerturbationResult:
    lam: float
    k: int
    steady: DensityField
    alpha: np.ndarray
    deviation_l1: float          # vs the scheme's discrete N(1, sigma) (x) uniform
    deviation_continuum: float   # vs exact cell averages of N(1, sigma) (x) uniform
    alpha_variation: float
    steps: int

    columns = ("lambda", "k", "deviation_L1", "deviation_continuum_L1", "alpha_variation", "steps_to_converge")

    def row(self):
        return (self.lam, self.k, self.deviation_l1, self.deviation_continuum, self.alpha_variation, self.steps)


def perturbed_steady_state(p: ModelParams, grid: PhaseGrid, dt: float = 1e-2, tol: float = 1e-8,
                           max_steps: int = 50_000, perturbation: float = 0.0) -> PerturbationResult:
    """Relax the full solver from ``N(1, sigma)`` (x) ``(1 + perturbation cos 2 pi x)`` to steady state.

    Stops once ``||f_{n+1} - f_n||_{L1} / dt <= tol``.  The kernel must be
    uniform (``lambda = 0``) or of the ``1 + lambda cos(2 pi k x)`` family.
    """
    fam = p.kernel.family
    if fam is KernelFamily.COSINE:
        lam, k = p.kernel.lam, p.kernel.k
        if lam > 0.5:
            raise ConfigError(["perturbation experiment needs lambda <= 0.5"])
    elif fam is KernelFamily.UNIFORM:
        lam, k = 0.0, 0
    else:
        raise ConfigError(["perturbation experiment needs a uniform or cosine kernel"])
    if not abs(perturbation) < 1:
        raise ConfigError(["initial perturbation amplitude must be < 1"])
    x_profile = 1.0 + perturbation * np.cos(2 * np.pi * grid.x)
    f = DensityField.product(grid, x_profile, gaussian_values(grid.vgrid, 1.0, p.sigma))
    for step in range(1, max_steps + 1):
        g = kinetic_step(f, p, dt)
        change = weighted_l1_distance(g, f)[0] / dt
        f = g
        if change <= tol:
            break
    else:
        raise ConvergenceError(f"no steady state after {max_steps} steps (last change {change:.3e})")
    ref = equilibrium_density(Branch.PLUS, p, grid)
    exact = cell_averaged_gaussian(grid, 1.0, p.sigma)
    alpha = momentum_profile(f)
    return PerturbationResult(
        lam=lam, k=k, steady=f, alpha=alpha,
        deviation_l1=weighted_l1_distance(f, ref)[0],
        deviation_continuum=weighted_l1_distance(f, exact)[0],
        alpha_variation=float(alpha.max() - alpha.min()),
        steps=step,
    )
