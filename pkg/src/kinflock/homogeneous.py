"""Space-homogeneous dynamics: moments, cumulants, velocity-space Fokker-Planck.

The velocity density solves

    d_t f = -G(<w>_f) d_v f + d_v(v f) + sigma d_vv f

whose moment hierarchy is closed from below, so any truncation order is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import solve_banded
from scipy.special import comb

from .errors import ConfigError, NumericalError
from .model import ModelParams

#: cells below this value contribute nothing to f log f and are skipped in 1/f
DENSITY_FLOOR = 1e-300
MASS_TOL = 1e-10
#: default velocity half-width beyond max(|mean|, 1), in standard deviations
V_MARGIN_SD = 8.0


# ---------------------------------------------------------------------------
# grids and densities


@dataclass(frozen=True)
class VGrid:
    """Uniform cell-centred velocity grid on ``[v_min, v_max]`` with zero-flux ends."""

    v_min: float
    v_max: float
    n_points: int

    def __post_init__(self):
        errors = []
        if not self.v_min < 0 < self.v_max:
            errors.append("velocity grid needs v_min < 0 < v_max")
        if int(self.n_points) != self.n_points or self.n_points < 16:
            errors.append("n_v must be an integer >= 16")
        if errors:
            raise ConfigError(errors)

    @classmethod
    def for_model(cls, sigma: float, mean: float = 0.0, n_points: int = 256,
                  margin_sd: float = V_MARGIN_SD) -> VGrid:
        """Symmetric grid with ``v_max = max(|mean|, 1) + margin_sd * sqrt(sigma)``."""
        vmax = max(abs(mean), 1.0) + margin_sd * math.sqrt(sigma)
        return cls(-vmax, vmax, int(n_points))

    @property
    def dv(self) -> float:
        return (self.v_max - self.v_min) / self.n_points

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.v_min, self.v_max, self.n_points + 1)

    @property
    def centers(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (e[1:] + e[:-1])

    def covers(self, mean: float, sigma: float, n_sd: float = 6.0) -> bool:
        half = n_sd * math.sqrt(sigma)
        return self.v_min <= mean - half and self.v_max >= mean + half

    def refined(self, factor: int = 2) -> VGrid:
        return VGrid(self.v_min, self.v_max, self.n_points * factor)


def gaussian_values(grid: VGrid, mean: float, var: float) -> np.ndarray:
    """Gaussian sampled at cell centres and renormalised to unit discrete mass.

    Point sampling (not cell averaging) is what makes the drifted Gaussian an
    exact null vector of the Chang-Cooper operator.
    """
    v = grid.centers
    g = np.exp(-0.5 * (v - mean) ** 2 / var)
    return g / (g.sum() * grid.dv)


@dataclass
class VDensity:
    grid: VGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.validate()

    def validate(self):
        if self.values.shape != (self.grid.n_points,):
            raise NumericalError(f"density has shape {self.values.shape}, grid has {self.grid.n_points} cells")
        if not np.all(np.isfinite(self.values)) or self.values.min() < 0:
            raise NumericalError("density must be finite and nonnegative")
        if abs(self.mass() - 1.0) > MASS_TOL:
            raise NumericalError(f"density mass {self.mass()!r} differs from 1")

    @classmethod
    def gaussian(cls, grid: VGrid, mean: float, var: float) -> VDensity:
        return cls(grid, gaussian_values(grid, mean, var))

    @classmethod
    def mixture(cls, grid: VGrid, means, variances, weights) -> VDensity:
        w = np.asarray(weights, dtype=float)
        vals = sum(wi * gaussian_values(grid, m, s) for wi, m, s in zip(w / w.sum(), means, variances))
        return cls(grid, vals / (vals.sum() * grid.dv))

    def mass(self) -> float:
        return float(self.values.sum() * self.grid.dv)

    def moment(self, n: int) -> float:
        return float(np.sum(self.values * self.grid.centers**n) * self.grid.dv)

    def moments(self, k: int) -> np.ndarray:
        v = self.grid.centers
        return np.array([np.sum(self.values * v**n) * self.grid.dv for n in range(k + 1)])

    @property
    def mean(self) -> float:
        return self.moment(1)

    @property
    def variance(self) -> float:
        m = self.mean
        return float(np.sum(self.values * (self.grid.centers - m) ** 2) * self.grid.dv)


# ---------------------------------------------------------------------------
# moments and cumulants


@dataclass
class MomentState:
    moments: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.moments = np.asarray(self.moments, dtype=float)
        if self.moments.ndim != 1 or self.moments.size < 2:
            raise ConfigError(["moment vector needs at least (M_0, M_1)"])
        if self.moments[0] != 1.0:
            raise ConfigError(["M_0 must equal 1"])
        if self.moments.size > 2:
            m1, m2 = self.moments[1], self.moments[2]
            if m2 - m1 * m1 < -1e-12 * max(1.0, m2):
                raise ConfigError(["M_2 >= M_1^2 required"])

    @property
    def order(self) -> int:
        return self.moments.size - 1


@dataclass
class CumulantState:
    cumulants: np.ndarray  # (C_1, ..., C_K)
    time: float = 0.0

    def __post_init__(self):
        self.cumulants = np.asarray(self.cumulants, dtype=float)
        if self.cumulants.size >= 2 and self.cumulants[1] < 0:
            raise ConfigError(["C_2 >= 0 required"])


def _moment_rhs(m: np.ndarray, g1: float, sigma: float) -> np.ndarray:
    n = np.arange(m.size, dtype=float)
    m_prev = np.empty_like(m)
    m_prev[0] = 0.0
    m_prev[1:] = m[:-1]
    m_prev2 = np.empty_like(m)
    m_prev2[:2] = 1.0  # M_{-1} := M_0 = 1; multiplied by n(n-1) = 0 anyway
    m_prev2[2:] = m[:-2]
    out = n * g1 * m_prev - n * m + sigma * n * (n - 1) * m_prev2
    out[0] = 0.0
    return out


def moment_rhs(s: MomentState, p: ModelParams) -> np.ndarray:
    """Time derivatives of ``(M_0, ..., M_K)``."""
    if s.order < 2:
        raise ConfigError(["moment hierarchy needs K >= 2"])
    return _moment_rhs(s.moments, p.herding(s.moments[1]), p.sigma)


def moment_trajectory(s0: MomentState, p: ModelParams, t_final: float, dt: float,
                      record_every: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Classical RK4 for the moment hierarchy; returns ``(times, moments)``."""
    if not dt > 0:
        raise ConfigError(["dt must be > 0"])
    if dt > 0.1:
        raise ConfigError(["dt must be <= 0.1"])
    if s0.order < 2:
        raise ConfigError(["moment hierarchy needs K >= 2"])
    n_steps = max(1, int(math.ceil(t_final / dt - 1e-12)))
    h = t_final / n_steps
    G, sigma = p.herding, p.sigma

    def rhs(m):
        return _moment_rhs(m, G(m[1]), sigma)

    m = s0.moments.copy()
    times, rows = [s0.time], [m.copy()]
    for k in range(1, n_steps + 1):
        k1 = rhs(m)
        k2 = rhs(m + 0.5 * h * k1)
        k3 = rhs(m + 0.5 * h * k2)
        k4 = rhs(m + h * k3)
        m = m + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if k % record_every == 0 or k == n_steps:
            times.append(s0.time + k * h)
            rows.append(m.copy())
    return np.array(times), np.array(rows)


def integrate_moments(s0: MomentState, p: ModelParams, t_final: float, dt: float) -> MomentState:
    times, rows = moment_trajectory(s0, p, t_final, dt, record_every=10**12)
    return MomentState(rows[-1], float(times[-1]))


def moments_to_cumulants(s: MomentState | np.ndarray) -> CumulantState:
    m = s.moments if isinstance(s, MomentState) else np.asarray(s, dtype=float)
    t = s.time if isinstance(s, MomentState) else 0.0
    k = m.size - 1
    c = np.zeros(k + 1)  # c[0] unused
    for n in range(1, k + 1):
        acc = m[n]
        for j in range(1, n):
            acc -= comb(n - 1, j - 1, exact=True) * c[j] * m[n - j]
        c[n] = acc
    return CumulantState(c[1:], t)


def cumulants_to_moments(c: CumulantState | np.ndarray) -> MomentState:
    cc = c.cumulants if isinstance(c, CumulantState) else np.asarray(c, dtype=float)
    t = c.time if isinstance(c, CumulantState) else 0.0
    k = cc.size
    cum = np.concatenate([[0.0], cc])
    m = np.zeros(k + 1)
    m[0] = 1.0
    for n in range(1, k + 1):
        acc = cum[n]
        for j in range(1, n):
            acc += comb(n - 1, j - 1, exact=True) * cum[j] * m[n - j]
        m[n] = acc
    return MomentState(m, t)


def mean_path(m0: float, p: ModelParams, t: float) -> float:
    """Solve ``dC_1/dt = G(C_1) - C_1`` to tight tolerance."""
    if t == 0:
        return float(m0)
    G = p.herding
    sol = solve_ivp(lambda _, y: [G(y[0]) - y[0]], (0.0, t), [m0],
                    method="DOP853", rtol=1e-12, atol=1e-14)
    if not sol.success:
        raise NumericalError(sol.message)
    return float(sol.y[0, -1])


def cumulant_closed_form(c0: CumulantState, p: ModelParams, t: float) -> CumulantState:
    if t < 0:
        raise ConfigError(["t must be >= 0"])
    c = c0.cumulants
    out = np.empty_like(c)
    out[0] = mean_path(c[0], p, t)
    if c.size > 1:
        out[1] = p.sigma + (c[1] - p.sigma) * math.exp(-2 * t)
    n = np.arange(3, c.size + 1)
    out[2:] = c[2:] * np.exp(-n * t)
    return CumulantState(out, c0.time + t)


@dataclass(frozen=True)
class GaussianEvolution:
    mean: float
    variance: float


def gaussian_evolution(m0: float, B0: float, p: ModelParams, t: float) -> GaussianEvolution:
    if not B0 > 0:
        raise ConfigError(["B0 must be > 0"])
    B = math.exp(-2 * t) * B0 + p.sigma * (1 - math.exp(-2 * t))
    return GaussianEvolution(mean_path(m0, p, t), B)


# ---------------------------------------------------------------------------
# Chang-Cooper finite volumes in velocity


def _bernoulli(z: np.ndarray) -> np.ndarray:
    """``B(z) = z / (exp(z) - 1)`` with ``B(0) = 1``."""
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1e-8
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 - 0.5 * z, safe / np.expm1(safe))


def fp_operator_bands(grid: VGrid, drift_center, sigma: float):
    """Bands of the operator ``d_v[(v - a) f + sigma d_v f]`` with zero-flux ends.

    ``drift_center`` is ``a`` (scalar or one value per column).  Returns
    ``(lower, diag, upper)`` each shaped ``(n_cols, n_v)``; ``lower[:, j]``
    multiplies ``f[j-1]`` and ``upper[:, j]`` multiplies ``f[j+1]``.
    """
    a = np.atleast_1d(np.asarray(drift_center, dtype=float))[:, None]
    dv = grid.dv
    s = sigma / dv**2
    vf = grid.edges[1:-1][None, :]  # interior faces
    z = (a - vf) * dv / sigma
    bp = _bernoulli(z)   # weight on the upper cell
    bm = _bernoulli(-z)  # weight on the lower cell
    n_cols, n = a.shape[0], grid.n_points
    lower = np.zeros((n_cols, n))
    upper = np.zeros((n_cols, n))
    diag = np.zeros((n_cols, n))
    upper[:, :-1] = s * bp
    lower[:, 1:] = s * bm
    diag[:, :-1] -= s * bm
    diag[:, 1:] -= s * bp
    return lower, diag, upper


def implicit_fp_solve(values: np.ndarray, grid: VGrid, drift_center, sigma: float, dt: float,
                      forcing: np.ndarray | None = None) -> np.ndarray:
    """One backward-Euler step ``(I - dt L_a) f_new = f + dt U`` per column.

    ``values`` is ``(n_v,)`` or ``(n_cols, n_v)``.  Columns are independent
    (zero-flux ends) so all of them go through a single banded solve.
    """
    vals = np.asarray(values, dtype=float)
    squeeze = vals.ndim == 1
    vals = np.atleast_2d(vals)
    n_cols, n = vals.shape
    a = np.broadcast_to(np.asarray(drift_center, dtype=float), (n_cols,))
    lower, diag, upper = fp_operator_bands(grid, a, sigma)
    ab = np.zeros((3, n_cols * n))
    # upper band: ab[0, i+1] = A[i, i+1]; column blocks stay decoupled since upper[:, -1] == 0
    ab[0, 1:] = (-dt * upper).ravel()[:-1]
    ab[1] = (1.0 - dt * diag).ravel()
    ab[2, :-1] = (-dt * lower).ravel()[1:]
    rhs = vals.ravel()
    if forcing is not None:
        rhs = rhs + dt * np.asarray(forcing, dtype=float).ravel()
    out = solve_banded((1, 1), ab, rhs, overwrite_ab=True, check_finite=False).reshape(n_cols, n)
    return out[0] if squeeze else out


def homogeneous_step(f: VDensity, p: ModelParams, dt: float) -> VDensity:
    """Advance the space-homogeneous equation by ``dt``.

    The drift centre ``G(M_1)`` is taken from the incoming density; the
    linear drift-diffusion part is implicit, so the step is positive and
    conservative for any ``dt``.
    """
    f.validate()
    if not dt > 0:
        raise ConfigError(["dt must be > 0"])
    a = p.herding(f.mean)
    new = implicit_fp_solve(f.values, f.grid, a, p.sigma, dt)
    # the M-matrix keeps values >= 0 in exact arithmetic; sweep roundoff only
    np.maximum(new, 0.0, out=new)
    return VDensity(f.grid, new)


# ---------------------------------------------------------------------------
# entropy


def entropy(f: VDensity, p: ModelParams) -> float:
    v, dv, x = f.grid.centers, f.grid.dv, f.values
    xlogx = np.where(x > DENSITY_FLOOR, x * np.log(np.where(x > DENSITY_FLOOR, x, 1.0)), 0.0)
    return float(np.sum(xlogx + v * v * x / (2 * p.sigma)) * dv + p.herding.potential(f.mean) / p.sigma)


def entropy_production(f: VDensity, p: ModelParams) -> float:
    v, dv, x = f.grid.centers, f.grid.dv, f.values
    a = p.herding(f.mean)
    dfdv = np.gradient(x, dv, edge_order=2)
    flux = p.sigma * dfdv + (v - a) * x
    ok = x > DENSITY_FLOOR
    integrand = np.where(ok, flux**2 / (p.sigma * np.where(ok, x, 1.0)), 0.0)
    return float(np.sum(integrand) * dv)


def equilibrium_values(grid: VGrid, mean: float, p: ModelParams) -> np.ndarray:
    return gaussian_values(grid, mean, p.sigma)


@dataclass
class Trajectory:
    """Rows ``(t, M_1, C_2, C_3, C_4, S, D_S)`` plus optional density snapshots."""

    columns: tuple[str, ...] = ("t", "M1", "C2", "C3", "C4", "S", "D_S")
    rows: list[tuple[float, ...]] = field(default_factory=list)
    final: VDensity | None = None

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows])


def _row(t: float, f: VDensity, p: ModelParams) -> tuple[float, ...]:
    c = moments_to_cumulants(f.moments(4)).cumulants
    return (t, c[0], c[1], c[2], c[3], entropy(f, p), entropy_production(f, p))


def evolve(f0: VDensity, p: ModelParams, t_final: float, dt: float,
           observer: Callable[[float, VDensity], None] | None = None,
           record_every: int = 1) -> Trajectory:
    """Repeated :func:`homogeneous_step` recording moments and entropy."""
    n_steps = max(1, int(round(t_final / dt)))
    traj = Trajectory()
    f = f0
    traj.rows.append(_row(0.0, f, p))
    if observer:
        observer(0.0, f)
    for k in range(1, n_steps + 1):
        f = homogeneous_step(f, p, dt)
        t = k * dt
        if k % record_every == 0 or k == n_steps:
            traj.rows.append(_row(t, f, p))
        if observer:
            observer(t, f)
    traj.final = f
    return traj


@dataclass
class DecayReport:
    times: np.ndarray
    relative_entropy: np.ndarray
    rate: float
    fit_window: tuple[float, float]
    target_mean: float


def fit_exponential_rate(times, values, window: tuple[float, float]) -> float:
    """Least-squares slope of ``-log(values)`` against time inside ``window``."""
    t = np.asarray(times)
    y = np.asarray(values)
    sel = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12) & (y > 0)
    if sel.sum() < 2:
        raise NumericalError("not enough positive samples in the fit window")
    slope = np.polyfit(t[sel], np.log(y[sel]), 1)[0]
    return float(-slope)


def entropy_decay_experiment(f0: VDensity, p: ModelParams, t_final: float, dt: float = 1e-2,
                             window: tuple[float, float] | None = None) -> DecayReport:
    """Track ``S(f_t) - S(mu_pm)`` and fit its exponential decay rate.

    The reference equilibrium is the discrete Gaussian on the same grid with
    mean +1 (if ``M_1(0) > 0``) or -1.  The default fit window is the second
    half of the horizon.  ``rate`` is NaN when the relative entropy is at
    roundoff level throughout the window.
    """
    m0 = f0.mean
    if abs(m0) < 1e-8:
        raise ConfigError(["entropy decay needs a nonzero initial mean"])
    target = 1.0 if m0 > 0 else -1.0
    s_inf = entropy(VDensity(f0.grid, equilibrium_values(f0.grid, target, p)), p)
    times, rel = [], []

    def obs(t, f):
        times.append(t)
        rel.append(entropy(f, p) - s_inf)

    evolve(f0, p, t_final, dt, observer=obs, record_every=10**12)
    if window is None:
        window = (0.5 * t_final, t_final)
    times_a, rel_a = np.array(times), np.array(rel)
    in_window = (times_a >= window[0] - 1e-12) & (times_a <= window[1] + 1e-12)
    # already at equilibrium (to roundoff): no rate to fit
    if np.all(np.abs(rel_a[in_window]) <= 64 * np.finfo(float).eps * max(1.0, abs(s_inf))):
        rate = float("nan")
    else:
        rate = fit_exponential_rate(times_a, rel_a, window)
    return DecayReport(times_a, rel_a, rate, window, target)
