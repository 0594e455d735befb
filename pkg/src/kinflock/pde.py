"""Nonlinear kinetic equation on the torus times a truncated velocity line.

Strang splitting: half-step spectral transport in ``x``, one implicit
Chang-Cooper step in ``v`` with drift centre ``G(M(x))`` frozen at the start
of the step, half-step transport.  ``values[i, j]`` is the cell value at
``(x_i, v_j)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigError, MemoryBudgetError, NumericalError
from .homogeneous import MASS_TOL, VDensity, VGrid, gaussian_values, implicit_fp_solve
from .model import InteractionKernel, ModelParams

# spectral transport is not positivity preserving: under-resolved x-profiles undershoot
# by O(aliasing); below this (relative to max f) the undershoot is clipped, beyond it raises
CLIP_TOL = 1e-8
DIRECT_CONV_MAX_NX = 64
SNAPSHOT_MAGIC = b"KFLK"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4sIIIdd")


@dataclass(frozen=True)
class PhaseGrid:
    n_x: int
    vgrid: VGrid

    def __post_init__(self):
        n = self.n_x
        if int(n) != n or n < 16 or (n & (n - 1)) != 0:
            raise ConfigError(["n_x must be a power of two >= 16"])

    @classmethod
    def for_model(cls, sigma: float, mean: float = 0.0, n_x: int = 64, n_v: int = 256) -> PhaseGrid:
        return cls(n_x, VGrid.for_model(sigma, mean, n_v))

    @property
    def dx(self) -> float:
        return 1.0 / self.n_x

    @property
    def x(self) -> np.ndarray:
        return (np.arange(self.n_x) + 0.5) * self.dx

    @property
    def v(self) -> np.ndarray:
        return self.vgrid.centers

    @property
    def dv(self) -> float:
        return self.vgrid.dv

    @property
    def cell(self) -> float:
        return self.dx * self.vgrid.dv

    def refined(self, factor: int = 2) -> PhaseGrid:
        return PhaseGrid(self.n_x * factor, self.vgrid.refined(factor))


@dataclass
class DensityField:
    grid: PhaseGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.validate()

    def validate(self):
        g = self.grid
        if self.values.shape != (g.n_x, g.vgrid.n_points):
            raise NumericalError(f"density has shape {self.values.shape}, grid is {(g.n_x, g.vgrid.n_points)}")
        if not np.all(np.isfinite(self.values)) or self.values.min() < 0:
            raise NumericalError("density must be finite and nonnegative")
        if abs(self.mass() - 1.0) > MASS_TOL:
            raise NumericalError(f"density mass {self.mass()!r} differs from 1")

    @classmethod
    def product(cls, grid: PhaseGrid, x_profile, v_values) -> DensityField:
        """Normalised product ``rho(x) g(v)`` from cell values of each factor."""
        rho = np.broadcast_to(np.asarray(x_profile, dtype=float), (grid.n_x,))
        vals = np.outer(rho, np.asarray(v_values, dtype=float))
        return cls(grid, vals / (vals.sum() * grid.cell))

    @classmethod
    def gaussian(cls, grid: PhaseGrid, mean: float, var: float, x_profile=1.0) -> DensityField:
        return cls.product(grid, x_profile, gaussian_values(grid.vgrid, mean, var))

    @classmethod
    def local_gaussian(cls, grid: PhaseGrid, means, var: float, x_profile=1.0) -> DensityField:
        """``rho(x) N(m(x), var)`` with one velocity mean per x-cell."""
        means = np.broadcast_to(np.asarray(means, dtype=float), (grid.n_x,))
        rho = np.broadcast_to(np.asarray(x_profile, dtype=float), (grid.n_x,))
        vals = np.stack([r * gaussian_values(grid.vgrid, m, var) for r, m in zip(rho, means)])
        return cls(grid, vals / (vals.sum() * grid.cell))

    def mass(self) -> float:
        return float(self.values.sum() * self.grid.cell)

    def density(self) -> np.ndarray:
        """rho(x) = int f dv."""
        return self.values.sum(axis=1) * self.grid.dv

    def momentum(self) -> np.ndarray:
        """j(x) = int v f dv."""
        return self.values @ self.grid.v * self.grid.dv

    def v_marginal(self) -> VDensity:
        return VDensity(self.grid.vgrid, self.values.sum(axis=0) * self.grid.dx)

    def x_marginal(self) -> np.ndarray:
        return self.density()

    def mean_velocity(self) -> float:
        return float(self.momentum().sum() * self.grid.dx)

    def copy(self) -> DensityField:
        return DensityField(self.grid, self.values.copy())


# ---------------------------------------------------------------------------
# nonlocal field


@dataclass
class MeanField:
    values: np.ndarray
    numerator: np.ndarray
    denominator: np.ndarray


def periodic_convolution(kernel: InteractionKernel, data: np.ndarray, path: str = "auto") -> np.ndarray:
    """``(phi * data)(x_i) = sum_k phi(x_i - x_k) data_k dx`` on the periodic grid."""
    n = data.shape[0]
    dx = 1.0 / n
    if path == "auto":
        path = "direct" if n <= DIRECT_CONV_MAX_NX else "fft"
    if path == "direct":
        idx = np.arange(n)
        phi = kernel((idx[:, None] - idx[None, :]) * dx)
        return phi @ data * dx
    if path == "fft":
        phi = np.asarray(kernel(np.arange(n) * dx))
        return np.fft.irfft(np.fft.rfft(phi) * np.fft.rfft(data), n=n) * dx
    raise ValueError(f"unknown convolution path {path!r}")


def local_mean_field(f: DensityField, k: InteractionKernel, path: str = "auto") -> MeanField:
    num = periodic_convolution(k, f.momentum(), path)
    den = periodic_convolution(k, f.density(), path)
    floor = k.epsilon_floor * f.mass() * (1 - 1e-6)
    if den.min() < floor:
        raise NumericalError(f"mean-field denominator {den.min()!r} below floor {floor!r}")
    return MeanField(num / den, num, den)


# ---------------------------------------------------------------------------
# time stepping


@lru_cache(maxsize=32)
def _transport_phase(grid: PhaseGrid, tau: float) -> np.ndarray:
    m = np.fft.rfftfreq(grid.n_x, d=1.0 / grid.n_x)
    return np.exp(-2j * np.pi * m[:, None] * grid.v[None, :] * tau)


def transport(values: np.ndarray, grid: PhaseGrid, tau: float) -> np.ndarray:
    """Exact periodic shift ``f(x, v) -> f(x - v tau, v)`` of the trigonometric interpolant."""
    spec = np.fft.rfft(values, axis=0)
    spec *= _transport_phase(grid, float(tau))
    return np.fft.irfft(spec, n=grid.n_x, axis=0)


def _sweep_roundoff(values: np.ndarray, target_mass: float | None, cell: float) -> np.ndarray:
    lo = values.min()
    if lo < -CLIP_TOL * max(1.0, values.max()):
        raise NumericalError(f"negative density {float(lo)!r} beyond roundoff")
    np.maximum(values, 0.0, out=values)
    if target_mass is not None:
        values *= target_mass / (values.sum() * cell)
    return values


def linear_step(f: DensityField | np.ndarray, grid: PhaseGrid, drift_center: np.ndarray,
                sigma: float, dt: float, forcing: np.ndarray | None = None) -> np.ndarray:
    """One Strang step of the linear equation with a prescribed drift centre ``b(x)``.

    Works on raw arrays so it can carry signed or non-normalised data.
    Returns the new value array.
    """
    vals = f.values if isinstance(f, DensityField) else np.asarray(f, dtype=float)
    mass0 = vals.sum() * grid.cell if forcing is None else None
    half = 0.5 * dt
    out = transport(vals, grid, half)
    out = implicit_fp_solve(out, grid.vgrid, drift_center, sigma, dt, forcing)
    out = transport(out, grid, half)
    if mass0 is not None and mass0 > 0:
        out = _sweep_roundoff(out, mass0, grid.cell)
    return out


def kinetic_step(f: DensityField, p: ModelParams, dt: float) -> DensityField:
    f.validate()
    if not 0 < dt <= 0.1:
        raise ConfigError(["dt must be in (0, 0.1]"])
    mf = local_mean_field(f, p.kernel)
    b = np.asarray(p.herding(mf.values))
    return DensityField(f.grid, linear_step(f, f.grid, b, p.sigma, dt))


@dataclass
class SolveResult:
    times: list[float] = field(default_factory=list)
    mass: list[float] = field(default_factory=list)
    mean_velocity: list[float] = field(default_factory=list)
    v_variance: list[float] = field(default_factory=list)
    v_excess_kurtosis: list[float] = field(default_factory=list)
    x_nonuniformity: list[float] = field(default_factory=list)
    mean_field: list[np.ndarray] = field(default_factory=list)
    final: DensityField | None = None

    columns = ("t", "mass", "mean_v", "var_v", "excess_kurtosis", "x_nonuniformity")

    def rows(self) -> Iterable[tuple[float, ...]]:
        return zip(self.times, self.mass, self.mean_velocity, self.v_variance,
                   self.v_excess_kurtosis, self.x_nonuniformity)


def v_marginal_stats(f: DensityField) -> tuple[float, float, float]:
    """Mean, variance and excess kurtosis of the velocity marginal."""
    g = f.values.sum(axis=0) * f.grid.dx
    v, dv = f.grid.v, f.grid.dv
    m = float(g @ v * dv)
    d = v - m
    var = float(g @ d**2 * dv)
    k4 = float(g @ d**4 * dv)
    return m, var, k4 / var**2 - 3.0


Observer = Callable[[float, DensityField, MeanField], None]


def solve(f0: DensityField, p: ModelParams, t_final: float, dt: float,
          observers: Iterable[Observer] = (), record_every: int = 1) -> SolveResult:
    """Run :func:`kinetic_step` to ``t_final`` recording diagnostics."""
    n_steps = max(1, int(round(t_final / dt)))
    observers = list(observers)
    res = SolveResult()
    f = f0

    def record(t, f, mf):
        m, var, kurt = v_marginal_stats(f)
        rho = f.density()
        res.times.append(t)
        res.mass.append(f.mass())
        res.mean_velocity.append(m)
        res.v_variance.append(var)
        res.v_excess_kurtosis.append(kurt)
        res.x_nonuniformity.append(float(np.max(np.abs(rho - 1.0))))
        res.mean_field.append(mf.values.copy())

    for k in range(n_steps + 1):
        t = k * dt
        mf = local_mean_field(f, p.kernel)
        if k % record_every == 0 or k == n_steps:
            record(t, f, mf)
        for obs in observers:
            obs(t, f, mf)
        if k == n_steps:
            break
        b = np.asarray(p.herding(mf.values))
        f = DensityField(f.grid, linear_step(f, f.grid, b, p.sigma, dt))
    res.final = f
    return res


# ---------------------------------------------------------------------------
# Picard iteration


def weighted_l1_distance(f: DensityField | np.ndarray, g: DensityField | np.ndarray,
                         grid: PhaseGrid | None = None) -> tuple[float, float]:
    """Plain L1 distance and L1 distance with weight ``sqrt(1 + v^2)``."""
    if isinstance(f, DensityField) and isinstance(g, DensityField):
        if f.grid != g.grid:
            raise ValueError("densities live on different grids")
        grid = f.grid
    if grid is None:
        raise ValueError("raw arrays need an explicit grid")
    a = f.values if isinstance(f, DensityField) else f
    b = g.values if isinstance(g, DensityField) else g
    if a.shape != b.shape:
        raise ValueError("densities live on different grids")
    diff = np.abs(a - b)
    w = np.sqrt(1.0 + grid.v**2)
    return float(diff.sum() * grid.cell), float((diff @ w).sum() * grid.cell)


@dataclass
class PicardReport:
    gaps: np.ndarray      # xi^1 .. xi^n
    ratios: np.ndarray    # xi^{n+1} / xi^n
    n_steps: int
    final_iterate: DensityField | None = None

    def rows(self):
        for n, xi in enumerate(self.gaps, start=1):
            r = self.gaps[n - 1] / self.gaps[n - 2] if n >= 2 and self.gaps[n - 2] > 0 else float("nan")
            yield n, float(xi), float(r)


def picard_iterate(f0: DensityField, p: ModelParams, t_final: float, dt: float, n_iters: int,
                   memory_budget: int = 2 * 1024**3) -> PicardReport:
    """Picard scheme: each iterate solves the linear equation driven by the previous one.

    ``f^0`` is ``f0`` frozen in time.  Iterate ``n`` reads ``M^{n-1}(t_k, x)``
    from the stored trajectory of iterate ``n - 1`` at the start of every
    step, exactly as :func:`solve` reads it from the current density.
    """
    if n_iters < 2:
        raise ConfigError(["picard needs at least 2 iterates"])
    f0.validate()
    grid = f0.grid
    n_steps = max(1, int(round(t_final / dt)))
    frame = f0.values.nbytes
    need = 2 * (n_steps + 1) * frame
    if need > memory_budget:
        raise MemoryBudgetError(f"picard needs {need} bytes, budget is {memory_budget}")

    def field_of(vals):
        return np.asarray(p.herding(local_mean_field(DensityField(grid, vals), p.kernel).values))

    b_frozen = field_of(f0.values)
    prev = None  # None => the time-constant zeroth iterate
    gaps = []
    for _ in range(n_iters):
        cur = np.empty((n_steps + 1,) + f0.values.shape)
        cur[0] = f0.values
        xi = 0.0
        for k in range(n_steps):
            b = b_frozen if prev is None else field_of(prev[k])
            cur[k + 1] = linear_step(cur[k], grid, b, p.sigma, dt)
            ref = f0.values if prev is None else prev[k + 1]
            l1, wl1 = weighted_l1_distance(cur[k + 1], ref, grid)
            xi = max(xi, l1 + wl1)
        gaps.append(xi)
        prev = cur
    gaps = np.array(gaps)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = gaps[1:] / gaps[:-1]
    return PicardReport(gaps, ratios, n_steps, DensityField(grid, prev[-1]))


# ---------------------------------------------------------------------------
# stationarity


def stationarity_residual(f: DensityField, p: ModelParams) -> float:
    """L1 norm of ``d_v(sigma d_v f + v f) - v d_x f - G(M(x)) d_v f`` (centred, interior v cells)."""
    g = f.grid
    x = f.values
    v, dv, dx = g.v, g.dv, g.dx
    b = np.asarray(p.herding(local_mean_field(f, p.kernel).values))[:, None]
    fp, fm, fc = x[:, 2:], x[:, :-2], x[:, 1:-1]
    vi = v[1:-1]
    diff = p.sigma * (fp - 2 * fc + fm) / dv**2
    conv = (v[2:] * fp - v[:-2] * fm) / (2 * dv)
    dvf = (fp - fm) / (2 * dv)
    dxf = (np.roll(x, -1, axis=0) - np.roll(x, 1, axis=0))[:, 1:-1] / (2 * dx)
    r = diff + conv - vi * dxf - b * dvf
    return float(np.abs(r).sum() * g.cell)


# ---------------------------------------------------------------------------
# binary snapshots


def write_snapshot(path: str | Path, f: DensityField) -> None:
    g = f.grid
    header = _HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, g.n_x, g.vgrid.n_points, g.vgrid.v_min, g.vgrid.v_max)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def read_snapshot(path: str | Path) -> DensityField:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError("snapshot shorter than its header")
    magic, version, n_x, n_v, vmin, vmax = _HEADER.unpack_from(data)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"bad snapshot magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if body.size != n_x * n_v:
        raise ValueError("snapshot body size does not match header")
    grid = PhaseGrid(n_x, VGrid(vmin, vmax, n_v))
    return DensityField(grid, body.reshape(n_x, n_v).astype(float))


def x_cell_average_cos(grid: PhaseGrid, amp: float, k: int = 1) -> np.ndarray:
    """Exact cell averages of ``1 + amp cos(2 pi k x)``."""
    h = math.pi * k * grid.dx
    return 1.0 + amp * np.cos(2 * math.pi * k * grid.x) * (math.sin(h) / h)
