"""N-particle system on the torus, integrated with Euler-Maruyama.

Each particle feels ``G`` of a kernel-weighted average of the velocities
around it, linear damping, and independent noise of intensity ``sqrt(2 sigma)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigError
from .model import InteractionKernel, ModelParams
from .pde import DensityField, PhaseGrid

log = logging.getLogger(__name__)

_DIRECT_BLOCK = 1024


@dataclass
class ParticleEnsemble:
    positions: np.ndarray
    velocities: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.positions = np.mod(np.asarray(self.positions, dtype=float), 1.0)
        self.velocities = np.asarray(self.velocities, dtype=float)
        if self.positions.shape != self.velocities.shape or self.positions.ndim != 1:
            raise ConfigError(["positions and velocities must be 1D arrays of equal length"])
        if not np.all(np.isfinite(self.velocities)):
            raise ConfigError(["velocities must be finite"])

    @property
    def n(self) -> int:
        return self.positions.size

    def copy(self) -> ParticleEnsemble:
        return ParticleEnsemble(self.positions.copy(), self.velocities.copy(), self.time)


@dataclass(frozen=True)
class SdeConfig:
    dt: float = 1e-2
    t_final: float = 1.0
    seed: int = 0
    force_path: str = "fourier"      # "direct" or "fourier"
    n_modes: int | None = None       # None: kernel default (exact or tail < 1e-14)
    record_stride: int = 0           # 0: no snapshots
    noise_sign: float = 1.0          # -1 flips every noise increment (mirror runs)

    def __post_init__(self):
        errors = []
        if not 0 < self.dt <= 0.05:
            errors.append("dt must be in (0, 0.05]")
        if self.force_path not in ("direct", "fourier"):
            errors.append("force_path must be 'direct' or 'fourier'")
        if self.n_modes is not None and self.n_modes < 1:
            errors.append("n_modes must be >= 1")
        if self.noise_sign not in (1.0, -1.0):
            errors.append("noise_sign must be +1 or -1")
        if errors:
            raise ConfigError(errors)

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.t_final / self.dt)))


class NoiseStream:
    """Counter-based normals: step ``k`` always maps to the same block.

    Particle ``i`` at step ``k`` gets entry ``i`` of the block keyed by
    ``(seed, k)``, so draws do not depend on evaluation order, and the first
    ``N`` entries are the same whatever the ensemble size.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & ((1 << 128) - 1)

    def normals(self, step: int, n: int) -> np.ndarray:
        bg = np.random.Philox(key=self.seed, counter=[0, 0, 0, int(step)])
        return np.random.Generator(bg).standard_normal(n)


def _local_averages_direct(x: np.ndarray, v: np.ndarray, k: InteractionKernel) -> np.ndarray:
    out = np.empty_like(v)
    for lo in range(0, x.size, _DIRECT_BLOCK):
        hi = min(lo + _DIRECT_BLOCK, x.size)
        w = k(x[lo:hi, None] - x[None, :])
        out[lo:hi] = (w @ v) / w.sum(axis=1)
    return out


def _local_averages_fourier(x: np.ndarray, v: np.ndarray, k: InteractionKernel,
                            n_modes: int | None) -> np.ndarray:
    c = k.fourier_coefficients(n_modes)
    modes = np.nonzero(c[1:])[0] + 1
    num = np.full_like(v, c[0] * v.sum())
    den = np.full_like(v, c[0] * v.size)
    if modes.size:
        # phi(x_i - x_j) modes: Re(z_i^m conj(z_j^m)) with z = exp(2 pi i x)
        if modes.size == modes[-1]:
            z = np.exp(2j * np.pi * x)
            zm = np.cumprod(np.broadcast_to(z[:, None], (x.size, modes.size)), axis=1)
        else:
            zm = np.exp(2j * np.pi * np.outer(x, modes))
        w = 2 * c[modes]
        zc = zm.conj()
        num += (zm @ (w * (v @ zc))).real
        den += (zm @ (w * zc.sum(axis=0))).real
    return num / den


def compute_local_averages(e: ParticleEnsemble, k: InteractionKernel, path: str = "fourier",
                           n_modes: int | None = None) -> np.ndarray:
    """Kernel-weighted mean velocity seen by each particle.

    ``direct`` sums all pairs; ``fourier`` expands the kernel in cosine modes
    and costs ``O(N * n_modes)``.
    """
    if path == "direct":
        return _local_averages_direct(e.positions, e.velocities, k)
    if path == "fourier":
        return _local_averages_fourier(e.positions, e.velocities, k, n_modes)
    raise ValueError(f"unknown force path {path!r}")


def em_step(e: ParticleEnsemble, p: ModelParams, cfg: SdeConfig, noise: NoiseStream, step: int,
            local: np.ndarray | None = None) -> ParticleEnsemble:
    if local is None:
        local = compute_local_averages(e, p.kernel, cfg.force_path, cfg.n_modes)
    dt = cfg.dt
    v = e.velocities
    x_new = e.positions + v * dt
    v_new = v + (np.asarray(p.herding(local)) - v) * dt
    if p.sigma > 0:
        v_new += cfg.noise_sign * math.sqrt(2 * p.sigma * dt) * noise.normals(step, e.n)
    return ParticleEnsemble(x_new, v_new, e.time + dt)


StepObserver = Callable[[int, ParticleEnsemble, np.ndarray], None]


@dataclass
class SimulationResult:
    times: list[float] = field(default_factory=list)
    mean_v: list[float] = field(default_factory=list)
    var_v: list[float] = field(default_factory=list)
    order_param: list[float] = field(default_factory=list)
    snapshots: list[ParticleEnsemble] = field(default_factory=list)
    final: ParticleEnsemble | None = None

    columns = ("t", "mean_v", "var_v", "order_param")

    def rows(self):
        return zip(self.times, self.mean_v, self.var_v, self.order_param)


def simulate(e0: ParticleEnsemble, p: ModelParams, cfg: SdeConfig,
             observers: Iterable[StepObserver] = (), record_every: int = 1) -> SimulationResult:
    """Integrate to ``cfg.t_final``; observers see the state and local averages before each step."""
    observers = list(observers)
    noise = NoiseStream(cfg.seed)
    res = SimulationResult()
    e = e0
    n_steps = cfg.n_steps
    for step in range(n_steps + 1):
        if step % record_every == 0 or step == n_steps:
            m = float(e.velocities.mean())
            res.times.append(e.time)
            res.mean_v.append(m)
            res.var_v.append(float(e.velocities.var(ddof=1)))
            res.order_param.append(abs(m))
        if cfg.record_stride and step % cfg.record_stride == 0:
            res.snapshots.append(e.copy())
        local = None
        if observers or step < n_steps:
            local = compute_local_averages(e, p.kernel, cfg.force_path, cfg.n_modes)
        for obs in observers:
            obs(step, e, local)
        if step == n_steps:
            break
        e = em_step(e, p, cfg, noise, step, local)
    res.final = e
    return res


# ---------------------------------------------------------------------------
# initial data and histograms


def sample_positions(n: int, rng: np.random.Generator, amp: float = 0.0, k: int = 1) -> np.ndarray:
    """Samples of the law ``1 + amp cos(2 pi k x)`` on the torus (inverse CDF, Newton)."""
    u = rng.random(n)
    if amp == 0.0:
        return u
    if not abs(amp) < 1:
        raise ConfigError(["position profile amplitude must be < 1 in magnitude"])
    w = 2 * np.pi * k
    x = u.copy()
    for _ in range(50):
        F = x + amp * np.sin(w * x) / w - u
        x_new = np.clip(x - F / (1 + amp * np.cos(w * x)), 0.0, 1.0)
        if np.max(np.abs(x_new - x)) < 1e-15:
            x = x_new
            break
        x = x_new
    return np.mod(x, 1.0)


def sample_ensemble(n: int, v_mean: float, v_var: float, seed: int, x_amp: float = 0.0) -> ParticleEnsemble:
    """I.i.d. product initial data: Gaussian velocities, cosine-profile positions."""
    rng = np.random.default_rng([int(seed), 0x5EED])
    x = sample_positions(n, rng, x_amp)
    v = v_mean + math.sqrt(v_var) * rng.standard_normal(n)
    return ParticleEnsemble(x, v)


def sample_from_density(f: DensityField, n: int, rng: np.random.Generator) -> ParticleEnsemble:
    """I.i.d. samples of the piecewise-constant density ``f``."""
    g = f.grid
    p = f.values.ravel() * g.cell
    idx = rng.choice(p.size, size=n, p=p / p.sum())
    i, j = np.divmod(idx, g.vgrid.n_points)
    x = (i + rng.random(n)) * g.dx
    v = g.vgrid.v_min + (j + rng.random(n)) * g.dv
    return ParticleEnsemble(x, v)


def out_of_range(e: ParticleEnsemble, grid: PhaseGrid) -> int:
    vg = grid.vgrid
    return int(np.count_nonzero((e.velocities < vg.v_min) | (e.velocities >= vg.v_max)))


def empirical_histogram(e: ParticleEnsemble, grid: PhaseGrid) -> DensityField:
    """Cell-count histogram of the empirical measure, normalised to unit mass.

    Particles outside the velocity range land in the boundary cells; their
    number is logged.
    """
    vg = grid.vgrid
    i = np.minimum((e.positions / grid.dx).astype(int), grid.n_x - 1)
    j = np.clip(np.floor((e.velocities - vg.v_min) / vg.dv).astype(int), 0, vg.n_points - 1)
    outside = out_of_range(e, grid)
    if outside:
        log.warning("%d of %d particles outside the velocity grid", outside, e.n)
    counts = np.bincount(i * vg.n_points + j, minlength=grid.n_x * vg.n_points)
    return DensityField(grid, counts.reshape(grid.n_x, vg.n_points) / (e.n * grid.cell))
