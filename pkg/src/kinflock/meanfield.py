"""Particle-to-PDE convergence diagnostics.

Distances between an empirical measure and a density are measured on a finite
family of smooth test functions and by the exact 1D Wasserstein-1 distance of
the velocity marginals.  The martingale part of the empirical dynamics is
reconstructed from ensemble snapshots with left-endpoint sums.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .model import ModelParams
from .particles import ParticleEnsemble, SdeConfig, compute_local_averages, sample_ensemble, simulate
from .pde import DensityField, PhaseGrid, solve, x_cell_average_cos

Measure = ParticleEnsemble | DensityField


@dataclass(frozen=True)
class TestFunction:
    """``trig(2 pi kx x) * b((v - center) / width)`` with ``b(r) = (1 - r^2)^3`` on ``|r| < 1``.

    ``b`` is C^2 with compact support, so the function and its first two
    velocity derivatives are bounded; ``sup |psi| = 1``.  ``width = inf``
    drops the velocity factor.
    """

    kx: int = 0
    kind: str = "cos"
    center: float = 0.0
    width: float = 1.0

    def __post_init__(self):
        if self.kind not in ("cos", "sin"):
            raise ConfigError(["test function kind must be 'cos' or 'sin'"])
        if self.kx < 0 or (self.kx == 0 and self.kind == "sin"):
            raise ConfigError(["need kx >= 0, and kx > 0 for sine factors"])
        if not self.width > 0:
            raise ConfigError(["test function width must be > 0"])

    def _x(self, x, order=0):
        w = 2 * np.pi * self.kx
        x = np.asarray(x, dtype=float)
        if self.kind == "cos":
            return np.cos(w * x) if order == 0 else -w * np.sin(w * x)
        return np.sin(w * x) if order == 0 else w * np.cos(w * x)

    def _v(self, v, order=0):
        v = np.asarray(v, dtype=float)
        if not self.depends_on_v:
            return np.ones_like(v) if order == 0 else np.zeros_like(v)
        r = (v - self.center) / self.width
        inside = np.abs(r) < 1
        q = np.where(inside, 1 - r * r, 0.0)
        if order == 0:
            return q**3
        if order == 1:
            return -6 * r * q**2 / self.width
        return -6 * q * (1 - 5 * r * r) / self.width**2

    def value(self, x, v):
        return self._x(x) * self._v(v)

    def dx(self, x, v):
        return self._x(x, 1) * self._v(v)

    def dv(self, x, v):
        return self._x(x) * self._v(v, 1)

    def dvv(self, x, v):
        return self._x(x) * self._v(v, 2)

    @property
    def depends_on_v(self) -> bool:
        return math.isfinite(self.width)


TestFunctionFamily = Sequence[TestFunction]


def default_family(centers=(-0.5, 0.5, 1.5), width: float = 1.5, max_k: int = 3) -> list[TestFunction]:
    fam = []
    for c in centers:
        fam.append(TestFunction(0, "cos", c, width))
        for k in range(1, max_k + 1):
            fam.append(TestFunction(k, "cos", c, width))
            fam.append(TestFunction(k, "sin", c, width))
    return fam


def pairing(measure: Measure, psi: TestFunction) -> float:
    """``<measure, psi>``: sample mean for ensembles, midpoint sum for densities."""
    if isinstance(measure, ParticleEnsemble):
        return float(np.mean(psi.value(measure.positions, measure.velocities)))
    g = measure.grid
    vals = psi._x(g.x)[:, None] * psi._v(g.v)[None, :]
    return float(np.sum(vals * measure.values) * g.cell)


def empirical_vs_density_gap(e: ParticleEnsemble, f: DensityField, fam: TestFunctionFamily) -> float:
    gap = max(abs(pairing(e, psi) - pairing(f, psi)) for psi in fam)
    return min(gap, 1.0)


# ---------------------------------------------------------------------------
# exact 1D Wasserstein-1 between velocity marginals


def _cdf_sides(m: Measure, t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Breakpoints of the marginal CDF and its right/left limits at points ``t``."""
    if isinstance(m, ParticleEnsemble):
        s = np.sort(m.velocities)
        return s, np.searchsorted(s, t, "right") / s.size, np.searchsorted(s, t, "left") / s.size
    vg = m.grid.vgrid
    w = m.values.sum(axis=0) * m.grid.cell
    cdf = np.concatenate([[0.0], np.cumsum(w)])
    cdf /= cdf[-1]
    val = np.interp(t, vg.edges, cdf, left=0.0, right=1.0)
    return vg.edges, val, val


def v_marginal_w1(a: Measure, b: Measure) -> float:
    """Exact ``W_1`` of the velocity marginals (step or piecewise-linear CDFs)."""
    ta, _, _ = _cdf_sides(a, np.empty(0))
    tb, _, _ = _cdf_sides(b, np.empty(0))
    t = np.unique(np.concatenate([ta, tb]))
    if t.size < 2:
        return 0.0
    _, ra, la = _cdf_sides(a, t)
    _, rb, lb = _cdf_sides(b, t)
    d0 = (ra - rb)[:-1]   # difference just right of t_k
    d1 = (la - lb)[1:]    # difference just left of t_{k+1}
    h = np.diff(t)
    same = d0 * d1 >= 0
    s = np.abs(d0) + np.abs(d1)
    cross = np.divide(d0 * d0 + d1 * d1, 2 * s, out=np.zeros_like(s), where=s > 0)
    return float(np.sum(h * np.where(same, 0.5 * s, cross)))


# ---------------------------------------------------------------------------
# martingale reconstruction


class MartingaleTracker:
    """Streaming observer reconstructing the martingale term for each test function.

    Called once per step with the state and local averages at the left
    endpoint; keeps the running ``sup_t |M_t|``.
    """

    def __init__(self, p: ModelParams, fam: TestFunctionFamily, dt: float):
        self.p = p
        self.fam = list(fam)
        self.dt = dt
        self.p0 = None
        self.drift_sum = np.zeros(len(self.fam))
        self.sup = np.zeros(len(self.fam))
        self.last = np.zeros(len(self.fam))
        self.history: list[np.ndarray] = []

    def __call__(self, step: int, e: ParticleEnsemble, local: np.ndarray) -> None:
        x, v = e.positions, e.velocities
        drift = np.asarray(self.p.herding(local)) - v
        cur = np.array([np.mean(psi.value(x, v)) for psi in self.fam])
        if self.p0 is None:
            self.p0 = cur
        m = cur - self.p0 - self.drift_sum
        self.last = m
        self.history.append(m)
        np.maximum(self.sup, np.abs(m), out=self.sup)
        gen = np.array([
            np.mean(v * psi.dx(x, v) + drift * psi.dv(x, v) + self.p.sigma * psi.dvv(x, v))
            for psi in self.fam
        ])
        self.drift_sum += gen * self.dt


def martingale_diagnostic(trajectory: Sequence[ParticleEnsemble], p: ModelParams, fam: TestFunctionFamily,
                          dt: float, force_path: str = "fourier") -> np.ndarray:
    """``sup_t |M_t^psi|`` for each test function from per-step snapshots."""
    tr = MartingaleTracker(p, fam, dt)
    for k, e in enumerate(trajectory):
        tr(k, e, compute_local_averages(e, p.kernel, force_path))
    return tr.sup


def fit_order(ns, values) -> float:
    """Slope of ``log(values)`` against ``log(ns)``."""
    return float(np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(values, float)), 1)[0])


# ---------------------------------------------------------------------------
# co-evolution experiment


@dataclass(frozen=True)
class InitialData:
    """Product initial law: ``N(v_mean, v_var)`` in velocity, ``1 + x_amp cos(2 pi x)`` in space."""

    v_mean: float = 0.5
    v_var: float = 0.25
    x_amp: float = 0.5

    def density(self, grid: PhaseGrid) -> DensityField:
        return DensityField.gaussian(grid, self.v_mean, self.v_var, x_cell_average_cos(grid, self.x_amp))

    def ensemble(self, n: int, seed: int) -> ParticleEnsemble:
        return sample_ensemble(n, self.v_mean, self.v_var, seed, self.x_amp)


@dataclass
class ConvergenceReport:
    rows: list[tuple[int, int, float, float, float]] = field(default_factory=list)
    gap_order: float = float("nan")
    martingale_order: float = float("nan")
    w1_by_n: dict[int, float] = field(default_factory=dict)
    gap_by_n: dict[int, float] = field(default_factory=dict)
    martingale_rms_by_n: dict[int, float] = field(default_factory=dict)

    columns = ("N", "seed", "gap", "w1", "sup_martingale")


def _particle_run(args):
    p, init, n, seed, dt, t_final, fam, mart_fam = args
    cfg = SdeConfig(dt=dt, t_final=t_final, seed=seed)
    tracker = MartingaleTracker(p, mart_fam, dt)
    res = simulate(init.ensemble(n, seed), p, cfg, observers=[tracker], record_every=10**12)
    return n, seed, res.final, float(tracker.sup.max())


def meanfield_experiment(p: ModelParams, ns: Sequence[int], seeds: Sequence[int], t_final: float, dt: float,
                         grid: PhaseGrid, init: InitialData = InitialData(),
                         fam: TestFunctionFamily | None = None,
                         martingale_fam: TestFunctionFamily | None = None,
                         pde_dt: float | None = None, workers: int = 1) -> ConvergenceReport:
    """Co-evolve particle systems and the PDE from the same initial law and compare at ``t_final``."""
    fam = default_family() if fam is None else list(fam)
    martingale_fam = [TestFunction(0, "cos", 1.0, 2.0)] if martingale_fam is None else list(martingale_fam)
    f_t = solve(init.density(grid), p, t_final, pde_dt or dt, record_every=10**12).final
    jobs = [(p, init, int(n), int(s), dt, t_final, fam, martingale_fam) for n in ns for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_particle_run, jobs))
    else:
        results = [_particle_run(j) for j in jobs]
    rep = ConvergenceReport()
    for n, seed, final, sup_m in results:
        rep.rows.append((n, seed, empirical_vs_density_gap(final, f_t, fam), v_marginal_w1(final, f_t), sup_m))
    rows = np.array([r for r in rep.rows], dtype=float)
    for n in ns:
        sel = rows[:, 0] == n
        rep.gap_by_n[int(n)] = float(rows[sel, 2].mean())
        rep.w1_by_n[int(n)] = float(rows[sel, 3].mean())
        rep.martingale_rms_by_n[int(n)] = float(math.sqrt(np.mean(rows[sel, 4] ** 2)))
    nn = [int(n) for n in ns]
    if len(nn) >= 2:
        rep.gap_order = fit_order(nn, [rep.gap_by_n[n] for n in nn])
        rep.martingale_order = fit_order(nn, [rep.martingale_rms_by_n[n] for n in nn])
    return rep
