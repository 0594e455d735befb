"""Herding function, interaction kernel and model parameters.

The herding function ``G`` is odd with fixed points exactly at -1, 0, 1.  The
interaction kernel ``phi`` is a strictly positive, even, unit-mass weight on
the unit torus ``[0, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import ive

from .errors import ConfigError

#: neglected tail of the von Mises Fourier series used by truncated paths
FOURIER_TAIL_TOL = 1e-14


class HerdingFamily(str, Enum):
    RATIONAL_BETA = "rational"
    TABULATED = "tabulated"


class KernelFamily(str, Enum):
    UNIFORM = "uniform"
    VON_MISES = "vonmises"
    COSINE = "cosine"


@dataclass(frozen=True)
class HerdingFunction:
    """Odd herding law ``G``.

    ``RationalBeta`` is ``G(u) = (1 + beta) u / (1 + beta u^2)``.  ``Tabulated``
    interpolates samples ``(u_k, G_k)`` given for ``u_k >= 0`` with a cubic
    spline fitted to the odd extension of the table; outside the table the
    last value is held, so ``G`` stays bounded.
    """

    family: HerdingFamily = HerdingFamily.RATIONAL_BETA
    beta: float = 1.0
    table_u: tuple[float, ...] = ()
    table_g: tuple[float, ...] = ()
    _spline: CubicSpline | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "family", HerdingFamily(self.family))
        if self.family is HerdingFamily.RATIONAL_BETA:
            if not self.beta > 0:
                raise ConfigError(["beta must be > 0"])
            return
        u = np.asarray(self.table_u, dtype=float)
        g = np.asarray(self.table_g, dtype=float)
        if u.ndim != 1 or u.shape != g.shape or u.size < 2:
            raise ConfigError(["tabulated herding needs matching u/G tables of length >= 2"])
        if u[0] != 0.0 or g[0] != 0.0:
            raise ConfigError(["tabulated herding table must start at (0, 0)"])
        if np.any(np.diff(u) <= 0):
            raise ConfigError(["tabulated herding u values must be strictly increasing"])
        uu = np.concatenate([-u[:0:-1], u])
        gg = np.concatenate([-g[:0:-1], g])
        object.__setattr__(self, "_spline", CubicSpline(uu, gg))

    @classmethod
    def rational(cls, beta: float = 1.0) -> HerdingFunction:
        return cls(HerdingFamily.RATIONAL_BETA, beta=beta)

    @classmethod
    def tabulated(cls, u, g) -> HerdingFunction:
        return cls(HerdingFamily.TABULATED, table_u=tuple(map(float, u)), table_g=tuple(map(float, g)))

    @property
    def _umax(self) -> float:
        return self.table_u[-1]

    def __call__(self, u):
        return herding_eval(self, u)

    def derivative(self, u):
        return herding_derivative(self, u)

    def potential(self, u):
        return herding_potential(self, u)

    def sup_abs(self) -> float:
        """sup |G| over the real line."""
        if self.family is HerdingFamily.RATIONAL_BETA:
            b = self.beta
            return (1 + b) / (2 * np.sqrt(b))
        u = np.linspace(0.0, self._umax, 20001)
        return float(np.max(np.abs(self(u))))

    def check_invariants(self, u_max: float = 10.0, step: float = 1e-3) -> list[str]:
        """Scan ``[-u_max, u_max]`` and list every violated structural property."""
        problems = []
        u = np.arange(step, u_max + step / 2, step)
        g = np.asarray(self(u))
        gm = np.asarray(self(-u))
        if not np.allclose(gm, -g, rtol=0, atol=1e-12):
            problems.append("G is not odd")
        d = g - u
        inner = u < 1 - step / 2
        outer = u > 1 + step / 2
        if not np.all(d[inner] > 0):
            problems.append("G(u) > u fails on (0, 1)")
        if not np.all(d[outer] < 0):
            problems.append("G(u) < u fails on (1, u_max)")
        for p in (0.0, 1.0, -1.0):
            if abs(float(self(p)) - p) > 1e-12:
                problems.append(f"G({p:g}) != {p:g}")
        return problems


def herding_eval(h: HerdingFunction, u):
    """Evaluate ``G(u)``; accepts scalars or arrays."""
    if h.family is HerdingFamily.RATIONAL_BETA:
        b = h.beta
        u = np.asarray(u, dtype=float)
        out = (1 + b) * u / (1 + b * u * u)
    else:
        u = np.asarray(u, dtype=float)
        out = np.sign(u) * h._spline(np.minimum(np.abs(u), h._umax))
    return out if out.ndim else float(out)


def herding_derivative(h: HerdingFunction, u):
    """Evaluate ``G'(u)``."""
    u = np.asarray(u, dtype=float)
    if h.family is HerdingFamily.RATIONAL_BETA:
        b = h.beta
        q = 1 + b * u * u
        out = (1 + b) * (1 - b * u * u) / (q * q)
    else:
        a = np.abs(u)
        out = np.where(a < h._umax, h._spline(np.minimum(a, h._umax), 1), 0.0)
    return out if out.ndim else float(out)


def herding_potential(h: HerdingFunction, u):
    """Potential ``V`` with ``V' = -G`` and ``V(0) = 0``."""
    u = np.asarray(u, dtype=float)
    if h.family is HerdingFamily.RATIONAL_BETA:
        b = h.beta
        out = -(1 + b) / (2 * b) * np.log1p(b * u * u)
    else:
        # G odd => V even; integrate the spline exactly, then hold G constant
        a = np.abs(u)
        um = h._umax
        inner = np.vectorize(lambda s: h._spline.integrate(0.0, s))(np.minimum(a, um))
        out = -(inner + h._spline(um) * np.maximum(a - um, 0.0))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class InteractionKernel:
    """Spatial weight ``phi`` on the unit torus.

    ``vonmises``: ``exp(kappa cos 2 pi x) / I0(kappa)``; ``cosine``:
    ``1 + lam cos(2 pi k x)``; ``uniform``: ``1``.
    """

    family: KernelFamily = KernelFamily.VON_MISES
    kappa: float = 4.0
    lam: float = 0.5
    k: int = 1

    def __post_init__(self):
        object.__setattr__(self, "family", KernelFamily(self.family))
        errors = []
        if self.family is KernelFamily.VON_MISES and not self.kappa > 0:
            errors.append("kappa must be > 0")
        if self.family is KernelFamily.COSINE:
            if not 0 < self.lam < 1:
                errors.append("lambda in (0,1) required for φ ≥ ε > 0")
            if int(self.k) != self.k or self.k < 1:
                errors.append("k must be an integer >= 1")
        if errors:
            raise ConfigError(errors)

    @classmethod
    def uniform(cls) -> InteractionKernel:
        return cls(KernelFamily.UNIFORM)

    @classmethod
    def von_mises(cls, kappa: float = 4.0) -> InteractionKernel:
        return cls(KernelFamily.VON_MISES, kappa=kappa)

    @classmethod
    def cosine(cls, lam: float, k: int = 1) -> InteractionKernel:
        return cls(KernelFamily.COSINE, lam=lam, k=int(k))

    def __call__(self, x):
        return kernel_eval(self, x)

    @property
    def epsilon_floor(self) -> float:
        if self.family is KernelFamily.UNIFORM:
            return 1.0
        if self.family is KernelFamily.COSINE:
            return 1.0 - self.lam
        # exp(-kappa) / I0(kappa) == exp(-2 kappa) / ive(0, kappa)
        return float(np.exp(-2 * self.kappa) / ive(0, self.kappa))

    @property
    def band_limited(self) -> bool:
        return self.family is not KernelFamily.VON_MISES

    def fourier_coefficients(self, n_modes: int | None = None) -> np.ndarray:
        """Cosine coefficients ``c_m`` with ``phi(x) = c_0 + 2 sum_m c_m cos(2 pi m x)``.

        Returns ``c_0 .. c_{n_modes}``; by default just enough modes to hold
        the whole kernel (band-limited families) or to push the neglected
        tail below ``FOURIER_TAIL_TOL`` (von Mises).
        """
        if n_modes is None:
            n_modes = self.default_modes()
        c = np.zeros(n_modes + 1)
        c[0] = 1.0
        if self.family is KernelFamily.COSINE:
            if self.k <= n_modes:
                c[self.k] = self.lam / 2
        elif self.family is KernelFamily.VON_MISES:
            m = np.arange(1, n_modes + 1)
            c[1:] = ive(m, self.kappa) / ive(0, self.kappa)
        return c

    def default_modes(self) -> int:
        if self.family is KernelFamily.UNIFORM:
            return 1
        if self.family is KernelFamily.COSINE:
            return int(self.k)
        m = np.arange(1, 400)
        c = ive(m, self.kappa) / ive(0, self.kappa)
        tail = 2 * np.cumsum(c[::-1])[::-1]
        # tail[i] = 2 * sum_{m >= i+1} c_m, i.e. what is dropped when keeping i modes
        keep = int(np.argmax(tail < FOURIER_TAIL_TOL))
        return max(keep, 1)


def kernel_eval(k: InteractionKernel, x):
    x = np.asarray(x, dtype=float)
    if k.family is KernelFamily.UNIFORM:
        out = np.ones_like(x)
    elif k.family is KernelFamily.COSINE:
        out = 1.0 + k.lam * np.cos(2 * np.pi * k.k * x)
    else:
        # exp(kappa cos) / I0 written with scaled Bessel to avoid overflow
        out = np.exp(k.kappa * (np.cos(2 * np.pi * x) - 1.0)) / ive(0, k.kappa)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class ModelParams:
    sigma: float = 0.25
    herding: HerdingFunction = field(default_factory=HerdingFunction)
    kernel: InteractionKernel = field(default_factory=InteractionKernel)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(["sigma must be > 0"])
