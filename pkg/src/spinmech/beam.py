"""Euler-Bernoulli mechanics of diamond pillars, cantilevers and nanobeams.

Cross-section coordinates: for a pillar the NV offset ``xi`` and the force
are 2-vectors in the plane of the cross-section, measured from the neutral
axis. For beams, x runs along the length from the clamp and z across the
thickness from the neutral plane, so |xi_z| <= t/2.

Bending stresses follow the compressive-positive sign convention used by
:mod:`spinmech.spin`: the side of the beam towards which it bends is in
compression and carries positive stress.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import optimize

from .exceptions import ElasticLimitError, NumericalError, RankDeficiencyError

DIAMOND_E = 1.220e12  # Pa
DIAMOND_RHO = 3515.0  # kg/m^3
DEFAULT_FORCE_LIMIT = 10e-6  # N

SHAPES = ("cylindrical_pillar", "rectangular_cantilever", "doubly_clamped_beam")


@dataclass(frozen=True)
class BeamGeometry:
    """Device shape and material.

    ``length`` is the pillar height h or the beam length l. ``axis`` is the
    crystal direction of the long axis, used to turn bending stress into a
    stress tensor; pillars are [001] and the cantilevers of the force
    experiment run along [110].
    """

    shape: str
    width: float
    length: float
    thickness: float | None = None
    E: float = DIAMOND_E
    rho: float = DIAMOND_RHO
    axis: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if self.shape != "cylindrical_pillar" and self.thickness is None:
            raise ValueError(f"{self.shape} needs a thickness")
        for name in ("width", "length", "E", "rho"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.thickness is not None and not self.thickness > 0:
            raise ValueError("thickness must be positive")
        if self.aspect_ratio < 3:
            warnings.warn(
                f"aspect ratio {self.aspect_ratio:.2f} < 3: Euler-Bernoulli theory is unreliable",
                RuntimeWarning,
                stacklevel=3,
            )

    @classmethod
    def pillar(cls, width, height, **kw):
        return cls("cylindrical_pillar", width, height, **kw)

    @classmethod
    def cantilever(cls, width, thickness, length, **kw):
        kw.setdefault("axis", (1.0, 1.0, 0.0))
        return cls("rectangular_cantilever", width, length, thickness, **kw)

    @classmethod
    def nanobeam(cls, width, thickness, length, **kw):
        kw.setdefault("axis", (1.0, 1.0, 0.0))
        return cls("doubly_clamped_beam", width, length, thickness, **kw)

    @property
    def aspect_ratio(self):
        lateral = self.width if self.thickness is None else max(self.width, self.thickness)
        return self.length / lateral

    @property
    def depth(self):
        """Extent along the bending direction (diameter or thickness)."""
        return self.width if self.shape == "cylindrical_pillar" else self.thickness

    @property
    def area(self):
        if self.shape == "cylindrical_pillar":
            return np.pi * self.width**2 / 4
        return self.width * self.thickness

    @property
    def mass(self):
        return self.rho * self.area * self.length

    @property
    def moment_of_area(self):
        return moment_of_area(self)


@dataclass(frozen=True)
class ForceLoad:
    """Transverse tip force (N) in cross-section coordinates."""

    force: tuple
    limit: float = DEFAULT_FORCE_LIMIT

    @property
    def vector(self):
        return np.asarray(self.force, dtype=float)

    @property
    def magnitude(self):
        return float(np.linalg.norm(self.vector))

    def check(self):
        if self.magnitude >= self.limit:
            raise ElasticLimitError(f"|F| = {self.magnitude:.3g} N exceeds elastic-limit guard {self.limit:.3g} N")


@dataclass(frozen=True)
class NVSite:
    """An NV center inside a device.

    ``x`` is the distance from the clamped end along the long axis (for a
    pillar, the height above the base), ``z`` the offset from the neutral
    axis along the bending direction and ``y`` the lateral offset.
    """

    x: float = 0.0
    z: float = 0.0
    y: float = 0.0
    family: int = 1


def bending_stress_per_force(geom: BeamGeometry, site: NVSite) -> float:
    """Axial stress (Pa) per newton of tip force at an NV in a clamped-free device."""
    if geom.shape == "doubly_clamped_beam":
        raise ValueError("static tip loading is defined for pillars and cantilevers only")
    if not 0 <= site.x <= geom.length or abs(site.z) > geom.depth / 2 * (1 + 1e-12):
        raise ValueError("NV site lies outside the device")
    return (geom.length - site.x) * site.z / moment_of_area(geom)


def _load(load):
    if isinstance(load, ForceLoad):
        return load
    return ForceLoad(tuple(np.atleast_1d(np.asarray(load, dtype=float))))


def moment_of_area(geom: BeamGeometry) -> float:
    """Second moment of area; rectangles bend across their thickness."""
    if geom.shape == "cylindrical_pillar":
        return np.pi * geom.width**4 / 64
    return geom.width * geom.thickness**3 / 12


def pillar_tip_displacement(load, geom: BeamGeometry) -> np.ndarray:
    load = _load(load)
    load.check()
    return geom.length**3 * load.vector / (3 * geom.E * moment_of_area(geom))


def pillar_base_stress(load, geom: BeamGeometry, xi) -> float:
    """Axial bending stress sigma_ZZ at cross-section position ``xi`` of the base."""
    load = _load(load)
    load.check()
    xi = np.asarray(xi, dtype=float)
    if np.linalg.norm(xi) > geom.depth / 2 * (1 + 1e-12):
        raise ValueError("xi lies outside the cross-section")
    return float(geom.length * (load.vector @ xi) / moment_of_area(geom))


def cantilever_profile(force, geom: BeamGeometry, x):
    """Deflection of a tip-loaded clamped-free beam at ``x`` (m)."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(x > geom.length * (1 + 1e-12)):
        raise ValueError("x must lie in [0, l]")
    l = geom.length
    return force * x**2 * (3 * l - x) / (6 * geom.E * moment_of_area(geom))


def cantilever_stress(force, geom: BeamGeometry, x, z):
    """Axial bending stress at distance ``x`` from the clamp and ``z`` from the neutral plane."""
    if not 0 <= x <= geom.length or abs(z) > geom.depth / 2 * (1 + 1e-12):
        raise ValueError("position lies outside the cantilever")
    return force * (geom.length - x) * z / moment_of_area(geom)


class ForceFit(NamedTuple):
    force: float
    sigma: float
    residual_rms: float


def fit_force_from_profile(x, y, geom: BeamGeometry) -> ForceFit:
    """Least-squares tip force from sampled deflections (x_i, y_i).

    The model is linear in F, so the estimate is closed-form; the 1-sigma
    error comes from the residual scatter.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 3:
        raise ValueError("need at least 3 (x, y) samples")
    g = cantilever_profile(1.0, geom, x)
    gg = float(g @ g)
    if np.ptp(x) == 0 or gg == 0:
        raise RankDeficiencyError("profile samples do not constrain the force (all x equal)")
    if np.ptp(x) < geom.length / 2:
        warnings.warn("profile samples span less than half the beam", RuntimeWarning, stacklevel=2)
    force = float(g @ y) / gg
    resid = y - force * g
    dof = x.size - 1
    s2 = float(resid @ resid) / dof
    return ForceFit(force, float(np.sqrt(s2 / gg)), float(np.sqrt(np.mean(resid**2))))


# --- clamped-clamped flexural modes -------------------------------------------------

def _cc_characteristic(beta):
    # cos(b) cosh(b) = 1 rewritten without overflow
    return np.cos(beta) - 1.0 / np.cosh(beta)


def clamped_clamped_roots(n_modes, rtol=1e-12):
    """First ``n_modes`` positive roots of cos(kl) cosh(kl) = 1."""
    roots = np.empty(n_modes)
    for n in range(n_modes):
        lo, hi = (n + 1) * np.pi, (n + 2) * np.pi
        root, info = optimize.brentq(_cc_characteristic, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, full_output=True)
        if not info.converged:
            raise NumericalError(f"root {n} of cos(kl)cosh(kl)=1 did not converge")
        width = rtol * root
        if np.sign(_cc_characteristic(root - width)) == np.sign(_cc_characteristic(root + width)):
            raise NumericalError(f"root {n} not bracketed to {rtol:g} relative")
        roots[n] = root
    return roots


_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def gauss_legendre_unit(n):
    """Gauss-Legendre nodes and weights on [0, 1]."""
    if n not in _GL_CACHE:
        t, w = np.polynomial.legendre.leggauss(n)
        _GL_CACHE[n] = (0.5 * (t + 1), 0.5 * w)
    return _GL_CACHE[n]


@dataclass(frozen=True)
class ModeBasis:
    """Clamped-clamped flexural modes with (1/l) int psi_n psi_m dx = delta_nm.

    Shapes are evaluated in closed form. Written as
    psi(u) = [(1-s) e^u + (1+s) e^-u]/2 - cos u + s sin u with u = kl * x/l,
    which avoids the cosh/sinh cancellation of the textbook form at high n.
    """

    length: float
    kl: np.ndarray
    freqs: np.ndarray
    Q: np.ndarray
    mass: float
    E: float
    thickness: float
    _one_minus_sigma: np.ndarray = field(repr=False)
    _norm: np.ndarray = field(repr=False)

    @property
    def n_modes(self):
        return len(self.kl)

    @property
    def sigma(self):
        return 1.0 - self._one_minus_sigma

    def _u(self, n, x):
        return self.kl[n] * np.asarray(x, dtype=float) / self.length

    def _parts(self, n, x):
        u = self._u(n, x)
        oms = self._one_minus_sigma[n]
        s = 1.0 - oms
        grow = 0.5 * oms * np.exp(u)
        decay = 0.5 * (1.0 + s) * np.exp(-u)
        return u, s, grow, decay

    def shape(self, n, x):
        u, s, grow, decay = self._parts(n, x)
        return (grow + decay - np.cos(u) + s * np.sin(u)) / self._norm[n]

    def slope(self, n, x):
        u, s, grow, decay = self._parts(n, x)
        k = self.kl[n] / self.length
        return k * (grow - decay + np.sin(u) + s * np.cos(u)) / self._norm[n]

    def curvature(self, n, x):
        u, s, grow, decay = self._parts(n, x)
        k = self.kl[n] / self.length
        return k**2 * (grow + decay + np.cos(u) - s * np.sin(u)) / self._norm[n]

    def shapes(self, x):
        """Array (n_modes, len(x)) of mode shapes."""
        return np.array([self.shape(n, x) for n in range(self.n_modes)])

    def curvatures(self, x):
        return np.array([self.curvature(n, x) for n in range(self.n_modes)])

    def with_Q(self, Q):
        q = np.broadcast_to(np.asarray(Q, dtype=float), self.kl.shape).copy()
        return ModeBasis(self.length, self.kl, self.freqs, q, self.mass, self.E, self.thickness, self._one_minus_sigma, self._norm)

    def truncated(self, n_modes):
        if n_modes > self.n_modes:
            raise ValueError("cannot extend a basis by truncation")
        s = slice(0, n_modes)
        return ModeBasis(
            self.length, self.kl[s], self.freqs[s], self.Q[s], self.mass, self.E,
            self.thickness, self._one_minus_sigma[s], self._norm[s],
        )

    def table_rows(self):
        return [(n, float(self.kl[n]), float(self.freqs[n]), float(self.Q[n])) for n in range(self.n_modes)]


def clamped_clamped_modes(geom: BeamGeometry, n_modes: int, Q=100.0) -> ModeBasis:
    if geom.shape != "doubly_clamped_beam":
        raise ValueError("clamped-clamped modes need a doubly_clamped_beam geometry")
    if n_modes < 1:
        raise ValueError("n_modes must be >= 1")
    kl = clamped_clamped_roots(n_modes)
    I = moment_of_area(geom)
    l = geom.length
    freqs = kl**2 / (2 * np.pi * l**2) * np.sqrt(geom.E * I / (geom.rho * geom.area))
    oms = (np.cos(kl) - np.sin(kl) - np.exp(-kl)) / (np.sinh(kl) - np.sin(kl))
    q = np.broadcast_to(np.asarray(Q, dtype=float), kl.shape).copy()
    raw = ModeBasis(l, kl, freqs, q, geom.mass, geom.E, geom.thickness, oms, np.ones(n_modes))
    # Mean square on [0, l]; the analytic value is 1, this removes rounding.
    t, w = gauss_legendre_unit(max(200, 40 * n_modes))
    norm = np.sqrt([(w * raw.shape(n, t * l) ** 2).sum() for n in range(n_modes)])
    return ModeBasis(l, kl, freqs, q, geom.mass, geom.E, geom.thickness, oms, norm)


def modal_stress_at(basis: ModeBasis, xi_x: float, xi_z: float, amplitudes) -> float:
    """Bending stress E xi_z sum_m A_m psi_m''(xi_x) for modal amplitudes A_m (m)."""
    if not 0 <= xi_x <= basis.length:
        raise ValueError("xi_x lies outside the beam")
    if abs(xi_z) > basis.thickness / 2 * (1 + 1e-12):
        raise ValueError("xi_z lies outside the beam")
    amps = np.asarray(amplitudes, dtype=float)
    curv = np.array([basis.curvature(m, xi_x) for m in range(len(amps))])
    return float(basis.E * xi_z * (amps @ curv))
