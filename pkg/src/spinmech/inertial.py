"""Inertial detection and mass imaging with a spin-read nanobeam.

An adsorbate with linear density mu(x) perturbs the clamped-clamped
modes of a nanobeam. To first order, with the modes normalised as
(1/l) int psi_n psi_m dx = delta_nm and I_nm = (1/m0) int mu psi_n psi_m dx:

    dnu_n / nu_n = -I_nn / 2
    c_nm = nu_n^2 / (nu_m^2 - nu_n^2) * I_nm        (m != n)

An embedded NV center sees the driven mode through the bending stress.
A Hahn echo synchronised to the drive picks out either the quadrature
proportional to the frequency shift or the one carrying the couplings.
The shifts give mass moments; shifts and couplings together give an
image of mu(x).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy import integrate, special

from .beam import ModeBasis
from .exceptions import LinearRegimeError, NonInvertibleError, NumericalError, RankDeficiencyError
from .force import MeasurementModel
from .spin import DEFAULT_PARAMS, SusceptibilityParams

MASS_RATIO_WARN = 0.05
DEGENERACY_TOL = 1e-6
GRAM_COND_LIMIT = 1e12
DEFAULT_READOUT_BOUND = 100e6  # Hz
PHASES = ("in_phase", "out_of_phase")


@lru_cache(maxsize=16)
def composite_gauss_legendre(panels, order=12):
    """Nodes and weights of a composite Gauss-Legendre rule on [0, 1]."""
    t, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(0.0, 1.0, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * t).ravel()
    weights = (half[:, None] * w).ravel()
    nodes.flags.writeable = False
    weights.flags.writeable = False
    return nodes, weights


def _unit_rule(basis: ModeBasis):
    # enough panels to resolve psi_n^2 psi_m^2 for the top mode
    return composite_gauss_legendre(max(32, 8 * basis.n_modes))


# --------------------------------------------------------------------------
# Adsorbates
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AdsorbateDistribution:
    """Linear mass density on [0, length].

    Built from point masses ``(x, m)``, Gaussian bumps ``(center, width,
    mass)`` (truncated to the beam) and an optional piecewise-linear table
    ``(x_samples, mu_samples)``. Point masses are integrated exactly.
    """

    length: float
    point_masses: tuple = ()
    gaussians: tuple = ()
    table: tuple | None = None

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError("length must be positive")
        pts = tuple((float(x), float(m)) for x, m in self.point_masses)
        for x, m in pts:
            if not 0 <= x <= self.length:
                raise ValueError(f"point mass at x={x} lies outside the beam")
            if m < 0:
                raise ValueError("point masses must be non-negative")
        gs = tuple((float(c), float(s), float(m)) for c, s, m in self.gaussians)
        for c, s, m in gs:
            if s <= 0 or m < 0:
                raise ValueError("Gaussian bumps need width > 0 and mass >= 0")
        object.__setattr__(self, "point_masses", pts)
        object.__setattr__(self, "gaussians", gs)
        if self.table is not None:
            x, mu = (np.asarray(a, dtype=float) for a in self.table)
            if x.ndim != 1 or x.shape != mu.shape or len(x) < 2:
                raise ValueError("table needs matching 1-D sample arrays")
            if np.any(np.diff(x) <= 0):
                raise ValueError("table positions must be strictly increasing")
            if x[0] < 0 or x[-1] > self.length:
                raise ValueError("table extends beyond the beam")
            if np.any(mu < 0):
                raise ValueError("tabulated density must be non-negative")
            x.flags.writeable = False
            mu.flags.writeable = False
            object.__setattr__(self, "table", (x, mu))

    @classmethod
    def empty(cls, length):
        return cls(length)

    @classmethod
    def point(cls, length, x, mass):
        return cls(length, point_masses=((x, mass),))

    @classmethod
    def gaussian(cls, length, center, width, mass):
        return cls(length, gaussians=((center, width, mass),))

    def __add__(self, other):
        if self.table is not None and other.table is not None:
            raise ValueError("cannot add two tabulated distributions")
        if not np.isclose(self.length, other.length):
            raise ValueError("distributions live on different beams")
        return AdsorbateDistribution(
            self.length,
            self.point_masses + other.point_masses,
            self.gaussians + other.gaussians,
            self.table if self.table is not None else other.table,
        )

    @property
    def is_empty(self):
        return (
            all(m == 0 for _, m in self.point_masses)
            and all(m == 0 for *_, m in self.gaussians)
            and (self.table is None or not np.any(self.table[1]))
        )

    def density(self, x):
        """Smooth part of mu(x) in kg/m; point masses are not included."""
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for c, s, m in self.gaussians:
            out = out + m / (s * np.sqrt(2 * np.pi)) * np.exp(-0.5 * ((x - c) / s) ** 2)
        if self.table is not None:
            tx, tmu = self.table
            out = out + np.interp(x, tx, tmu, left=0.0, right=0.0)
        return np.where((x >= 0) & (x <= self.length), out, 0.0)

    def integrate(self, f, epsrel=1e-10):
        """int_0^l mu(x) f(x) dx for a scalar- or array-valued f(x)."""
        total = 0.0
        for x, m in self.point_masses:
            total = total + m * np.asarray(f(x), dtype=float)
        l = self.length
        for c, s, m in self.gaussians:
            lo, hi = max(0.0, c - 12 * s), min(l, c + 12 * s)
            if hi <= lo or m == 0:
                continue
            k = m / (s * np.sqrt(2 * np.pi))
            g = lambda x, c=c, s=s, k=k: k * np.exp(-0.5 * ((x - c) / s) ** 2) * np.asarray(f(x), dtype=float)
            pts = [c] if lo < c < hi else None
            total = total + self._quad(g, lo, hi, epsrel, pts)
        if self.table is not None:
            tx, tmu = self.table
            g = lambda x: np.interp(x, tx, tmu) * np.asarray(f(x), dtype=float)
            inner = list(tx[1:-1]) if len(tx) <= 400 else None
            total = total + self._quad(g, tx[0], tx[-1], epsrel, inner)
        return total

    @staticmethod
    def _quad(g, lo, hi, epsrel, points):
        res, err = integrate.quad_vec(g, lo, hi, epsrel=epsrel, epsabs=0.0, points=points, limit=2000)
        scale = np.max(np.abs(res)) if np.size(res) else 0.0
        if not np.all(np.isfinite(res)) or err > max(1e-6 * scale, 1e-300):
            raise NumericalError(f"adaptive quadrature failed to converge (error estimate {err:.3g})")
        return res

    def total_mass(self):
        return float(self.integrate(lambda x: 1.0))

    def moment(self, k):
        """Exact mass moment int mu x^k dx (kg m^k)."""
        return float(self.integrate(lambda x: np.asarray(x, dtype=float) ** k))


# --------------------------------------------------------------------------
# Mode perturbations
# --------------------------------------------------------------------------


def modal_overlaps(mu: AdsorbateDistribution, basis: ModeBasis, n_modes=None):
    """Matrix I_nm = (1/m0) int mu psi_n psi_m dx."""
    n_modes = basis.n_modes if n_modes is None else n_modes
    if n_modes > basis.n_modes:
        raise ValueError("basis has too few modes")
    if not np.isclose(mu.length, basis.length, rtol=1e-9):
        raise ValueError("adsorbate and basis describe different beams")
    if mu.is_empty:
        return np.zeros((n_modes, n_modes))
    sub = basis.truncated(n_modes)

    def outer(x):
        psi = sub.shapes(x)
        return np.outer(psi, psi)

    total = mu.total_mass()
    ratio = total / basis.mass
    if ratio > MASS_RATIO_WARN:
        warnings.warn(
            f"adsorbate mass is {100 * ratio:.1f}% of the beam mass; first-order results are unreliable",
            stacklevel=2,
        )
    I = np.asarray(mu.integrate(outer)) / basis.mass
    return 0.5 * (I + I.T)


def frequency_shift(mu: AdsorbateDistribution, basis: ModeBasis, n=None):
    """Relative shift dnu_n/nu_n; all modes when ``n`` is None."""
    if n is None:
        return -0.5 * np.diag(modal_overlaps(mu, basis))
    d = -0.5 * np.diag(modal_overlaps(mu, basis, n + 1))
    return float(d[n])


def _coupling_from_overlaps(I, freqs):
    nu2 = np.asarray(freqs, dtype=float) ** 2
    gap = nu2[None, :] - nu2[:, None]  # nu_m^2 - nu_n^2
    off = ~np.eye(len(nu2), dtype=bool)
    rel = np.abs(np.sqrt(nu2)[None, :] - np.sqrt(nu2)[:, None]) / np.sqrt(nu2)[:, None]
    if np.any(rel[off] < DEGENERACY_TOL):
        raise NumericalError("near-degenerate mode pair; couplings are undefined")
    c = np.zeros_like(I)
    c[off] = (nu2[:, None] / np.where(off, gap, 1.0) * I)[off]
    return c


def coupling_coeffs(mu: AdsorbateDistribution, basis: ModeBasis, n_modes=None):
    """c_nm = nu_n^2/(nu_m^2 - nu_n^2) I_nm, with a zero diagonal."""
    n_modes = basis.n_modes if n_modes is None else n_modes
    I = modal_overlaps(mu, basis, n_modes)
    return _coupling_from_overlaps(I, basis.freqs[:n_modes])


@dataclass(frozen=True)
class ModePerturbation:
    freqs: np.ndarray
    shifts: np.ndarray  # dnu_n / nu_n
    couplings: np.ndarray  # c_nm, zero diagonal

    @property
    def n_modes(self):
        return len(self.freqs)

    def to_json(self):
        return {
            "modes": list(range(self.n_modes)),
            "freqs_Hz": self.freqs.tolist(),
            "rel_shift": self.shifts.tolist(),
            "coupling": self.couplings.tolist(),
        }


def perturb(mu: AdsorbateDistribution, basis: ModeBasis, n_modes=None) -> ModePerturbation:
    n_modes = basis.n_modes if n_modes is None else n_modes
    I = modal_overlaps(mu, basis, n_modes)
    freqs = basis.freqs[:n_modes].copy()
    return ModePerturbation(freqs, -0.5 * np.diag(I).copy(), _coupling_from_overlaps(I, freqs))


class DrivenResponse(NamedTuple):
    U: float
    V: float
    U_first_order: float
    displacement: np.ndarray | None


def driven_amplitude(rel_shift, Q, amplitude=1.0, t=None, nu=None) -> DrivenResponse:
    """In- and out-of-phase components of a mode driven at its unloaded frequency.

    The displacement A(U cos 2 pi nu t + V sin 2 pi nu t) is returned when
    both ``t`` and ``nu`` are given.
    """
    r = float(rel_shift)
    h = 1.0 / (2.0 * Q)
    den = r * r + h * h
    U = r * h / den
    V = h * h / den
    disp = None
    if t is not None:
        if nu is None:
            raise ValueError("nu is needed to evaluate the displacement")
        ph = 2 * np.pi * nu * np.asarray(t, dtype=float)
        disp = amplitude * (U * np.cos(ph) + V * np.sin(ph))
    return DrivenResponse(U, V, 2.0 * Q * r, disp)


# --------------------------------------------------------------------------
# Spin readout
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DriveProtocol:
    """Resonant drive of mode ``mode`` with unloaded amplitude ``amplitude`` (m)."""

    mode: int = 0
    amplitude: float = 1e-9
    Q: float | None = None
    phase: str = "out_of_phase"
    periods: int = 1
    readout_bound: float = DEFAULT_READOUT_BOUND

    def __post_init__(self):
        if self.mode < 0:
            raise ValueError("mode index must be >= 0")
        if not self.amplitude > 0:
            raise ValueError("drive amplitude must be positive")
        if self.Q is not None and not self.Q > 0:
            raise ValueError("Q must be positive")
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")
        if int(self.periods) != self.periods or self.periods < 1:
            raise ValueError("periods must be a positive integer")

    def quality(self, basis: ModeBasis):
        return float(basis.Q[self.mode]) if self.Q is None else float(self.Q)


def _check_site(basis: ModeBasis, site):
    x, z = (float(v) for v in site)
    if not 0 <= x <= basis.length:
        raise ValueError("site x lies outside the beam")
    if abs(z) > basis.thickness / 2 * (1 + 1e-12):
        raise ValueError("site z lies outside the beam")
    return x, z


def transduction(basis: ModeBasis, site, amplitude, params: SusceptibilityParams = DEFAULT_PARAMS):
    """Phi_m(xi) = A a1 E xi_z psi_m''(xi_x) in Hz, for every mode of the basis."""
    x, z = _check_site(basis, site)
    curv = np.array([basis.curvature(m, x) for m in range(basis.n_modes)])
    return amplitude * params.a1 * basis.E * z * curv


class SpinSignal(NamedTuple):
    a_cos: float  # Hz
    a_sin: float  # Hz
    phi: np.ndarray  # Hz, per mode


def spin_signal(site, basis: ModeBasis, perturbation: ModePerturbation, drive: DriveProtocol,
                params: SusceptibilityParams = DEFAULT_PARAMS) -> SpinSignal:
    """Adsorbate-induced change of the NV resonance, a_cos cos + a_sin sin.

    The guard compares the full modulation, carrier Phi_n included, with
    ``drive.readout_bound``; beyond it the spin no longer responds linearly.
    """
    n = drive.mode
    if n >= perturbation.n_modes:
        raise ValueError("driven mode is not part of the perturbation")
    sub = basis.truncated(perturbation.n_modes)
    phi = transduction(sub, site, drive.amplitude, params)
    Q = drive.quality(basis)
    a_cos = 2.0 * Q * phi[n] * perturbation.shifts[n]
    a_sin = float(perturbation.couplings[n] @ phi)
    peak = abs(phi[n]) + abs(a_cos) + abs(a_sin)
    if peak > drive.readout_bound:
        raise LinearRegimeError(
            f"spin modulation {peak:.3g} Hz exceeds the linear-readout bound {drive.readout_bound:.3g} Hz"
        )
    return SpinSignal(float(a_cos), a_sin, phi)


def _antiderivative(a_cos, a_sin, nu, t):
    # 2 pi * int (a_cos cos + a_sin sin)(2 pi nu t) dt
    ph = 2 * np.pi * nu * t
    return (a_cos * np.sin(ph) - a_sin * np.cos(ph)) / nu


def _echo_start(phase, nu):
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}")
    return 0.0 if phase == "in_phase" else -0.25 / nu


def echo_phase(a_cos, a_sin, nu, phase="out_of_phase", periods=1, method="analytic"):
    """Hahn-echo phase (rad) from Df(t) = a_cos cos 2 pi nu t + a_sin sin 2 pi nu t.

    Each echo lasts 1/nu with the pi pulse at the half period. Starting on
    the drive phase (``in_phase``) selects a_sin; starting a quarter period
    early (``out_of_phase``) selects a_cos. Either way theta = 4 a / nu per
    period. ``method="numeric"`` integrates the sign-flipped signal directly.
    """
    if nu <= 0:
        raise ValueError("nu must be positive")
    t0 = _echo_start(phase, nu)
    T = 1.0 / nu
    if method == "analytic":
        if phase == "in_phase":
            # exact values at t0 = 0: sin terms vanish identically
            per = 4.0 * a_sin / nu
        else:
            per = 4.0 * a_cos / nu
        return per * periods
    if method == "numeric":
        f = lambda t: a_cos * np.cos(2 * np.pi * nu * t) + a_sin * np.sin(2 * np.pi * nu * t)
        # absolute floor: a rejected component integrates to ~0
        tol = 1e-14 * (abs(a_cos) + abs(a_sin)) * T
        first, _ = integrate.quad(f, t0, t0 + T / 2, epsabs=tol, epsrel=1e-13)
        second, _ = integrate.quad(f, t0 + T / 2, t0 + T, epsabs=tol, epsrel=1e-13)
        return 2 * np.pi * (first - second) * periods
    if method == "closed_form":
        F = lambda t: _antiderivative(a_cos, a_sin, nu, t)
        return (2 * F(t0 + T / 2) - F(t0) - F(t0 + T)) * periods
    raise ValueError("method must be 'analytic', 'closed_form' or 'numeric'")


@dataclass(frozen=True)
class SpinReadout:
    phi: np.ndarray
    theta_in: float
    theta_out: float
    shot_noise: float  # rad per measurement


def spin_readout(site, basis: ModeBasis, perturbation: ModePerturbation, drive: DriveProtocol,
                 params: SusceptibilityParams = DEFAULT_PARAMS,
                 model: MeasurementModel = MeasurementModel()) -> SpinReadout:
    sig = spin_signal(site, basis, perturbation, drive, params)
    nu = basis.freqs[drive.mode]
    th_in = echo_phase(sig.a_cos, sig.a_sin, nu, "in_phase", drive.periods)
    th_out = echo_phase(sig.a_cos, sig.a_sin, nu, "out_of_phase", drive.periods)
    return SpinReadout(sig.phi, th_in, th_out, 1.0 / model.K)


# --------------------------------------------------------------------------
# Mass moments
# --------------------------------------------------------------------------


class AlphaFit(NamedTuple):
    alpha: np.ndarray
    residual: float
    cond: float


def fit_alpha_coeffs(k, basis: ModeBasis, n_modes=None, domain=(0.0, 1.0), origin=0.0) -> AlphaFit:
    """Least-squares (x_hat - origin)^k ~ sum_n alpha_kn psi_n^2, x_hat = x/l.

    Every psi_n^2 is symmetric about the beam center, so only the
    symmetric part of x^k is representable: use ``origin=0.5`` and even k
    for position information. Narrowing ``domain`` away from the clamps,
    where all psi_n^2 vanish, sharpens the fit in the interior.
    """
    n_modes = basis.n_modes if n_modes is None else n_modes
    if n_modes < k + 1:
        raise ValueError("need at least k + 1 modes")
    lo, hi = (float(v) for v in domain)
    if not 0 <= lo < hi <= 1:
        raise ValueError("domain must be a sub-interval of [0, 1]")
    sub = basis.truncated(n_modes)
    t, w = _unit_rule(sub)
    t = lo + (hi - lo) * t
    w = (hi - lo) * w
    sq = sub.shapes(t * basis.length) ** 2
    G = (sq * w) @ sq.T
    cond = float(np.linalg.cond(G))
    if cond > GRAM_COND_LIMIT:
        raise NumericalError(f"Gram matrix of psi_n^2 is ill-conditioned (cond = {cond:.2e})")
    target = (t - origin) ** k
    alpha = np.linalg.solve(G, sq @ (w * target))
    resid = float(np.sqrt(w @ (target - alpha @ sq) ** 2))
    return AlphaFit(alpha, resid, cond)


def estimate_mass_moments(rel_shifts, alphas, m0, length):
    """Moments m^(k) (kg m^k) from measured dnu_n/nu_n.

    ``alphas`` maps k to alpha_kn (or is a sequence indexed by k). Uses
    int mu psi_n^2 dx = -2 m0 dnu_n/nu_n, so adsorbed mass gives m^(0) > 0.
    """
    r = np.asarray(rel_shifts, dtype=float)
    items = alphas.items() if isinstance(alphas, dict) else enumerate(alphas)
    out = {}
    for k, a in items:
        a = np.asarray(a.alpha if isinstance(a, AlphaFit) else a, dtype=float)
        if len(a) > len(r):
            raise ValueError("more alpha coefficients than measured shifts")
        out[k] = float(length**k * m0 * (a @ (-2.0 * r[: len(a)])))
    return out


def folded_position(m0_est, m2_centered, length):
    """Distance |x - l/2| of a point mass from the second central moment.

    The side of the beam is not observable from frequency shifts alone.
    """
    if m0_est <= 0:
        raise ValueError("total mass estimate must be positive")
    return float(np.sqrt(max(m2_centered, 0.0) / m0_est))


# --------------------------------------------------------------------------
# Mass imaging
# --------------------------------------------------------------------------


def resolution_width(length, n_modes):
    """Gaussian width alpha = l / (2 pi N) of the delta surrogate."""
    return length / (2 * np.pi * n_modes)


class BetaFit(NamedTuple):
    beta: np.ndarray  # (len(x'), N), 1/sqrt(m)
    width: float
    truncation: np.ndarray


def fit_beta_coeffs(x_prime, basis: ModeBasis, n_modes=None, width=None, warn=True) -> BetaFit:
    """Coefficients with [sum_n beta_n psi_n(x)]^2 ~ delta(x - x').

    beta_n = (1/l) int g psi_n dx with g the square root of a unit-area
    Gaussian of width alpha at x', rescaled so that sum beta_n^2 = 1/l,
    i.e. int [sum beta psi]^2 dx = 1.
    """
    n_modes = basis.n_modes if n_modes is None else n_modes
    if n_modes < 3:
        raise ValueError("need at least 3 modes")
    sub = basis.truncated(n_modes)
    l = basis.length
    xp = np.atleast_1d(np.asarray(x_prime, dtype=float))
    if np.any((xp <= 0) | (xp >= l)):
        raise ValueError("x' must lie strictly inside the beam")
    s = resolution_width(l, n_modes) if width is None else float(width)
    t, w = composite_gauss_legendre(max(64, int(np.ceil(8 * l / s))), 8)
    x = t * l
    psi = sub.shapes(x)
    g = (2 * np.pi * s * s) ** -0.25 * np.exp(-((x[None, :] - xp[:, None]) ** 2) / (4 * s * s))
    beta = (g * w) @ psi.T
    norm = np.sqrt(l * np.sum(beta**2, axis=1))
    if np.any(norm == 0):
        raise NumericalError("surrogate has no overlap with the mode basis")
    beta = beta / norm[:, None]
    trunc = special.ndtr(-xp / s) + special.ndtr((xp - l) / s)
    if warn and np.any(trunc > 0.1):
        warnings.warn(
            f"x' within the surrogate width of a clamp; up to {100 * trunc.max():.0f}% of the Gaussian is truncated",
            stacklevel=2,
        )
    return BetaFit(beta, s, trunc)


def delta_surrogate(basis: ModeBasis, x_prime, x, n_modes=None):
    """[sum_n beta_n(x') psi_n(x)]^2 on the grid ``x`` (1/m)."""
    n_modes = basis.n_modes if n_modes is None else n_modes
    fit = fit_beta_coeffs(x_prime, basis, n_modes, warn=False)
    psi = basis.truncated(n_modes).shapes(np.asarray(x, dtype=float))
    return (fit.beta @ psi) ** 2


@dataclass(frozen=True)
class Reconstruction:
    x: np.ndarray
    mu: np.ndarray  # kg/m
    width: float
    negative_fraction: float
    negative_mass: float
    clipped: bool
    diagnostics: dict = field(default_factory=dict)

    def integrated_mass(self):
        return float(integrate.trapezoid(self.mu, self.x))

    def peaks(self, rel_height=0.1):
        from scipy.signal import find_peaks

        if not np.any(self.mu > 0):
            return np.array([], dtype=int)
        idx, _ = find_peaks(self.mu, height=rel_height * self.mu.max())
        return idx

    def rows(self, truth=None):
        tr = np.full_like(self.mu, np.nan) if truth is None else np.asarray(truth, dtype=float)
        return [(float(x) * 1e6, float(m), float(t)) for x, m, t in zip(self.x, self.mu, tr)]


def reconstruct_mass_distribution(rel_shifts, couplings, basis: ModeBasis, grid, clip=False) -> Reconstruction:
    """Image mu(x') from dnu_n/nu_n and c_nm.

    mu(x') = -m0 [2 sum_n beta_n^2 dnu_n/nu_n
                  + sum_{n != m} beta_n beta_m (nu_n^2 - nu_m^2)/nu_n^2 c_nm]

    which is int mu(x) [sum beta_n psi_n(x)]^2 dx expressed in measured
    quantities. Negative values are reported; ``clip`` zeroes them.
    """
    r = np.asarray(rel_shifts, dtype=float)
    c = np.asarray(couplings, dtype=float)
    N = len(r)
    if c.shape != (N, N):
        raise ValueError("couplings must be an N x N matrix matching the shifts")
    if np.any(np.diag(c) != 0):
        raise ValueError("c_nn is undefined; the coupling diagonal must be zero")
    if N > basis.n_modes:
        raise ValueError("basis has too few modes")
    nu2 = basis.freqs[:N] ** 2
    # overlaps implied by the measurements: I_nn = -2 r_n, I_nm = c_nm (nu_m^2 - nu_n^2)/nu_n^2
    I = c * (nu2[None, :] - nu2[:, None]) / nu2[:, None]
    I[np.diag_indices(N)] = -2.0 * r
    x = np.asarray(grid, dtype=float)
    beta = fit_beta_coeffs(x, basis, N, warn=False).beta
    mu = basis.mass * np.einsum("in,nm,im->i", beta, I, beta)
    neg = mu < 0
    total_abs = integrate.trapezoid(np.abs(mu), x) if len(x) > 1 else 0.0
    neg_mass = float(-integrate.trapezoid(np.where(neg, mu, 0.0), x)) if len(x) > 1 else 0.0
    diag = {
        "asymmetry": float(np.max(np.abs(I - I.T))) if N > 1 else 0.0,
        "negative_points": int(neg.sum()),
    }
    if clip:
        mu = np.where(neg, 0.0, mu)
    return Reconstruction(
        x, mu, resolution_width(basis.length, N),
        float(neg.mean()) if len(x) else 0.0,
        neg_mass if total_abs > 0 else 0.0,
        bool(clip), diag,
    )


class CouplingSolution(NamedTuple):
    modes: np.ndarray  # indices m != n
    c: np.ndarray
    covariance: np.ndarray
    residual: float


def solve_couplings_multi_nv(theta_in, phi, n, sigma=None, protocol_constant=1.0, rtol=1e-10) -> CouplingSolution:
    """Least-squares c_nm (m != n) from in-phase echoes at several NV sites.

    ``phi`` is (n_sites, n_modes) with Phi_m(xi_i); theta_in,i =
    k * sum_m c_nm Phi_m(xi_i) with k = ``protocol_constant`` (4 periods/nu
    for the physical phase, 1 when theta is already reduced).
    """
    theta = np.atleast_1d(np.asarray(theta_in, dtype=float)) / protocol_constant
    P = np.atleast_2d(np.asarray(phi, dtype=float))
    if P.shape[0] != len(theta):
        raise ValueError("one theta per site is required")
    modes = np.array([m for m in range(P.shape[1]) if m != n])
    A = P[:, modes]
    if A.shape[0] < A.shape[1]:
        raise RankDeficiencyError("fewer sites than unknown couplings")
    U, s, Vt = np.linalg.svd(A, full_matrices=True)
    tol = rtol * (s[0] if len(s) and s[0] > 0 else 1.0)
    rank = int(np.sum(s > tol))
    if rank < A.shape[1]:
        raise RankDeficiencyError(
            f"site set determines only {rank} of {A.shape[1]} couplings", null_space=Vt[rank:].T
        )
    sol, *_ = np.linalg.lstsq(A, theta, rcond=None)
    res = theta - A @ sol
    if sigma is None:
        dof = A.shape[0] - A.shape[1]
        s2 = float(res @ res / dof) if dof > 0 else 0.0
    else:
        s2 = (float(sigma) / protocol_constant) ** 2
    cov = s2 * (Vt.T / s**2) @ Vt
    return CouplingSolution(modes, sol, cov, float(np.linalg.norm(res)))


# --------------------------------------------------------------------------
# Sensitivity
# --------------------------------------------------------------------------


CONVENTIONS = ("nominal", "physical")


def optimal_site(basis: ModeBasis):
    """Clamp surface, where the bending stress of every mode peaks."""
    return (0.0, basis.thickness / 2)


def _eta_rel(nu, K, Q, phi, convention):
    if convention == "nominal":
        # printed form: 2 pi K d(theta)/d(r) sqrt(1/nu) with d(theta)/d(r) = 2 Q Phi
        return np.sqrt(nu) / (4 * np.pi * K * Q * phi)
    if convention == "physical":
        # theta = (4/nu) 2 Q Phi r per echo, nu echoes per second, 1/K phase noise each
        return np.sqrt(nu) / (8 * K * Q * phi)
    raise ValueError(f"convention must be one of {CONVENTIONS}")


@dataclass(frozen=True)
class MassSensitivity:
    eta_rel: float  # Hz^-1/2
    eta_mass: float  # kg Hz^-1/2
    phi: float  # Hz
    amplitude: float  # m
    Q: float
    convention: str

    @property
    def sensing(self):
        return bool(np.isfinite(self.eta_mass))


def mass_sensitivity(basis: ModeBasis, site, model: MeasurementModel = MeasurementModel(),
                     drive: DriveProtocol = DriveProtocol(), params: SusceptibilityParams = DEFAULT_PARAMS,
                     convention="nominal") -> MassSensitivity:
    """Shot-noise mass sensitivity eta_mass = m0 * eta(dnu_n/nu_n).

    ``convention="nominal"`` is sqrt(nu)/(4 pi K Q Phi); ``"physical"`` counts
    the echo duration explicitly, sqrt(nu)/(8 K Q Phi), pi/2 times larger.
    A node of curvature or xi_z = 0 gives an infinite (non-sensing) result.
    """
    n = drive.mode
    Q = drive.quality(basis)
    phi = float(transduction(basis, site, drive.amplitude, params)[n])
    nu = float(basis.freqs[n])
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}")
    if phi == 0:
        return MassSensitivity(np.inf, np.inf, 0.0, drive.amplitude, Q, convention)
    eta = float(_eta_rel(nu, model.K, Q, abs(phi), convention))
    return MassSensitivity(eta, basis.mass * eta, phi, drive.amplitude, Q, convention)


@dataclass(frozen=True)
class DriveSolution:
    amplitude: float  # m
    phi: float  # Hz
    eta_mass: float
    convention: str
    plausibility: dict


def required_drive_amplitude(target_eta_mass, basis: ModeBasis, site, model: MeasurementModel = MeasurementModel(),
                             mode=0, Q=None, params: SusceptibilityParams = DEFAULT_PARAMS,
                             convention="nominal", readout_bound=DEFAULT_READOUT_BOUND) -> DriveSolution:
    """Drive amplitude A_n giving ``target_eta_mass``, with plausibility checks.

    The checks compare A with the beam thickness (geometric linearity), the
    peak bending strain with ~1% and the carrier modulation Phi_n with the
    linear-readout bound. They are reported, not enforced.
    """
    if not target_eta_mass > 0:
        raise ValueError("target sensitivity must be positive")
    probe = DriveProtocol(mode=mode, amplitude=1.0, Q=Q)
    phi_per_m = abs(float(transduction(basis, site, 1.0, params)[mode]))
    if phi_per_m == 0:
        raise NonInvertibleError("NV site does not transduce this mode (xi_z = 0 or curvature node)")
    q = probe.quality(basis)
    nu = float(basis.freqs[mode])
    phi = basis.mass * _eta_rel(nu, model.K, q, 1.0, convention) / target_eta_mass
    A = float(phi / phi_per_m)
    x, _ = _check_site(basis, site)
    t = np.linspace(0, basis.length, 2001)
    peak_curv = float(np.max(np.abs(basis.curvature(mode, t))))
    strain = A * basis.thickness / 2 * peak_curv
    flags = {
        "amplitude_over_thickness": A / basis.thickness,
        "amplitude_over_length": A / basis.length,
        "peak_strain": strain,
        "carrier_modulation_Hz": float(phi),
        "geometrically_linear": A < 0.1 * basis.thickness,
        "within_elastic_strain": strain < 0.01,
        "within_readout_bound": phi <= readout_bound,
    }
    flags["plausible"] = bool(flags["geometrically_linear"] and flags["within_elastic_strain"] and flags["within_readout_bound"])
    return DriveSolution(A, float(phi), float(target_eta_mass), convention, flags)
