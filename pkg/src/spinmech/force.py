"""Force sensing with NV centers at the base of diamond nanopillars.

Covers the shot-noise sensitivity model for a single pillar, the
spin-mechanical versus spin-magnetic crossover, and force-vector imaging
with pillar arrays, where each 2x2 block of pillars (a superpixel) is
inverted jointly for one in-plane force vector.

Array responses default to the intrinsic-stress-dominated branch, where
the resonance change is the shift M_z of the base stress (a1 * sigma_ZZ
for [001] pillars).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .beam import BeamGeometry, moment_of_area, pillar_tip_displacement
from .exceptions import NonInvertibleError, RankDeficiencyError
from .spin import DEFAULT_PARAMS, StressTensor, SusceptibilityParams, response_coefficient

MIN_PILLAR_SPACING = 250e-9
OPTICAL_RESOLUTION = 10e-9


@dataclass(frozen=True)
class MeasurementModel:
    """Shot-noise readout model.

    ``K`` folds ODMR contrast and photon collection into one factor.
    ``T_dc``/``T_ac`` cap the Ramsey and Hahn-echo shot durations (T2*, T2),
    ``T_min`` is the shortest practical shot and ``T_m`` the averaging time.
    """

    K: float = 0.01
    T_dc: float = 10e-6
    T_ac: float = 100e-6
    T_min: float = 10e-9
    T_m: float = 1.0

    def __post_init__(self):
        if not 0 < self.K <= 1:
            raise ValueError("K must lie in (0, 1]")
        for name in ("T_dc", "T_ac", "T_min", "T_m"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def shot_time(self, mode):
        if mode.upper() == "DC":
            return self.T_dc
        if mode.upper() == "AC":
            return self.T_ac
        raise ValueError(f"mode must be 'DC' or 'AC', got {mode!r}")


class AcBand(NamedTuple):
    f_lo: float
    f_hi: float
    empty: bool


@dataclass(frozen=True)
class SensitivityResult:
    responsivity: float  # Hz/N
    eta_dc: float  # N/sqrt(Hz)
    eta_ac: float
    fmin_dc: float  # N
    fmin_ac: float
    band: AcBand
    tip_displacement_at_fmin: float  # m


def responsivity(geom: BeamGeometry, xi, params: SusceptibilityParams = DEFAULT_PARAMS, response="intrinsic", depth=0.0, family=1) -> float:
    """d(Delta f)/dF in Hz/N for an NV at the pillar base.

    ``xi`` is the NV offset along the force direction (a scalar, or a
    2-vector together with a force direction of (1, 0)). ``depth`` moves the
    NV up from the base, where the bending moment falls linearly.
    """
    xi_eff = float(np.asarray(xi, dtype=float).reshape(-1)[0])
    if abs(xi_eff) > geom.depth / 2 * (1 + 1e-12):
        raise ValueError("xi lies outside the cross-section")
    if not 0 <= depth < geom.length:
        raise ValueError("depth must lie in [0, h)")
    stress_per_newton = (geom.length - depth) * xi_eff / moment_of_area(geom)
    per_pascal = response_coefficient(StressTensor.uniaxial(1.0, geom.axis), params, family, response)
    return per_pascal * stress_per_newton


def shot_noise_sensitivity(resp: float, model: MeasurementModel = MeasurementModel(), mode="DC") -> float:
    """Shot-noise limited force sensitivity eta (N/sqrt(Hz))."""
    if resp == 0:
        raise NonInvertibleError("zero responsivity: NV on the neutral axis")
    return 1.0 / (2 * np.pi * model.K * abs(resp) * np.sqrt(model.shot_time(mode)))


def minimum_force(eta: float, averaging_time: float) -> float:
    return eta / np.sqrt(averaging_time)


def ac_band(model: MeasurementModel = MeasurementModel()) -> AcBand:
    """Detectable AC force band (1/T_ac, 1/T_min)."""
    lo, hi = 1.0 / model.T_ac, 1.0 / model.T_min
    return AcBand(lo, hi, empty=not hi > lo)


def sensitivity(geom: BeamGeometry, xi, params: SusceptibilityParams = DEFAULT_PARAMS, model: MeasurementModel = MeasurementModel(), response="intrinsic", optical_threshold=OPTICAL_RESOLUTION) -> SensitivityResult:
    resp = responsivity(geom, xi, params, response)
    eta_dc = shot_noise_sensitivity(resp, model, "DC")
    eta_ac = shot_noise_sensitivity(resp, model, "AC")
    fmin_dc = minimum_force(eta_dc, model.T_m)
    r_tip = float(np.linalg.norm(pillar_tip_displacement([fmin_dc], geom)))
    if r_tip > optical_threshold:
        warnings.warn(f"tip displacement {r_tip:.3g} m at F_min exceeds the optical threshold", RuntimeWarning, stacklevel=2)
    return SensitivityResult(resp, eta_dc, eta_ac, fmin_dc, minimum_force(eta_ac, model.T_m), ac_band(model), r_tip)


def gradient_crossover(geom: BeamGeometry, params: SusceptibilityParams = DEFAULT_PARAMS, response="intrinsic") -> float:
    """Transverse gradient |grad B_z| (T/m) where tip-NV Zeeman response equals base-NV stress response.

    Both responses are linear in F, so the ratio is force independent.
    """
    mech = abs(responsivity(geom, geom.depth / 2, params, response))
    compliance = geom.length**3 / (3 * geom.E * moment_of_area(geom))
    return mech / (params.gamma_e * compliance)


def crossover_grid(widths, heights, params: SusceptibilityParams = DEFAULT_PARAMS, E=None):
    """Crossover gradient (T/m) on a (len(widths), len(heights)) grid of pillars."""
    grid = np.empty((len(widths), len(heights)))
    kw = {} if E is None else {"E": E}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for i, w in enumerate(widths):
            for j, h in enumerate(heights):
                grid[i, j] = gradient_crossover(BeamGeometry.pillar(w, h, **kw), params)
    return grid


# --- pillar arrays ---------------------------------------------------------------------

def diagonal_pair_offsets(ni, nj, radius):
    """NV offsets at the pillar rim, paired across each superpixel's diagonals.

    In every 2x2 block the pixels (0,0)/(1,1) carry +-x offsets and (1,0)/(0,1)
    carry +-y offsets. Each force component is then estimated from two pixels
    placed symmetrically about the block center, so fields that vary linearly
    across the block are recovered exactly at the center.
    """
    offsets = np.zeros((ni, nj, 2))
    pattern = {(0, 0): (1, 0), (1, 1): (-1, 0), (1, 0): (0, 1), (0, 1): (0, -1)}
    for i in range(ni):
        for j in range(nj):
            offsets[i, j] = radius * np.array(pattern[(i % 2, j % 2)], dtype=float)
    return offsets


@dataclass
class PixelArray:
    """Square grid of nanopillars with one characterized NV per pillar.

    Pillar (i, j) sits at (i * spacing, j * spacing). ``offsets`` has shape
    (ni, nj, 2); ``shifts`` and ``sigma`` (Hz) are filled by measurement.
    """

    geom: BeamGeometry
    spacing: float
    offsets: np.ndarray
    shifts: np.ndarray | None = None
    sigma: np.ndarray | float | None = None

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=float)
        if self.offsets.ndim != 3 or self.offsets.shape[2] != 2:
            raise ValueError("offsets must have shape (ni, nj, 2)")
        if self.spacing < MIN_PILLAR_SPACING:
            raise ValueError("pillar spacing below 250 nm cannot be resolved optically")
        if np.any(np.linalg.norm(self.offsets, axis=2) > self.geom.width / 2 * (1 + 1e-12)):
            raise ValueError("NV offsets must lie inside the pillar cross-section")

    @property
    def shape(self):
        return self.offsets.shape[:2]

    def positions(self):
        ni, nj = self.shape
        i, j = np.meshgrid(np.arange(ni), np.arange(nj), indexing="ij")
        return np.stack([i * self.spacing, j * self.spacing], axis=-1)

    def sigma_grid(self):
        if self.sigma is None:
            return None
        return np.broadcast_to(np.asarray(self.sigma, dtype=float), self.shape)


def pixel_noise(model: MeasurementModel = MeasurementModel(), mode="DC") -> float:
    """Per-pixel frequency noise (Hz) after averaging for ``model.T_m``."""
    return 1.0 / (2 * np.pi * model.K * np.sqrt(model.shot_time(mode) * model.T_m))


def _gain(geom, params, response):
    return response_coefficient(StressTensor.uniaxial(1.0, geom.axis), params, 1, response) * geom.length / moment_of_area(geom)


def simulate_pixel_measurements(
    force_field: Callable,
    array: PixelArray,
    params: SusceptibilityParams = DEFAULT_PARAMS,
    noise: float | None = None,
    model: MeasurementModel = MeasurementModel(),
    seed=None,
    response="intrinsic",
    optical_threshold=OPTICAL_RESOLUTION,
) -> np.ndarray:
    """Resonance changes Delta f_ij (Hz) for a force field F(x, y) -> (Fx, Fy).

    ``noise`` is the per-pixel Gaussian sigma in Hz; ``None`` uses the
    shot-noise value of ``model`` (DC readout, dwell ``model.T_m``) and 0
    gives noiseless data. The array's ``shifts`` and ``sigma`` are updated.
    """
    pos = array.positions()
    fx, fy = force_field(pos[..., 0], pos[..., 1])
    forces = np.stack(np.broadcast_arrays(np.asarray(fx, dtype=float), np.asarray(fy, dtype=float)), axis=-1)
    tip = array.geom.length**3 / (3 * array.geom.E * moment_of_area(array.geom)) * np.linalg.norm(forces, axis=-1)
    if np.any(tip > optical_threshold):
        warnings.warn("pillar tip displacement exceeds the optical threshold", RuntimeWarning, stacklevel=2)
    shifts = _gain(array.geom, params, response) * np.einsum("ijk,ijk->ij", forces, array.offsets)
    sigma = pixel_noise(model) if noise is None else float(noise)
    if sigma > 0:
        shifts = shifts + np.random.default_rng(seed).normal(0.0, sigma, size=shifts.shape)
    array.shifts = shifts
    array.sigma = sigma
    return shifts


class SuperpixelEstimate(NamedTuple):
    force: np.ndarray  # (2,) N
    cov: np.ndarray | None  # (2, 2) N^2


def superpixel_invert(shifts, offsets, geom: BeamGeometry, params: SusceptibilityParams = DEFAULT_PARAMS, sigma=None, response="intrinsic", rcond=1e-9) -> SuperpixelEstimate:
    """Least-squares in-plane force from the four pixels of one superpixel.

    ``offsets`` is the 4x2 matrix of NV positions. With a common pixel
    sigma the covariance is sigma^2 (Xi^T Xi)^-1 scaled by the gain; unequal
    sigmas use the sandwich form of the same unweighted estimator.
    """
    df = np.asarray(shifts, dtype=float).reshape(-1)
    xi = np.asarray(offsets, dtype=float).reshape(-1, 2)
    s = np.linalg.svd(xi, compute_uv=False)
    if s[-1] <= rcond * s[0]:
        raise RankDeficiencyError("superpixel NV offsets are collinear; in-plane force is not invertible")
    gain = _gain(geom, params, response)
    gram_inv = np.linalg.inv(xi.T @ xi)
    force = gram_inv @ xi.T @ df / gain
    cov = None
    if sigma is not None:
        var = np.broadcast_to(np.asarray(sigma, dtype=float) ** 2, df.shape)
        cov = gram_inv @ (xi.T * var) @ xi @ gram_inv / gain**2
    return SuperpixelEstimate(force, cov)


@dataclass
class ForceImage:
    forces: np.ndarray  # (NI, NJ, 2) N, NaN where masked
    cov: np.ndarray  # (NI, NJ, 2, 2)
    mask: np.ndarray  # True where the superpixel could not be inverted
    centers: np.ndarray  # (NI, NJ, 2) m
    resolution: float  # m

    def rows(self):
        """(I, J, Fx, Fy, sigma_Fx, sigma_Fy, masked) per superpixel."""
        out = []
        ni, nj = self.mask.shape
        for i in range(ni):
            for j in range(nj):
                f = self.forces[i, j]
                sd = np.sqrt(np.diag(self.cov[i, j]))
                out.append((i, j, f[0], f[1], sd[0], sd[1], bool(self.mask[i, j])))
        return out


def reconstruct_force_image(array: PixelArray, params: SusceptibilityParams = DEFAULT_PARAMS, overlapping=False, response="intrinsic") -> ForceImage:
    """Tile the array into 2x2 superpixels and invert each one.

    Non-overlapping tiles give a resolution of twice the pillar spacing.
    ``overlapping=True`` slides the 2x2 window by one pillar instead, which
    smooths the image but correlates neighbouring estimates.
    """
    if array.shifts is None:
        raise ValueError("array has no measurements")
    ni, nj = array.shape
    step = 1 if overlapping else 2
    starts_i = range(0, ni - 1, step)
    starts_j = range(0, nj - 1, step)
    NI, NJ = len(starts_i), len(starts_j)
    forces = np.full((NI, NJ, 2), np.nan)
    cov = np.full((NI, NJ, 2, 2), np.nan)
    mask = np.zeros((NI, NJ), dtype=bool)
    centers = np.zeros((NI, NJ, 2))
    pos = array.positions()
    sig = array.sigma_grid()
    order = ((0, 0), (1, 0), (0, 1), (1, 1))
    for I, i0 in enumerate(starts_i):
        for J, j0 in enumerate(starts_j):
            idx = tuple(zip(*[(i0 + di, j0 + dj) for di, dj in order]))
            centers[I, J] = pos[idx].mean(axis=0)
            try:
                est = superpixel_invert(array.shifts[idx], array.offsets[idx], array.geom, params, None if sig is None else sig[idx], response)
            except RankDeficiencyError:
                mask[I, J] = True
                continue
            forces[I, J] = est.force
            if est.cov is not None:
                cov[I, J] = est.cov
    return ForceImage(forces, cov, mask, centers, step * array.spacing if overlapping else 2 * array.spacing)
