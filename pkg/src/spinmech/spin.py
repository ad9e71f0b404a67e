"""Ground-state spin of the NV center under stress and magnetic field.

Conventions
-----------
* Stress is given in the cubic unit-cell frame (X, Y, Z), in Pa, with
  compressive stress counted positive. Hydrostatic pressure P > 0 therefore
  raises the resonances (a1 > 0).
* The reference orientation is family 1, NV axis along [111]. Its local
  frame is z || [111], x || [11-2]/sqrt(6), y = z cross x. The other three
  families are handled by applying the twofold rotation about a cube axis
  that carries their axis onto [111] to the stress tensor, then using the
  reference susceptibility map. The signs of M_x and M_y are tied to this
  frame choice and carry no physical meaning of their own; only
  sqrt(M_x^2 + M_y^2) is observable.
* The spin-1 basis is ordered |+1>, |0>, |-1>.
* Dips in synthesized ODMR spectra are Lorentzian with a single FWHM.
  Hyperfine structure is not modelled.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .exceptions import LabelingError
from .units import GHz, GPa, MHz, MHz_per_GPa

MAX_STRESS = 100 * GPa
MAX_FIELD = 1.0  # T

# NV axis per orientation family, in crystal coordinates.
FAMILY_AXES = {
    1: (1, 1, 1),
    2: (-1, -1, 1),
    3: (-1, 1, -1),
    4: (1, -1, -1),
}

# C2 rotations about the cube axes that carry each family onto [111].
_TO_REFERENCE = {
    1: np.diag([1.0, 1.0, 1.0]),
    2: np.diag([-1.0, -1.0, 1.0]),
    3: np.diag([-1.0, 1.0, -1.0]),
    4: np.diag([1.0, -1.0, -1.0]),
}

_REFERENCE_FRAME = np.array(
    [
        np.array([1.0, 1.0, -2.0]) / np.sqrt(6.0),
        np.array([-1.0, 1.0, 0.0]) / np.sqrt(2.0),
        np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0),
    ]
)


@dataclass(frozen=True)
class StressTensor:
    """Symmetric stress in the unit-cell frame, Pa, compression positive."""

    xx: float = 0.0
    yy: float = 0.0
    zz: float = 0.0
    yz: float = 0.0
    zx: float = 0.0
    xy: float = 0.0

    def __post_init__(self):
        values = np.array(self.components)
        if not np.all(np.isfinite(values)):
            raise ValueError("stress components must be finite")
        if np.any(np.abs(values) > MAX_STRESS):
            raise ValueError("stress component exceeds 100 GPa sanity bound")

    @property
    def components(self):
        return (self.xx, self.yy, self.zz, self.yz, self.zx, self.xy)

    @classmethod
    def from_gpa(cls, xx=0.0, yy=0.0, zz=0.0, yz=0.0, zx=0.0, xy=0.0):
        return cls(*(GPa * float(v) for v in (xx, yy, zz, yz, zx, xy)))

    @classmethod
    def from_matrix(cls, matrix, atol=1e-9):
        m = np.asarray(matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError("stress matrix must be 3x3")
        if not np.allclose(m, m.T, rtol=0.0, atol=atol * max(1.0, np.abs(m).max())):
            raise ValueError("stress matrix is not symmetric")
        m = 0.5 * (m + m.T)
        return cls(m[0, 0], m[1, 1], m[2, 2], m[1, 2], m[2, 0], m[0, 1])

    @classmethod
    def uniaxial(cls, pressure, axis):
        """Uniaxial compression ``pressure`` (Pa) along crystal direction ``axis``."""
        n = np.asarray(axis, dtype=float)
        n = n / np.linalg.norm(n)
        return cls.from_matrix(pressure * np.outer(n, n))

    @classmethod
    def hydrostatic(cls, pressure):
        return cls(pressure, pressure, pressure, 0.0, 0.0, 0.0)

    def matrix(self):
        return np.array(
            [
                [self.xx, self.xy, self.zx],
                [self.xy, self.yy, self.yz],
                [self.zx, self.yz, self.zz],
            ]
        )

    def transformed(self, rotation):
        """Return R sigma R^T for an orthogonal 3x3 ``rotation``."""
        r = np.asarray(rotation, dtype=float)
        return StressTensor.from_matrix(r @ self.matrix() @ r.T)

    def __add__(self, other):
        return StressTensor(*(a + b for a, b in zip(self.components, other.components)))

    def __mul__(self, scale):
        return StressTensor(*(scale * a for a in self.components))

    __rmul__ = __mul__


@dataclass(frozen=True)
class SusceptibilityParams:
    """Spin-mechanical parameter set in SI units.

    a1, a2, b, c are in Hz/Pa, D in Hz and gamma_e in Hz/T.
    """

    a1: float = 4.86 * MHz_per_GPa
    a2: float = -3.7 * MHz_per_GPa
    b: float = -2.3 * MHz_per_GPa
    c: float = 3.5 * MHz_per_GPa
    D: float = 2.87 * GHz
    gamma_e: float = 28.03 * GHz

    def __post_init__(self):
        if not self.D > 0:
            raise ValueError("D must be positive")
        if not self.gamma_e > 0:
            raise ValueError("gamma_e must be positive")

    @classmethod
    def from_mhz_per_gpa(cls, a1=4.86, a2=-3.7, b=-2.3, c=3.5, D_GHz=2.87, gamma_e_GHz_per_T=28.03):
        return cls(
            a1=a1 * MHz_per_GPa,
            a2=a2 * MHz_per_GPa,
            b=b * MHz_per_GPa,
            c=c * MHz_per_GPa,
            D=D_GHz * GHz,
            gamma_e=gamma_e_GHz_per_T * GHz,
        )

    @property
    def vector(self):
        return np.array([self.a1, self.a2, self.b, self.c])

    def replace(self, **changes):
        values = dict(a1=self.a1, a2=self.a2, b=self.b, c=self.c, D=self.D, gamma_e=self.gamma_e)
        values.update(changes)
        return SusceptibilityParams(**values)


DEFAULT_PARAMS = SusceptibilityParams()


@dataclass(frozen=True)
class NVOrientation:
    family: int = 1

    def __post_init__(self):
        if self.family not in FAMILY_AXES:
            raise ValueError(f"NV family must be one of 1..4, got {self.family!r}")

    @property
    def axis(self):
        a = np.array(FAMILY_AXES[self.family], dtype=float)
        return a / np.linalg.norm(a)

    @property
    def to_reference(self):
        """Symmetry operation mapping this family's axis onto [111]."""
        return _TO_REFERENCE[self.family]

    def frame(self):
        """Rows are the local x, y, z unit vectors in crystal coordinates."""
        return _REFERENCE_FRAME @ self.to_reference

    def to_local(self, vector):
        """Express a crystal-frame vector in this NV's (x, y, z) frame."""
        return self.frame() @ np.asarray(vector, dtype=float)

    def angle_to(self, direction):
        """Angle in degrees between the NV axis (as a line) and ``direction``."""
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        cosine = abs(float(self.axis @ d))
        return float(np.degrees(np.arccos(np.clip(cosine, 0.0, 1.0))))


def _orientation(orient):
    return orient if isinstance(orient, NVOrientation) else NVOrientation(int(orient))


ALL_FAMILIES = tuple(NVOrientation(k) for k in FAMILY_AXES)


@dataclass(frozen=True)
class SpinMechCoupling:
    """Spin-mechanical interaction components in Hz (NV frame)."""

    mx: float = 0.0
    my: float = 0.0
    mz: float = 0.0

    @property
    def transverse(self):
        return float(np.hypot(self.mx, self.my))

    def __add__(self, other):
        return SpinMechCoupling(self.mx + other.mx, self.my + other.my, self.mz + other.mz)


@dataclass(frozen=True)
class Resonances:
    """The two ms=0 <-> ms=+-1 transitions, all in Hz."""

    f_plus: float
    f_minus: float
    shift: float
    splitting: float

    @property
    def f_plus_GHz(self):
        return self.f_plus / GHz

    @property
    def f_minus_GHz(self):
        return self.f_minus / GHz

    @property
    def shift_MHz(self):
        return self.shift / MHz

    @property
    def splitting_MHz(self):
        return self.splitting / MHz


@dataclass(frozen=True)
class MagneticEnvironment:
    """Local field in the NV frame plus the gradients used by the sensing schemes."""

    B: tuple = (0.0, 0.0, 0.0)
    grad_transverse: float = 0.0  # |grad B_z|, T/m
    grad_axial: float = 0.0  # d B_z / d x along a nanobeam, T/m
    B_vector: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        b = np.asarray(self.B, dtype=float).reshape(3)
        if not np.all(np.isfinite(b)) or not np.isfinite(self.grad_transverse) or not np.isfinite(self.grad_axial):
            raise ValueError("magnetic environment must be finite")
        if np.linalg.norm(b) >= MAX_FIELD:
            raise ValueError("|B| must stay below 1 T (secular regime guard)")
        object.__setattr__(self, "B", tuple(b))
        object.__setattr__(self, "B_vector", b)

    @classmethod
    def axial(cls, b_z):
        return cls(B=(0.0, 0.0, b_z))


def susceptibility_design(stress: StressTensor, orient=1) -> np.ndarray:
    """Matrix G with (M_x, M_y, M_z) = G @ (a1, a2, b, c).

    The stress is first carried into the reference frame of ``orient``.
    """
    s = stress.transformed(_orientation(orient).to_reference)
    trace = s.xx + s.yy + s.zz
    shear_sum = s.yz + s.zx + s.xy
    return np.array(
        [
            [0.0, 0.0, s.xx + s.yy - 2.0 * s.zz, s.yz + s.zx - 2.0 * s.xy],
            [0.0, 0.0, np.sqrt(3.0) * (s.xx - s.yy), np.sqrt(3.0) * (s.yz - s.zx)],
            [trace, 2.0 * shear_sum, 0.0, 0.0],
        ]
    )


def stress_to_coupling(stress: StressTensor, params: SusceptibilityParams = DEFAULT_PARAMS, orient=1) -> SpinMechCoupling:
    """Spin-mechanical coupling of one NV orientation family."""
    mx, my, mz = susceptibility_design(stress, orient) @ params.vector
    return SpinMechCoupling(float(mx), float(my), float(mz))


def response_coefficient(stress: StressTensor, params: SusceptibilityParams = DEFAULT_PARAMS, orient=1, response="intrinsic") -> float:
    """Resonance change (Hz) per unit scale of ``stress``.

    ``response`` selects the observable: ``"intrinsic"`` is the shift M_z,
    the first-order response when a large intrinsic splitting masks the
    applied one; ``"plus"``/``"minus"`` are f_+ and f_- changes
    M_z +- |M_perp| for a stress that keeps its sign.
    """
    m = stress_to_coupling(stress, params, orient)
    if response == "intrinsic":
        return m.mz
    if response == "plus":
        return m.mz + m.transverse
    if response == "minus":
        return m.mz - m.transverse
    raise ValueError(f"unknown response branch {response!r}")


def spin1_operators():
    """S_x, S_y, S_z for S=1 in the |+1>, |0>, |-1> basis."""
    r = 1.0 / np.sqrt(2.0)
    sx = r * np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=complex)
    sy = r * np.array([[0, -1j, 0], [1j, 0, -1j], [0, 1j, 0]], dtype=complex)
    sz = np.diag([1.0, 0.0, -1.0]).astype(complex)
    return sx, sy, sz


_SX, _SY, _SZ = spin1_operators()
_EYE = np.eye(3, dtype=complex)


def build_hamiltonian(coupling: SpinMechCoupling, B=None, params: SusceptibilityParams = DEFAULT_PARAMS) -> np.ndarray:
    """Traceless 3x3 ground-state Hamiltonian in Hz.

    ``B`` is the field in the NV frame, either a 3-vector in tesla or a
    :class:`MagneticEnvironment`.
    """
    if B is None:
        b = np.zeros(3)
    elif isinstance(B, MagneticEnvironment):
        b = B.B_vector
    else:
        b = np.asarray(B, dtype=float).reshape(3)
    h = (params.D + coupling.mz) * (_SZ @ _SZ - (2.0 / 3.0) * _EYE)
    h = h + params.gamma_e * (b[0] * _SX + b[1] * _SY + b[2] * _SZ)
    h = h - coupling.mx * (_SX @ _SX - _SY @ _SY)
    h = h + coupling.my * (_SX @ _SY + _SY @ _SX)
    return h


def resonances_secular(coupling: SpinMechCoupling, b_z: float = 0.0, params: SusceptibilityParams = DEFAULT_PARAMS) -> Resonances:
    """Closed-form resonances for a field along the NV axis."""
    shift = coupling.mz
    splitting = float(np.sqrt((params.gamma_e * b_z) ** 2 + coupling.mx**2 + coupling.my**2))
    return Resonances(params.D + shift + splitting, params.D + shift - splitting, shift, splitting)


def resonances_exact(hamiltonian: np.ndarray, params: SusceptibilityParams = DEFAULT_PARAMS, min_zero_character=0.9) -> Resonances:
    """Resonances from a direct eigensolve of ``hamiltonian``.

    The ms=0 level is the eigenvector with the largest |<0|v>|^2; the two
    transitions out of it are f_- <= f_+.
    """
    energies, vectors = np.linalg.eigh(hamiltonian)
    zero_character = np.abs(vectors[1, :]) ** 2
    k = int(np.argmax(zero_character))
    if zero_character[k] < min_zero_character:
        raise LabelingError(
            f"no eigenvector is dominantly |0> (best character {zero_character[k]:.3f})"
        )
    others = np.delete(energies, k) - energies[k]
    f_minus, f_plus = float(np.min(others)), float(np.max(others))
    return Resonances(f_plus, f_minus, 0.5 * (f_plus + f_minus) - params.D, 0.5 * (f_plus - f_minus))


def family_resonances(
    stress: StressTensor,
    params: SusceptibilityParams = DEFAULT_PARAMS,
    b_crystal=(0.0, 0.0, 0.0),
    families: Sequence = ALL_FAMILIES,
) -> dict[int, Resonances]:
    """Exact resonances of each orientation family for a crystal-frame field."""
    out = {}
    for orient in families:
        orient = _orientation(orient)
        coupling = stress_to_coupling(stress, params, orient)
        h = build_hamiltonian(coupling, orient.to_local(b_crystal), params)
        out[orient.family] = resonances_exact(h, params)
    return out


def lorentzian(freqs, center, fwhm):
    half = 0.5 * fwhm
    return half**2 / ((np.asarray(freqs) - center) ** 2 + half**2)


def synthesize_odmr(
    freqs,
    stress: StressTensor = StressTensor(),
    params: SusceptibilityParams = DEFAULT_PARAMS,
    b_crystal=(0.0, 0.0, 0.0),
    weights: Mapping[int, float] | None = None,
    linewidth: float = 1.0 * MHz,
    contrast: float = 0.03,
) -> np.ndarray:
    """Normalized CW-ODMR fluorescence of an oriented NV ensemble.

    Each family contributes two Lorentzian dips of depth ``contrast * weight``
    at its f_+ and f_-; the baseline is 1. ``weights`` maps family index to
    population weight (default: all four families with weight 1/4).
    """
    if linewidth <= 0:
        raise ValueError("linewidth must be positive")
    freqs = np.asarray(freqs, dtype=float)
    if weights is None:
        weights = {k: 0.25 for k in FAMILY_AXES}
    if freqs.size > 1 and np.max(np.diff(np.sort(freqs))) > linewidth / 5:
        warnings.warn("frequency grid spacing exceeds linewidth/5; dips are under-sampled", RuntimeWarning, stacklevel=2)
    table = family_resonances(stress, params, b_crystal, families=list(weights))
    lo, hi = freqs.min(), freqs.max()
    intensity = np.ones_like(freqs)
    for family, weight in weights.items():
        res = table[family]
        for f0 in (res.f_minus, res.f_plus):
            if not lo <= f0 <= hi:
                warnings.warn(f"resonance at {f0 / GHz:.6f} GHz lies outside the grid", RuntimeWarning, stacklevel=2)
            intensity -= contrast * weight * lorentzian(freqs, f0, linewidth)
    return intensity


def gradient_addressed_frequencies(positions, grad_axial, b0=0.0, params: SusceptibilityParams = DEFAULT_PARAMS):
    """Zeeman-shifted f_+ of NVs at axial ``positions`` (m) in a field gradient.

    Used to check that NVs along a nanobeam are spectrally separable.
    """
    x = np.asarray(positions, dtype=float)
    return params.D + params.gamma_e * (b0 + grad_axial * x)
