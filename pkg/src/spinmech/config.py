"""Declarative scenario configs for the command-line workbench.

Configs are TOML. Units live in key names (``pressure_GPa``, ``width_um``)
and every value is converted to SI when a scenario is built. Unknown keys
are errors; a key whose stem matches a known key but whose unit suffix
differs is reported as a unit mismatch.
"""

from __future__ import annotations

import hashlib
import re
import sys
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .beam import BeamGeometry
from .force import MeasurementModel
from .spin import SusceptibilityParams
from .units import GPa, um

KINDS = ("resonances", "calibrate", "force_map", "sensitivity", "inertial")
UNIT_SUFFIXES = (
    "MHz_per_GPa", "GHz_per_T", "kg_per_m3", "GPa", "MPa", "GHz", "MHz", "kHz", "Hz",
    "mT", "T", "um", "nm", "m", "us", "ns", "s", "pN", "nN", "uN", "zg", "kg",
)
_SUFFIX_RE = re.compile(r"^(.*?)_(" + "|".join(UNIT_SUFFIXES) + r")$")

NonNeg = Annotated[float, Field(ge=0)]
Pos = Annotated[float, Field(gt=0)]


class ConfigError(Exception):
    """Invalid scenario document; ``key``, ``line`` and ``column`` locate it when known."""

    def __init__(self, message, key=None, line=None, column=None):
        super().__init__(message)
        self.key = key
        self.line = line
        self.column = column

    def to_json(self):
        return {"error": "config", "message": str(self), "key": self.key, "line": self.line, "column": self.column}


def _stem(key):
    m = _SUFFIX_RE.match(key)
    return (m.group(1), m.group(2)) if m else (key, None)


class Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    @model_validator(mode="before")
    @classmethod
    def _unit_suffixes(cls, data):
        if not isinstance(data, dict):
            return data
        known = {}
        for name in cls.model_fields:
            stem, unit = _stem(name)
            if unit:
                known[stem] = name
        for key in data:
            if key in cls.model_fields:
                continue
            stem, unit = _stem(key)
            if unit and stem in known:
                raise ValueError(f"unit-suffix mismatch: '{key}' should be '{known[stem]}'")
        return data


class SusceptibilityBlock(Block):
    a1_MHz_per_GPa: float = 4.86
    a2_MHz_per_GPa: float = -3.7
    b_MHz_per_GPa: float = -2.3
    c_MHz_per_GPa: float = 3.5
    D_GHz: Pos = 2.87
    gamma_e_GHz_per_T: Pos = 28.03

    def params(self) -> SusceptibilityParams:
        return SusceptibilityParams.from_mhz_per_gpa(
            self.a1_MHz_per_GPa, self.a2_MHz_per_GPa, self.b_MHz_per_GPa, self.c_MHz_per_GPa,
            self.D_GHz, self.gamma_e_GHz_per_T,
        )


class MeasurementBlock(Block):
    K: Annotated[float, Field(gt=0, le=1)] = 0.01
    T_dc_us: Pos = 10.0
    T_ac_us: Pos = 100.0
    T_min_ns: Pos = 10.0
    T_m_s: Pos = 1.0

    def model(self) -> MeasurementModel:
        return MeasurementModel(self.K, self.T_dc_us * 1e-6, self.T_ac_us * 1e-6, self.T_min_ns * 1e-9, self.T_m_s)


class OutputBlock(Block):
    dir: str = "out"


class PillarBlock(Block):
    width_um: Pos = 0.1
    height_um: Pos = 1.0
    E_GPa: Pos = 1220.0
    nv_offset_um: float | None = None

    def geometry(self) -> BeamGeometry:
        return BeamGeometry.pillar(self.width_um * um, self.height_um * um, E=self.E_GPa * GPa)

    def offset(self):
        return self.width_um * um / 2 if self.nv_offset_um is None else self.nv_offset_um * um


class _Common(Block):
    seed: Annotated[int, Field(ge=0, lt=2**64)] | None = None
    susceptibility: SusceptibilityBlock = SusceptibilityBlock()
    output: OutputBlock = OutputBlock()

    def noisy(self) -> bool:
        return False

    @model_validator(mode="after")
    def _seed_needed(self):
        if self.noisy() and self.seed is None:
            raise ValueError("seed is mandatory when noise > 0")
        return self


# --- resonances --------------------------------------------------------------


class StressBlock(Block):
    axis: Literal["100", "110", "111"] = "110"
    pressure_GPa: NonNeg | None = None
    pressures_GPa: list[NonNeg] = [0.0, 0.25, 0.5, 0.75, 1.0]

    def sweep(self):
        p = [self.pressure_GPa] if self.pressure_GPa is not None else list(self.pressures_GPa)
        if not p:
            raise ValueError("at least one pressure is required")
        return [v * GPa for v in p]


class FieldBlock(Block):
    B_mT: tuple[float, float, float] = (0.0, 0.0, 0.0)


class OdmrBlock(Block):
    f_min_GHz: Pos = 2.80
    f_max_GHz: Pos = 2.94
    points: Annotated[int, Field(ge=3, le=200_000)] = 2801
    linewidth_MHz: Pos = 1.0
    contrast: Annotated[float, Field(gt=0, lt=1)] = 0.03
    noise_rel: NonNeg = 0.0

    @model_validator(mode="after")
    def _range(self):
        if self.f_max_GHz <= self.f_min_GHz:
            raise ValueError("f_max_GHz must exceed f_min_GHz")
        return self


class ResonancesScenario(_Common):
    kind: Literal["resonances"] = "resonances"
    stress: StressBlock = StressBlock()
    field: FieldBlock = FieldBlock()
    odmr: OdmrBlock = OdmrBlock()
    families: list[Literal[1, 2, 3, 4]] = [1, 2, 3, 4]

    def noisy(self):
        return self.odmr.noise_rel > 0


# --- calibrate ---------------------------------------------------------------


class ExperimentBlock(Block):
    axes: list[Literal["100", "110", "111"]] = ["100", "110", "111"]
    pressures_GPa: list[NonNeg] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    sigma_MHz: Pos = 0.2
    intrinsic_MHz: NonNeg = 1.0
    trials: Annotated[int, Field(ge=1, le=100_000)] = 1
    n_starts: Annotated[int, Field(ge=1, le=64)] = 8
    fit_a1: bool = False


class CantileverBlock(Block):
    width_um: Pos = 4.0
    thickness_um: Pos = 4.0
    length_um: Pos = 40.0
    E_GPa: Pos = 1220.0
    axis: Literal["100", "110"] = "110"

    def geometry(self) -> BeamGeometry:
        axis = (1.0, 0.0, 0.0) if self.axis == "100" else (1.0, 1.0, 0.0)
        return BeamGeometry.cantilever(self.width_um * um, self.thickness_um * um, self.length_um * um, E=self.E_GPa * GPa, axis=axis)


class NVBlock(Block):
    x_um: NonNeg = 5.0
    z_um: float = 1.5
    family: Literal[1, 2, 3, 4] = 1
    response: Literal["intrinsic", "plus", "minus"] = "intrinsic"


class LoadBlock(Block):
    forces_uN: list[NonNeg] = [0.0, 2.0, 4.0, 6.0, 8.0, 10.0]
    profile_points: Annotated[int, Field(ge=2, le=10_000)] = 41
    profile_sigma_nm: NonNeg = 20.0
    odmr_sigma_MHz: NonNeg = 0.1


class CalibrateScenario(_Common):
    kind: Literal["calibrate"] = "calibrate"
    mode: Literal["uniaxial", "cantilever"] = "uniaxial"
    experiment: ExperimentBlock = ExperimentBlock()
    cantilever: CantileverBlock = CantileverBlock()
    nv: NVBlock = NVBlock()
    load: LoadBlock = LoadBlock()

    def noisy(self):
        if self.mode == "uniaxial":
            return self.experiment.sigma_MHz > 0 or self.experiment.intrinsic_MHz > 0
        return self.load.profile_sigma_nm > 0 or self.load.odmr_sigma_MHz > 0


# --- force map ---------------------------------------------------------------


class ArrayBlock(Block):
    ni: Annotated[int, Field(ge=2, le=2000)] = 8
    nj: Annotated[int, Field(ge=2, le=2000)] = 8
    spacing_um: Annotated[float, Field(ge=0.25)] = 0.5
    nv_radius_um: Pos = 0.05
    overlapping: bool = False


class ForceFieldBlock(Block):
    shape: Literal["uniform", "vortex", "gaussian"] = "vortex"
    amplitude_nN: NonNeg = 1.0
    direction: tuple[float, float] = (1.0, 0.0)
    width_um: Pos = 1.5


class ForceNoiseBlock(Block):
    shot_noise: bool = True
    sigma_kHz: NonNeg | None = None


class ForceMapScenario(_Common):
    kind: Literal["force_map"] = "force_map"
    pillar: PillarBlock = PillarBlock()
    measurement: MeasurementBlock = MeasurementBlock()
    array: ArrayBlock = ArrayBlock()
    field: ForceFieldBlock = ForceFieldBlock()
    noise: ForceNoiseBlock = ForceNoiseBlock()

    def noisy(self):
        if self.noise.sigma_kHz is not None:
            return self.noise.sigma_kHz > 0
        return self.noise.shot_noise

    @model_validator(mode="after")
    def _radius(self):
        if self.array.nv_radius_um > self.pillar.width_um / 2 * (1 + 1e-12):
            raise ValueError("array.nv_radius_um must not exceed half the pillar width")
        return self


# --- sensitivity -------------------------------------------------------------


class CrossoverBlock(Block):
    widths_um: list[Pos] = []
    heights_um: list[Pos] = []


class SensitivityScenario(_Common):
    kind: Literal["sensitivity"] = "sensitivity"
    pillar: PillarBlock = PillarBlock()
    measurement: MeasurementBlock = MeasurementBlock()
    crossover: CrossoverBlock = CrossoverBlock()
    response: Literal["intrinsic", "plus", "minus"] = "intrinsic"


# --- inertial ----------------------------------------------------------------


class NanobeamBlock(Block):
    width_um: Pos = 0.1
    thickness_um: Pos = 0.1
    length_um: Pos = 5.0
    E_GPa: Pos = 1220.0
    density_kg_per_m3: Pos = 3515.0

    def geometry(self) -> BeamGeometry:
        return BeamGeometry.nanobeam(
            self.width_um * um, self.thickness_um * um, self.length_um * um,
            E=self.E_GPa * GPa, rho=self.density_kg_per_m3,
        )


class PointMassBlock(Block):
    x_um: NonNeg
    mass_zg: NonNeg


class BumpBlock(Block):
    center_um: NonNeg
    width_nm: Pos
    mass_zg: NonNeg


class AdsorbateBlock(Block):
    points: list[PointMassBlock] = []
    gaussians: list[BumpBlock] = []


class DriveBlock(Block):
    mode: Annotated[int, Field(ge=0)] = 0
    amplitude_nm: Pos = 10.0
    Q: Pos = 100.0
    periods: Annotated[int, Field(ge=1)] = 1
    readout_bound_MHz: Pos = 100.0


class SiteBlock(Block):
    x_um: NonNeg
    z_um: float


class ImagingBlock(Block):
    n_modes: Annotated[int, Field(ge=3, le=64)] = 12
    points: Annotated[int, Field(ge=3, le=100_000)] = 501
    moments_modes: Annotated[int, Field(ge=1, le=64)] = 8
    clip: bool = False


class MassSensitivityBlock(Block):
    target_zg: Pos = 1.0


class InertialNoiseBlock(Block):
    rel_shift_sigma: NonNeg = 0.0


class InertialScenario(_Common):
    kind: Literal["inertial"] = "inertial"
    beam: NanobeamBlock = NanobeamBlock()
    measurement: MeasurementBlock = MeasurementBlock()
    adsorbate: AdsorbateBlock = AdsorbateBlock()
    drive: DriveBlock = DriveBlock()
    sites: list[SiteBlock] = []
    imaging: ImagingBlock = ImagingBlock()
    sensitivity: MassSensitivityBlock = MassSensitivityBlock()
    noise: InertialNoiseBlock = InertialNoiseBlock()

    def noisy(self):
        return self.noise.rel_shift_sigma > 0

    @model_validator(mode="after")
    def _inside(self):
        l = self.beam.length_um
        for p in self.adsorbate.points:
            if p.x_um > l:
                raise ValueError(f"adsorbate point at {p.x_um} um lies beyond the beam length")
        for s in self.sites:
            if s.x_um > l or abs(s.z_um) > self.beam.thickness_um / 2:
                raise ValueError("NV site lies outside the beam")
        if self.drive.mode >= self.imaging.n_modes:
            raise ValueError("drive.mode must be below imaging.n_modes")
        return self


Scenario = Union[ResonancesScenario, CalibrateScenario, ForceMapScenario, SensitivityScenario, InertialScenario]
_MODELS = {
    "resonances": ResonancesScenario,
    "calibrate": CalibrateScenario,
    "force_map": ForceMapScenario,
    "sensitivity": SensitivityScenario,
    "inertial": InertialScenario,
}


def _location(text, key):
    """Best-effort (line, column) of ``key`` in the source text."""
    if key is None:
        return None, None
    pat = re.compile(r"^\s*" + re.escape(str(key)) + r"\s*=", re.M)
    m = pat.search(text)
    if not m:
        return None, None
    line = text.count("\n", 0, m.start()) + 1
    col = m.start() - (text.rfind("\n", 0, m.start()) + 1) + 1 + (len(m.group(0)) - len(m.group(0).lstrip()))
    return line, col


def parse_scenario(text: str, kind: str | None = None, seed: int | None = None):
    """Parse and validate a TOML scenario document.

    ``kind`` (from the subcommand) is used when the document has no
    ``kind`` key and must agree with it otherwise. ``seed`` overrides the
    document's seed before validation.
    """
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+), column (\d+)", str(exc))
        line, col = (int(m.group(1)), int(m.group(2))) if m else (None, None)
        raise ConfigError(f"parse error: {exc}", line=line, column=col) from None
    declared = data.get("kind")
    if kind is not None:
        kind = kind.replace("-", "_")
    if declared is not None and kind is not None and declared != kind:
        raise ConfigError(f"config kind '{declared}' does not match subcommand '{kind}'", key="kind")
    chosen = declared or kind
    if chosen not in _MODELS:
        raise ConfigError(f"kind must be one of {KINDS}", key="kind")
    data.setdefault("kind", chosen)
    if seed is not None:
        data["seed"] = seed
    try:
        return _MODELS[chosen].model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = [str(p) for p in err["loc"]]
        key = ".".join(loc) if loc else None
        leaf = loc[-1] if loc else None
        msg = err["msg"]
        if err["type"] == "extra_forbidden":
            msg = f"unknown key '{leaf}'"
        elif "unit-suffix mismatch" in msg:
            m = re.search(r"'([^']+)' should", msg)
            leaf = m.group(1) if m else leaf
            key = ".".join(loc + [leaf]) if m else key
        line, col = _location(text, leaf)
        where = f" ({key})" if key else ""
        raise ConfigError(f"validation error{where}: {msg}", key=key, line=line, column=col) from None


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()

