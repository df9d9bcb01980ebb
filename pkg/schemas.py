"""Pydantic models for the system configuration and report file formats."""
import json
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    ValidationInfo,
    field_validator,
    model_validator,
)

from tools.core_linalg import BeamParams, MtlParams, beam_from_plasma, validate_mtl, xi_from_plasma
from tools.errors import ConfigParseError, ConfigValidationError

logger = logging.getLogger(__name__)

PLASMA_CONSISTENCY_TOL = 1e-9

Matrix = List[List[float]]
ComplexPair = Tuple[float, float]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)


def _rectangular(name: str, rows: Matrix) -> Matrix:
    if not rows or any(len(r) != len(rows[0]) for r in rows):
        raise ValueError(f"{name} must be a non-empty rectangular matrix")
    return rows


class MtlSection(StrictModel):
    L: Matrix
    C: Matrix
    B: Optional[List[float]] = None
    strictness: Literal["strict", "permissive"] = "strict"

    @field_validator("L", "C")
    @classmethod
    def check_rectangular(cls, v: Matrix, info: ValidationInfo) -> Matrix:
        return _rectangular(info.field_name, v)


class BeamSection(StrictModel):
    """Either xi directly or the plasma quantities it derives from (or both, if consistent)."""

    u0: float
    xi: Optional[float] = None
    sigma: Optional[float] = None
    rho0: Optional[float] = None
    charge_mass_ratio: Optional[float] = None

    @model_validator(mode="after")
    def check_beam(self) -> "BeamSection":
        if not self.u0 > 0:
            raise ValueError("u0 must be positive")
        plasma = (self.sigma, self.rho0, self.charge_mass_ratio)
        given = [x is not None for x in plasma]
        if any(given) and not all(given):
            raise ValueError("sigma, rho0 and charge_mass_ratio must be given together")
        if all(given):
            if any(x <= 0 for x in plasma):
                raise ValueError("sigma, rho0 and charge_mass_ratio must be positive")
            derived = xi_from_plasma(*plasma)
            if self.xi is not None and abs(self.xi - derived) > PLASMA_CONSISTENCY_TOL * derived:
                raise ValueError(
                    f"xi={self.xi} is inconsistent with the plasma relation "
                    f"xi = 4*pi/(omega_p^2*sigma) = {derived}"
                )
        elif self.xi is None:
            raise ValueError("beam needs xi or sigma, rho0 and charge_mass_ratio")
        elif not self.xi > 0:
            raise ValueError("xi must be positive")
        return self

    @property
    def has_plasma(self) -> bool:
        return self.sigma is not None


class ProfileSample(StrictModel):
    z: float
    L: Union[float, Matrix]
    C: Union[float, Matrix]


class ProfileSection(StrictModel):
    period: float = Field(gt=0)
    samples: List[ProfileSample] = Field(min_length=2)


class SimulationSection(StrictModel):
    """Time-domain settings used by the simulate command."""

    length: float = Field(gt=0)
    nz: int = Field(default=256, ge=64)
    periods: float = Field(default=20.0, gt=0)
    boundary: Literal["DriveAbsorb", "Periodic"] = "DriveAbsorb"
    scheme: Optional[Literal["Upwind", "Conservative"]] = None
    target: Literal["Beam", "Line"] = "Beam"
    amplitude: float = 1e-6
    ramp_periods: float = Field(default=3.0, ge=0)
    absorb_fraction: float = Field(default=0.1, gt=0, lt=0.5)
    snapshots_per_period: int = Field(default=32, ge=2)
    fit_window: Optional[Tuple[float, float]] = None


class PropagationSection(StrictModel):
    """z-propagation settings; V0 as (re, im) pairs, or the growing eigenmode when absent."""

    z_end: float = Field(gt=0)
    steps: int = Field(default=200, ge=1)
    V0: Optional[List[ComplexPair]] = None


class SystemConfig(StrictModel):
    mtl: MtlSection
    beam: BeamSection
    omega: Union[float, List[float]]
    profile: Optional[ProfileSection] = None
    simulation: Optional[SimulationSection] = None
    propagation: Optional[PropagationSection] = None

    @property
    def omegas(self) -> List[float]:
        return [self.omega] if isinstance(self.omega, (int, float)) else list(self.omega)

    @field_validator("omega")
    @classmethod
    def check_omega(cls, v: Union[float, List[float]]) -> Union[float, List[float]]:
        values = [v] if isinstance(v, (int, float)) else v
        if not values:
            raise ValueError("omega list must not be empty")
        if any(not w > 0 for w in values):
            raise ValueError("omega must be positive")
        return v


# Report

class RootEntry(StrictModel):
    re: float
    im: float
    multiplicity: int
    kind: str


class SpectralSummary(StrictModel):
    lambdas: List[float]
    velocities: List[ComplexPair]
    D: List[float]
    d: float
    weights: List[float]


class GrowingSummary(StrictModel):
    v0: ComplexPair
    k0: ComplexPair
    gain: float


class ThresholdSummary(StrictModel):
    xi0: Optional[float]
    method: str


class VietaSummary(StrictModel):
    sum_residual: float
    product_residual: float
    sum_scale: float
    product_scale: float


class EnergySummary(StrictModel):
    avg_flux: float
    power_beam_to_mtl_at_0: float
    positivity: bool
    poincare: ComplexPair
    flux_variation: float
    poincare_mismatch: float


class FrequencyReport(StrictModel):
    omega: float
    roots: List[RootEntry]
    n_real_roots: int
    intersection_roots: List[float]
    growing: Optional[GrowingSummary] = None
    vieta: VietaSummary
    energy: Optional[EnergySummary] = None
    warnings: List[str] = Field(default_factory=list)


class Report(StrictModel):
    command: str
    units: Literal["gaussian"] = "gaussian"
    inputs: Dict[str, Any]
    spectral: SpectralSummary
    threshold: Optional[ThresholdSummary] = None
    frequencies: List[FrequencyReport] = Field(default_factory=list)
    results: Dict[str, Any] = Field(default_factory=dict)
    warnings: List[str] = Field(default_factory=list)

    def to_json_dict(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


def complex_pair(value: complex) -> ComplexPair:
    value = complex(value)
    return (float(value.real), float(value.imag))


@dataclass(frozen=True)
class LoadedSystem:
    config: SystemConfig
    mtl: MtlParams
    beam: BeamParams
    omegas: List[float]


def _describe(error: ValidationError) -> str:
    parts = []
    for err in error.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "$"
        ctx = err.get("ctx") or {}
        msg = str(ctx["error"]) if "error" in ctx else err["msg"]
        parts.append(f"{loc}: {msg}")
    return "; ".join(parts)


def parse_system(text: str) -> SystemConfig:
    """
    Parse and validate the JSON text of a system file.

    Raises:
        ConfigParseError: malformed JSON, with line and column
        ConfigValidationError: well-formed JSON that violates the schema
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigParseError(e.msg, e.lineno, e.colno) from e
    try:
        return SystemConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigValidationError(_describe(e)) from e


def build_domain(config: SystemConfig) -> LoadedSystem:
    mtl = validate_mtl(config.mtl.L, config.mtl.C, config.mtl.B, config.mtl.strictness)
    section = config.beam
    if section.has_plasma:
        beam = beam_from_plasma(section.u0, section.sigma, section.rho0, section.charge_mass_ratio)
    else:
        beam = BeamParams(u0=section.u0, xi=section.xi)
    if not all(math.isfinite(w) for w in config.omegas):
        raise ConfigValidationError("omega must be finite")
    return LoadedSystem(config=config, mtl=mtl, beam=beam, omegas=config.omegas)


def load_system(path: str) -> LoadedSystem:
    """
    Read a system file and construct validated domain objects.

    Args:
        path: JSON system file

    Returns:
        LoadedSystem with MtlParams, BeamParams and the list of frequencies
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigValidationError(f"cannot read system file {path}: {e}") from e
    system = build_domain(parse_system(text))
    logger.info(
        f"Loaded n={system.mtl.n} system from {path} "
        f"({system.mtl.strictness.value}, u0={system.beam.u0:g}, xi={system.beam.xi:g})"
    )
    return system
