"""The isolated electron beam: degenerate dispersion, its perturbations and stability."""
import cmath
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Tuple

import numpy as np

from tools.errors import InvalidParameterError

logger = logging.getLogger(__name__)

DEGENERACY_TOL = 1e-12


class FloquetClass(str, Enum):
    STABLE = "Stable"
    UNSTABLE = "Unstable"
    DEGENERATE = "Degenerate"


class PdeClass(str, Enum):
    HYPERBOLIC = "Hyperbolic"
    PARABOLIC = "Parabolic"
    ELLIPTIC = "Elliptic"


@dataclass(frozen=True)
class BeamPerturbation:
    """Beam relation omega^2 - 2 alpha u0 omega k + u0^2 k^2 = 0; alpha_g = 1 is the bare beam."""

    alpha_g: float
    u0: float
    omega: float

    def __post_init__(self):
        for name in ("alpha_g", "u0", "omega"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidParameterError(f"{name} must be finite")
        if self.u0 <= 0 or self.omega <= 0:
            raise InvalidParameterError("u0 and omega must be positive")


@dataclass(frozen=True)
class BeamRoots:
    k_plus: complex
    k_minus: complex
    degenerate: bool


@dataclass(frozen=True)
class BeamEnergyFlux:
    H_b: float
    S_b: float


def _is_degenerate(alpha_g: float) -> bool:
    return abs(alpha_g * alpha_g - 1.0) < DEGENERACY_TOL


def beam_dispersion_roots(pert: BeamPerturbation) -> BeamRoots:
    """k(alpha) = (omega/u0)(alpha +/- sqrt(alpha^2 - 1))."""
    a = pert.alpha_g
    base = pert.omega / pert.u0
    if _is_degenerate(a):
        k = complex(a * base)
        return BeamRoots(k_plus=k, k_minus=k, degenerate=True)
    root = cmath.sqrt(a * a - 1.0)
    return BeamRoots(k_plus=base * (a + root), k_minus=base * (a - root), degenerate=False)


def beam_velocities(pert: BeamPerturbation) -> Tuple[complex, complex]:
    """Phase velocities omega/k of the two roots, in (k_plus, k_minus) order."""
    roots = beam_dispersion_roots(pert)
    return pert.omega / roots.k_plus, pert.omega / roots.k_minus


def floquet_multipliers(pert: BeamPerturbation, period: float) -> Tuple[complex, complex]:
    if not period > 0:
        raise InvalidParameterError("period must be positive")
    roots = beam_dispersion_roots(pert)
    return cmath.exp(1j * roots.k_plus * period), cmath.exp(1j * roots.k_minus * period)


def floquet_classify(pert: BeamPerturbation, period: float) -> FloquetClass:
    """
    Classify the beam by its Floquet multipliers exp(i k period).

    Args:
        pert: perturbed beam
        period: spatial period

    Returns:
        UNSTABLE if a multiplier leaves the unit circle, DEGENERATE for the
        double root, STABLE otherwise
    """
    rho_plus, rho_minus = floquet_multipliers(pert, period)
    if _is_degenerate(pert.alpha_g):
        return FloquetClass.DEGENERATE
    off_circle = max(abs(abs(rho_plus) - 1.0), abs(abs(rho_minus) - 1.0))
    if off_circle > DEGENERACY_TOL:
        logger.debug(f"Unstable multipliers |rho|=({abs(rho_plus):.6g}, {abs(rho_minus):.6g})")
        return FloquetClass.UNSTABLE
    return FloquetClass.STABLE


def pde_class(alpha_g: float) -> PdeClass:
    if not math.isfinite(alpha_g):
        raise InvalidParameterError("alpha_g must be finite")
    if _is_degenerate(alpha_g):
        return PdeClass.PARABOLIC
    return PdeClass.HYPERBOLIC if alpha_g * alpha_g > 1.0 else PdeClass.ELLIPTIC


def _average(a: complex, b: complex) -> float:
    # time average of Re(a e^-iwt) Re(b e^-iwt)
    return 0.5 * (a.conjugate() * b).real


def beam_energy_flux(
    q_hat: complex,
    omega: float,
    u0: float,
    k: complex,
    z: float,
    secular: bool = False,
) -> BeamEnergyFlux:
    """
    Time-averaged energy and flux of a harmonic beam field per unit coupling.

    H_b = (q_t^2 - u0^2 q_z^2)/2 and S_b = u0 q_t (q_t + u0 q_z), the
    bare-beam densities. The field is Re{q_hat e^{i(kz - wt)}}; with
    ``secular`` it is multiplied by z.

    Args:
        q_hat: complex amplitude
        omega: angular frequency
        u0: beam velocity
        k: wavenumber
        z: position

    Returns:
        BeamEnergyFlux with the averages at z
    """
    phase = cmath.exp(1j * k * z)
    amp = q_hat * phase
    qt = -1j * omega * amp
    if secular:
        qt = z * qt
        qz = amp * (1.0 + 1j * k * z)
    else:
        qz = 1j * k * amp
    H = 0.5 * (_average(qt, qt) - u0 * u0 * _average(qz, qz))
    S = u0 * (_average(qt, qt) + u0 * _average(qt, qz))
    return BeamEnergyFlux(H_b=float(H), S_b=float(S))


def beam_conservation_residual(q: np.ndarray, dt: float, dz: float, u0: float) -> np.ndarray:
    """
    Discrete d_t H_b + d_z S_b on interior grid points.

    Args:
        q: samples with shape (nt, nz)
        dt: time step
        dz: grid spacing
        u0: beam velocity

    Returns:
        Residual on the (nt-2, nz-2) interior, centered differences throughout
    """
    q = np.asarray(q, dtype=float)
    if q.ndim != 2 or min(q.shape) < 3:
        raise InvalidParameterError("q must be a 2-D array with at least 3 samples per axis")
    qt = np.gradient(q, dt, axis=0)
    qz = np.gradient(q, dz, axis=1)
    H = 0.5 * (qt * qt - u0 * u0 * qz * qz)
    S = u0 * qt * (qt + u0 * qz)
    residual = np.gradient(H, dt, axis=0) + np.gradient(S, dz, axis=1)
    return residual[1:-1, 1:-1]
