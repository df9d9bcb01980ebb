"""Validated MTL/beam parameters and the spectral data every other module uses."""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from tools.errors import (
    AsymmetricMatrixError,
    ComplexVelocitiesError,
    InvalidParameterError,
    NotPositiveDefiniteError,
    SingularCError,
)

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-12
SINGULAR_C_TOL = 1e-14
CLUSTER_TOL = 1e-9
WEIGHT_TOL = 1e-12
PLASMA_TOL = 1e-12


class Strictness(str, Enum):
    STRICT = "strict"
    PERMISSIVE = "permissive"


@dataclass(frozen=True)
class MtlParams:
    """Electrical description of n coupled lines.

    L and C are stored exactly symmetric; C_inv is cached at validation time.
    """

    L: np.ndarray
    C: np.ndarray
    B: np.ndarray
    C_inv: np.ndarray
    strictness: Strictness = Strictness.STRICT
    warnings: Tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return self.L.shape[0]

    @property
    def is_permissive(self) -> bool:
        return self.strictness is Strictness.PERMISSIVE


@dataclass(frozen=True)
class BeamParams:
    """Electron beam: mean velocity u0 and coupling constant xi (Gaussian units)."""

    u0: float
    xi: float
    sigma: Optional[float] = None
    rho0: Optional[float] = None
    charge_mass_ratio: Optional[float] = None

    def __post_init__(self):
        if not (math.isfinite(self.u0) and self.u0 > 0):
            raise InvalidParameterError("u0 must be positive")
        if not (math.isfinite(self.xi) and self.xi > 0):
            raise InvalidParameterError("xi must be positive")
        underlying = (self.sigma, self.rho0, self.charge_mass_ratio)
        if all(x is not None for x in underlying):
            expected = xi_from_plasma(self.sigma, self.rho0, self.charge_mass_ratio)
            if abs(expected - self.xi) > PLASMA_TOL * abs(expected):
                raise InvalidParameterError(
                    f"xi={self.xi} violates xi = 4*pi/(omega_p^2*sigma) = {expected}"
                )

    @property
    def epsilon(self) -> float:
        return 1.0 / self.xi

    def with_values(self, u0: Optional[float] = None, xi: Optional[float] = None) -> "BeamParams":
        """Copy with u0 and/or xi replaced (plasma data dropped when xi changes)."""
        if xi is None:
            return BeamParams(u0=self.u0 if u0 is None else u0, xi=self.xi,
                              sigma=self.sigma, rho0=self.rho0,
                              charge_mass_ratio=self.charge_mass_ratio)
        return BeamParams(u0=self.u0 if u0 is None else u0, xi=xi)


@dataclass(frozen=True)
class SpectralCluster:
    """Group of (numerically) equal squared velocities."""

    lam: float
    multiplicity: int
    weight: float
    indices: Tuple[int, ...]

    @property
    def active(self) -> bool:
        return self.weight > 0.0


@dataclass(frozen=True)
class MtlSpectralData:
    """Characteristic velocities and the congruence transform of an MTL.

    ``lambdas`` are the squared velocities, positive ones first in ascending
    order, followed by any non-positive ones (permissive mode only).
    """

    mtl: MtlParams
    lambdas: np.ndarray
    velocities: np.ndarray
    P: np.ndarray
    D: np.ndarray
    d: float
    Dtilde: np.ndarray
    clusters: Tuple[SpectralCluster, ...]
    complex_velocities: bool = False
    warnings: Tuple[str, ...] = field(default=())

    @property
    def n(self) -> int:
        return self.mtl.n

    @property
    def real_velocities(self) -> np.ndarray:
        """Positive characteristic velocities, ascending."""
        positive = self.lambdas[self.lambdas > 0]
        return np.sqrt(positive)

    @property
    def v1(self) -> float:
        real = self.real_velocities
        if real.size == 0:
            raise ComplexVelocitiesError("no real characteristic velocity")
        return float(real[0])

    @property
    def active_clusters(self) -> List[SpectralCluster]:
        return [c for c in self.clusters if c.active]

    def require_real_velocities(self) -> None:
        if self.complex_velocities:
            raise ComplexVelocitiesError(
                "some squared characteristic velocities are non-positive: "
                f"{self.lambdas[self.lambdas <= 0].tolist()}"
            )

    def diagonalization_residual(self, v: complex) -> float:
        """max |P^T A(v) P - diag(lambda - v^2)| relative to ||A(v)||."""
        A = characteristic_matrix(self.mtl, v)
        lhs = self.P.T @ A @ self.P
        rhs = np.diag(self.lambdas - v * v)
        scale = max(np.linalg.norm(A), 1.0)
        return float(np.max(np.abs(lhs - rhs)) / scale)


def _symmetrized(name: str, raw: np.ndarray) -> np.ndarray:
    asym = float(np.max(np.abs(raw - raw.T))) if raw.size else 0.0
    scale = float(np.linalg.norm(raw))
    if asym > SYMMETRY_TOL * scale:
        raise AsymmetricMatrixError(f"{name} is not symmetric (max asymmetry {asym:.3e})")
    return 0.5 * (raw + raw.T)


def _is_positive_definite(M: np.ndarray) -> bool:
    try:
        linalg.cholesky(M, lower=True)
        return True
    except linalg.LinAlgError:
        return False


def validate_mtl(
    L_raw: Sequence[Sequence[float]],
    C_raw: Sequence[Sequence[float]],
    B: Optional[Sequence[float]] = None,
    strictness: Strictness = Strictness.STRICT,
) -> MtlParams:
    """
    Validate and symmetrize the line matrices.

    Args:
        L_raw: n x n inductance per unit length
        C_raw: n x n capacitance per unit length
        B: coupling weights of the beam to each line (default all ones)
        strictness: STRICT requires L, C positive definite; PERMISSIVE only
            L positive definite and C invertible

    Returns:
        MtlParams
    """
    strictness = Strictness(strictness)
    L = np.array(L_raw, dtype=float)
    C = np.array(C_raw, dtype=float)
    if L.ndim != 2 or L.shape[0] != L.shape[1] or L.shape[0] < 1:
        raise InvalidParameterError(f"L must be a non-empty square matrix, got shape {L.shape}")
    if C.shape != L.shape:
        raise InvalidParameterError(f"C shape {C.shape} does not match L shape {L.shape}")
    n = L.shape[0]
    if B is None:
        B_arr = np.ones(n)
    else:
        B_arr = np.array(B, dtype=float).reshape(-1)
        if B_arr.shape != (n,):
            raise InvalidParameterError(f"B must have {n} entries, got {B_arr.size}")
    for name, arr in (("L", L), ("C", C), ("B", B_arr)):
        if not np.all(np.isfinite(arr)):
            raise InvalidParameterError(f"{name} has non-finite entries")

    L = _symmetrized("L", L)
    C = _symmetrized("C", C)

    warnings: List[str] = []
    if not _is_positive_definite(L):
        raise NotPositiveDefiniteError("L is not positive definite")
    if strictness is Strictness.STRICT:
        if not _is_positive_definite(C):
            raise NotPositiveDefiniteError("C is not positive definite")
    else:
        det_c = float(np.linalg.det(C))
        scale = float(np.linalg.norm(C)) ** n
        if abs(det_c) <= SINGULAR_C_TOL * scale:
            raise SingularCError(f"C is singular (|det C| = {abs(det_c):.3e})")
        if not _is_positive_definite(C):
            msg = "permissive mode: C is not positive definite"
            logger.warning(msg)
            warnings.append(msg)

    C_inv = linalg.inv(C)
    C_inv = 0.5 * (C_inv + C_inv.T)
    logger.debug(f"Validated MTL with n={n} ({strictness.value})")
    return MtlParams(L=L, C=C, B=B_arr, C_inv=C_inv, strictness=strictness,
                     warnings=tuple(warnings))


def characteristic_matrix(mtl: MtlParams, v: complex) -> np.ndarray:
    """A(v) = -v^2 L + C^-1."""
    return -(v * v) * mtl.L + mtl.C_inv


def _cluster(lambdas: np.ndarray, Dtilde: np.ndarray, d: float) -> Tuple[SpectralCluster, ...]:
    clusters: List[SpectralCluster] = []
    scale = max(float(np.max(np.abs(lambdas))), np.finfo(float).tiny)
    weight_floor = WEIGHT_TOL * max(abs(d), float(np.sum(Dtilde ** 2)), np.finfo(float).tiny)
    i = 0
    while i < lambdas.size:
        j = i + 1
        while j < lambdas.size and abs(lambdas[j] - lambdas[i]) <= CLUSTER_TOL * scale:
            j += 1
        members = tuple(range(i, j))
        lam = float(np.mean(lambdas[i:j]))
        weight = float(np.sum(Dtilde[i:j] ** 2))
        if weight <= weight_floor:
            weight = 0.0
        clusters.append(SpectralCluster(lam=lam, multiplicity=j - i, weight=weight, indices=members))
        i = j
    return tuple(clusters)


def spectral_data(mtl: MtlParams) -> MtlSpectralData:
    """
    Diagonalize the line system by congruence.

    With L = G G^T (Cholesky) the symmetric matrix G^-1 C^-1 G^-T shares its
    spectrum with L^-1/2 C^-1 L^-1/2. P = G^-T U then satisfies P^T L P = I
    and P^T C^-1 P = diag(lambda).

    Args:
        mtl: validated parameters

    Returns:
        MtlSpectralData
    """
    G = linalg.cholesky(mtl.L, lower=True)
    G_inv = linalg.solve_triangular(G, np.eye(mtl.n), lower=True)
    S = G_inv @ mtl.C_inv @ G_inv.T
    S = 0.5 * (S + S.T)
    lam, U = linalg.eigh(S)

    # positive squared velocities first, ascending; the rest after
    order = np.concatenate([np.flatnonzero(lam > 0), np.flatnonzero(lam <= 0)[::-1]])
    lam = lam[order]
    U = U[:, order]
    P = G_inv.T @ U

    D = mtl.C_inv @ mtl.B
    d = float(mtl.B @ D)
    Dtilde = P.T @ D

    complex_velocities = bool(np.any(lam <= 0))
    velocities = np.sqrt(lam.astype(complex))
    warnings = list(mtl.warnings)
    if complex_velocities:
        msg = f"{int(np.sum(lam <= 0))} characteristic velocity(ies) imaginary (lambda <= 0)"
        logger.warning(msg)
        warnings.append(msg)

    spec = MtlSpectralData(
        mtl=mtl,
        lambdas=lam,
        velocities=velocities,
        P=P,
        D=D,
        d=d,
        Dtilde=Dtilde,
        clusters=_cluster(lam, Dtilde, d),
        complex_velocities=complex_velocities,
        warnings=tuple(warnings),
    )

    trial = 0.5 * float(np.sqrt(np.max(np.abs(lam))))
    for v in (0.0, trial, 2.0 * trial):
        residual = spec.diagonalization_residual(v)
        if residual > 1e-10:
            logger.warning(f"Diagonalization residual {residual:.3e} at v={v}")
    logger.info(f"Spectral data: lambdas={lam.tolist()}, d={d:.6g}")
    return spec


def dtilde_by_congruence(spec: MtlSpectralData) -> np.ndarray:
    """D~ from the linear system (L P) x = D, since P^-T = L P."""
    return linalg.solve(spec.mtl.L @ spec.P, spec.D)


def plasma_frequency(rho0: float, charge_mass_ratio: float) -> float:
    """omega_p = sqrt(4 pi rho0 e/m)."""
    return math.sqrt(4.0 * math.pi * rho0 * charge_mass_ratio)


def xi_from_plasma(sigma: float, rho0: float, charge_mass_ratio: float) -> float:
    """xi = 4 pi / (omega_p^2 sigma) = 1 / (sigma rho0 e/m)."""
    if sigma <= 0 or rho0 <= 0 or charge_mass_ratio <= 0:
        raise InvalidParameterError("sigma, rho0 and charge_mass_ratio must be positive")
    return 4.0 * math.pi / (plasma_frequency(rho0, charge_mass_ratio) ** 2 * sigma)


def beam_from_plasma(u0: float, sigma: float, rho0: float, charge_mass_ratio: float) -> BeamParams:
    return BeamParams(
        u0=u0,
        xi=xi_from_plasma(sigma, rho0, charge_mass_ratio),
        sigma=sigma,
        rho0=rho0,
        charge_mass_ratio=charge_mass_ratio,
    )
