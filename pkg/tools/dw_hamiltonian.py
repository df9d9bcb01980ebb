"""Quadratic Lagrangian blocks and the first-order (de Donder-Weyl) z-evolution."""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import TYPE_CHECKING, Callable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from tools.core_linalg import BeamParams, MtlParams, Strictness, validate_mtl
from tools.errors import (
    HamiltonianStructureError,
    InvalidParameterError,
    SingularEtaError,
    StepUnstableError,
)

if TYPE_CHECKING:
    from tools.eigenmodes_energy import Eigenmode

logger = logging.getLogger(__name__)

STRUCTURE_TOL = 1e-12
DET_TOL = 1e-8
DUPLICATE_SAMPLE_TOL = 1e-12

MatrixProfile = Callable[[float], np.ndarray]


@dataclass(frozen=True)
class QuadBlocks:
    """alpha, theta, eta of L = q_t.alpha.q_t/2 + q_t.theta.q_z - q_z.eta.q_z/2 (scaled by 1/xi)."""

    alpha: np.ndarray
    theta: np.ndarray
    eta: np.ndarray
    epsilon: float
    u0: float
    C: np.ndarray
    B: np.ndarray

    @property
    def size(self) -> int:
        return self.alpha.shape[0]


@dataclass(frozen=True)
class DwSystem:
    J_tilde: np.ndarray
    M_tilde: np.ndarray
    blocks: QuadBlocks


@dataclass(frozen=True)
class FormCheck:
    """A Hamiltonian matrix computed directly and as a triple product."""

    direct: np.ndarray
    factorized: np.ndarray
    from_dw: Optional[np.ndarray] = None

    @property
    def residual(self) -> float:
        scale = max(float(np.max(np.abs(self.direct))), 1.0)
        others = [self.factorized] + ([self.from_dw] if self.from_dw is not None else [])
        return max(float(np.max(np.abs(self.direct - m))) for m in others) / scale


@dataclass(frozen=True)
class Trajectory:
    z: np.ndarray
    V: np.ndarray
    invariant: np.ndarray
    max_drift: float
    halvings: int


@dataclass(frozen=True)
class Propagator:
    Z: np.ndarray
    drift: float
    halvings: int = 0


def assemble_blocks(mtl: MtlParams, beam: BeamParams) -> QuadBlocks:
    """
    Build alpha, theta and eta for the line/beam Lagrangian.

    Args:
        mtl: line parameters
        beam: beam parameters

    Returns:
        QuadBlocks of size n+1
    """
    n = mtl.n
    eps = beam.epsilon
    u0 = beam.u0
    CiB = mtl.C_inv @ mtl.B

    alpha = np.zeros((n + 1, n + 1))
    alpha[:n, :n] = eps * mtl.L
    alpha[n, n] = 1.0

    theta = np.zeros((n + 1, n + 1))
    theta[n, n] = u0

    eta = np.zeros((n + 1, n + 1))
    eta[:n, :n] = eps * mtl.C_inv
    eta[:n, n] = eps * CiB
    eta[n, :n] = eps * CiB
    eta[n, n] = eps * float(mtl.B @ CiB) - u0 * u0

    expected = -u0 * u0 * float(np.linalg.det(eps * mtl.C_inv))
    actual = float(np.linalg.det(eta))
    if expected == 0.0 or abs(actual - expected) > DET_TOL * abs(expected):
        raise SingularEtaError(f"det(eta)={actual:.6e} does not match -u0^2 det(eps C^-1)={expected:.6e}")
    return QuadBlocks(alpha=alpha, theta=theta, eta=eta, epsilon=eps, u0=u0, C=mtl.C, B=mtl.B)


def eta_inverse(blocks: QuadBlocks) -> np.ndarray:
    """Exact inverse of eta by block elimination; the Schur complement is -u0^2."""
    eps, u0, B = blocks.epsilon, blocks.u0, blocks.B
    n = B.size
    inv = np.zeros((n + 1, n + 1))
    inv[:n, :n] = blocks.C / eps - np.outer(B, B) / u0 ** 2
    inv[:n, n] = B / u0 ** 2
    inv[n, :n] = B / u0 ** 2
    inv[n, n] = -1.0 / u0 ** 2
    return inv


def lagrangian_matrix(blocks: QuadBlocks) -> np.ndarray:
    """M_L with L = u.M_L.u/2 for u = (q_t, q_z)."""
    return np.block([[blocks.alpha, blocks.theta], [blocks.theta.T, -blocks.eta]])


def beam_only_lagrangian_matrix(u0: float) -> np.ndarray:
    return np.array([[1.0, u0], [u0, u0 * u0]])


def lagrangian_value(blocks: QuadBlocks, u: np.ndarray) -> float:
    return 0.5 * float(u @ lagrangian_matrix(blocks) @ u)


def dw_hamiltonian_value(blocks: QuadBlocks, p: np.ndarray) -> float:
    """H_DW = p.M_L^-1.p / 2; M_L may be indefinite."""
    x = linalg.solve(lagrangian_matrix(blocks), p, assume_a="sym")
    return 0.5 * float(p @ x)


def _j_tilde(size: int) -> np.ndarray:
    eye = np.eye(size)
    zero = np.zeros((size, size))
    return np.block([[zero, 1j * eye], [1j * eye, zero]])


def hamiltonian_t_form(blocks: QuadBlocks, k: complex) -> FormCheck:
    """M_Ht(k) directly and as [[1,0],[ik theta,1]] diag(alpha^-1, k^2 eta) [[1,-ik theta],[0,1]]."""
    a_inv = linalg.inv(blocks.alpha)
    th, eta = blocks.theta, blocks.eta
    N = blocks.size
    eye, zero = np.eye(N), np.zeros((N, N))
    direct = np.block([
        [a_inv, -1j * k * a_inv @ th],
        [1j * k * th @ a_inv, k * k * (th @ a_inv @ th) + k * k * eta],
    ])
    lower = np.block([[eye, zero], [1j * k * th, eye]])
    middle = np.block([[a_inv, zero], [zero, k * k * eta]])
    upper = np.block([[eye, -1j * k * th], [zero, eye]])
    return FormCheck(direct=direct, factorized=lower @ middle @ upper)


def hamiltonian_z_form(blocks: QuadBlocks, omega: float, dw: Optional[DwSystem] = None) -> FormCheck:
    """M_Hz(omega) directly, via triangular factors, and (if given) from the DW matrix."""
    e_inv = eta_inverse(blocks)
    th, al = blocks.theta, blocks.alpha
    N = blocks.size
    eye, zero = np.eye(N), np.zeros((N, N))
    w = omega
    direct = np.block([
        [-e_inv, -1j * w * e_inv @ th],
        [1j * w * th @ e_inv, -w * w * (al + th @ e_inv @ th)],
    ])
    lower = np.block([[eye, zero], [-1j * w * th, eye]])
    middle = np.block([[-e_inv, zero], [zero, -w * w * al]])
    upper = np.block([[eye, 1j * w * th], [zero, eye]])
    from_dw = None
    if dw is not None:
        scale = np.diag(np.concatenate([np.ones(N), 1j * w * np.ones(N)]))
        from_dw = scale @ dw.M_tilde @ scale.conj()
    return FormCheck(direct=direct, factorized=lower @ middle @ upper, from_dw=from_dw)


def dw_system(blocks: QuadBlocks) -> DwSystem:
    """
    Assemble J~ and M~ for J~ d_z V = omega M~ V with V = (p_z, q_t).

    Raises:
        HamiltonianStructureError: if J~ is not anti-Hermitian with J~^2 = -I,
            M~ is not Hermitian, or the z-form factorization fails
    """
    N = blocks.size
    J = _j_tilde(N)
    e_inv = eta_inverse(blocks)
    th, al = blocks.theta, blocks.alpha
    M = np.block([[-e_inv, e_inv @ th], [th @ e_inv, -al - th @ e_inv @ th]])

    scale = max(float(np.max(np.abs(M))), 1.0)
    if not np.allclose(J.conj().T, -J, rtol=0, atol=STRUCTURE_TOL):
        raise HamiltonianStructureError("J~ is not anti-Hermitian")
    if not np.allclose(J @ J, -np.eye(2 * N), rtol=0, atol=STRUCTURE_TOL):
        raise HamiltonianStructureError("J~^2 != -I")
    if not np.allclose(M, M.conj().T, rtol=0, atol=STRUCTURE_TOL * scale):
        raise HamiltonianStructureError("M~ is not Hermitian")

    system = DwSystem(J_tilde=J, M_tilde=M, blocks=blocks)
    check = hamiltonian_z_form(blocks, 1.0, system)
    if check.residual > STRUCTURE_TOL * 10:
        raise HamiltonianStructureError(f"z-form factorization residual {check.residual:.3e}")
    return system


def generator(dw: DwSystem, omega: float) -> np.ndarray:
    """omega J~^-1 M~, using J~^-1 = -J~."""
    return -omega * dw.J_tilde @ dw.M_tilde


def dispersion_wavenumbers(dw: DwSystem, omega: float) -> np.ndarray:
    """Wavenumbers k from the eigenvalues ik of the z-generator."""
    return linalg.eigvals(generator(dw, omega)) / 1j


def poincare_form(J: np.ndarray, V: np.ndarray) -> np.ndarray:
    """V* J~ V for a single state or for each row of a stack of states."""
    V = np.atleast_2d(V)
    return np.einsum("zi,ij,zj->z", V.conj(), J, V)


def _as_profile(profile: Union[DwSystem, MatrixProfile]) -> Tuple[MatrixProfile, int]:
    if isinstance(profile, DwSystem):
        M = profile.M_tilde
        return (lambda z: M), M.shape[0]
    size = profile(0.0).shape[0]
    return profile, size


def _rk4(f: Callable[[float, np.ndarray], np.ndarray], y0: np.ndarray, z0: float, h: float, steps: int) -> np.ndarray:
    out = np.empty((steps + 1,) + y0.shape, dtype=complex)
    out[0] = y0
    y = y0.astype(complex)
    z = z0
    for i in range(steps):
        k1 = f(z, y)
        k2 = f(z + h / 2, y + (h / 2) * k1)
        k3 = f(z + h / 2, y + (h / 2) * k2)
        k4 = f(z + h, y + h * k3)
        y = y + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        z = z0 + (i + 1) * h
        out[i + 1] = y
    return out


def z_propagate(
    profile: Union[DwSystem, MatrixProfile],
    omega: float,
    V0: np.ndarray,
    z_span: Tuple[float, float],
    steps: int,
    tol: float = 1e-6,
    max_halvings: int = 8,
) -> Trajectory:
    """
    Integrate d_z V = omega J~^-1 M~(z) V with classical RK4.

    The step is halved (up to ``max_halvings`` times) while the drift of
    V* J~ V, relative to max |V|^2, exceeds ``tol``.

    Args:
        profile: DwSystem (homogeneous) or callable z -> M~(z)
        omega: angular frequency
        V0: initial state of length 2(n+1)
        z_span: (z_start, z_end)
        steps: number of output intervals

    Returns:
        Trajectory sampled at steps+1 equally spaced points
    """
    M_of_z, size = _as_profile(profile)
    V0 = np.asarray(V0, dtype=complex)
    if V0.shape != (size,):
        raise InvalidParameterError(f"V0 must have {size} entries")
    if steps < 1:
        raise InvalidParameterError("steps must be positive")
    J = _j_tilde(size // 2)
    z0, z1 = float(z_span[0]), float(z_span[1])
    z_out = np.linspace(z0, z1, steps + 1)

    if not np.any(V0):
        zeros = np.zeros((steps + 1, size), dtype=complex)
        return Trajectory(z=z_out, V=zeros, invariant=np.zeros(steps + 1, dtype=complex),
                          max_drift=0.0, halvings=0)

    def f(z: float, V: np.ndarray) -> np.ndarray:
        return -omega * (J @ (M_of_z(z) @ V))

    for halvings in range(max_halvings + 1):
        stride = 2 ** halvings
        n_steps = steps * stride
        V = _rk4(f, V0, z0, (z1 - z0) / n_steps, n_steps)[::stride]
        inv = poincare_form(J, V)
        scale = float(np.max(np.sum(np.abs(V) ** 2, axis=1)))
        drift = float(np.max(np.abs(inv - inv[0]))) / scale
        if drift <= tol:
            logger.debug(f"Propagation accepted after {halvings} halvings, drift {drift:.3e}")
            return Trajectory(z=z_out, V=V, invariant=inv, max_drift=drift, halvings=halvings)
        logger.debug(f"Invariant drift {drift:.3e} > {tol:.1e}; halving step")
    raise StepUnstableError(f"invariant drift {drift:.3e} after {max_halvings} halvings")


def propagator(
    profile: Union[DwSystem, MatrixProfile],
    omega: float,
    z_span: Tuple[float, float],
    steps: int,
    tol: float = 1e-7,
    max_halvings: int = 8,
) -> Propagator:
    """
    Matrix solution Z(z) with Z(z0) = I.

    The symplectic drift ||Z* J~ Z - J~|| is taken relative to ||Z||^2, which
    grows like exp(2 |Im k| z) on an amplifying system. The step is halved
    while the drift exceeds ``tol``, as in ``z_propagate``.
    """
    if steps < 1:
        raise InvalidParameterError("steps must be positive")
    M_of_z, size = _as_profile(profile)
    J = _j_tilde(size // 2)
    z0, z1 = float(z_span[0]), float(z_span[1])

    def f(z: float, Z: np.ndarray) -> np.ndarray:
        return -omega * (J @ (M_of_z(z) @ Z))

    for halvings in range(max_halvings + 1):
        n_steps = steps * 2 ** halvings
        Z = _rk4(f, np.eye(size, dtype=complex), z0, (z1 - z0) / n_steps, n_steps)[-1]
        drift = float(np.linalg.norm(Z.conj().T @ J @ Z - J) / np.linalg.norm(Z) ** 2)
        if drift <= tol:
            logger.debug(f"Propagator accepted after {halvings} halvings, drift {drift:.3e}")
            return Propagator(Z=Z, drift=drift, halvings=halvings)
        logger.debug(f"Propagator drift {drift:.3e} > {tol:.1e}; halving step")
    raise StepUnstableError(f"propagator drift {drift:.3e} after {max_halvings} halvings")


def mode_state(mode: "Eigenmode", blocks: QuadBlocks) -> np.ndarray:
    """V(0) = (p_z, q_t) of a plane-wave eigenmode."""
    q = mode.state_vector
    w = -1j * mode.omega * q
    p = -1j * mode.omega * (blocks.theta @ q) - 1j * mode.k * (blocks.eta @ q)
    return np.concatenate([p, w])


def modulated_profile(mtl: MtlParams, beam: BeamParams, modulation: Callable[[float], float]) -> MatrixProfile:
    """M~(z) for C(z) = C * modulation(z)."""

    @lru_cache(maxsize=4096)
    def M_of_z(z: float) -> np.ndarray:
        scaled = validate_mtl(mtl.L, mtl.C * modulation(z), mtl.B, mtl.strictness)
        return dw_system(assemble_blocks(scaled, beam)).M_tilde

    return M_of_z


def profile_from_samples(
    samples: Sequence[Tuple[float, object, object]],
    period: float,
    beam: BeamParams,
    B: Optional[Sequence[float]] = None,
    strictness: Strictness = Strictness.STRICT,
) -> MatrixProfile:
    """
    Periodic, piecewise-linear M~(z) from sampled L(z), C(z).

    Args:
        samples: (z, L, C) triples; L and C are scalars or n x n matrices
        period: repetition length
        beam: beam parameters
        B: coupling weights
        strictness: validation mode for each interpolated point

    Returns:
        Callable z -> M~(z)
    """
    if not period > 0:
        raise InvalidParameterError("profile period must be positive")
    if len(samples) < 2:
        raise InvalidParameterError("profile needs at least two samples")
    ordered = sorted(samples, key=lambda s: s[0])
    zs = np.array([s[0] % period for s in ordered])
    order = np.argsort(zs, kind="stable")
    zs = zs[order]
    Ls = np.array([np.atleast_2d(np.asarray(ordered[i][1], dtype=float)) for i in order])
    Cs = np.array([np.atleast_2d(np.asarray(ordered[i][2], dtype=float)) for i in order])
    # wrap the first sample one period ahead
    zs = np.append(zs, zs[0] + period)
    if np.any(np.diff(zs) <= DUPLICATE_SAMPLE_TOL * period):
        raise InvalidParameterError("profile samples coincide modulo the period")
    Ls = np.concatenate([Ls, Ls[:1]])
    Cs = np.concatenate([Cs, Cs[:1]])

    @lru_cache(maxsize=4096)
    def M_of_z(z: float) -> np.ndarray:
        zz = zs[0] + (z - zs[0]) % period
        j = int(np.clip(np.searchsorted(zs, zz, side="right") - 1, 0, zs.size - 2))
        t = (zz - zs[j]) / (zs[j + 1] - zs[j])
        L = (1 - t) * Ls[j] + t * Ls[j + 1]
        C = (1 - t) * Cs[j] + t * Cs[j + 1]
        mtl = validate_mtl(L, C, B, strictness)
        return dw_system(assemble_blocks(mtl, beam)).M_tilde

    logger.info(f"Profile with {len(samples)} samples over period {period}")
    return M_of_z
