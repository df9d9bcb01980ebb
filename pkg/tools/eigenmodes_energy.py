"""Eigenmode amplitudes, energy densities, fluxes and beam-to-line power."""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from tools.core_linalg import BeamParams, MtlParams, MtlSpectralData, characteristic_matrix
from tools.dw_hamiltonian import QuadBlocks, assemble_blocks, dw_system, mode_state, poincare_form
from tools.errors import (
    InvalidParameterError,
    NonGrowingModeError,
    NotARootError,
    RankDeficiencyAmbiguousError,
)

logger = logging.getLogger(__name__)

ROOT_TOL = 1e-7
SINGULAR_A_TOL = 1e-10
RESIDUAL_TOL = 1e-8
DEFAULT_Z_END = 10.0
# exp(600) stays far from float overflow even after multiplying amplitudes
MAX_ENVELOPE_EXPONENT = 600.0


@dataclass(frozen=True)
class Eigenmode:
    """Plane wave (Q, q) = (Q_hat, q_hat) exp(i(kz - wt)) with k = omega / v."""

    omega: float
    v: complex
    k: complex
    Q_hat: np.ndarray
    q_hat: complex

    @property
    def state_vector(self) -> np.ndarray:
        return np.concatenate([self.Q_hat, [self.q_hat]])

    @property
    def is_growing(self) -> bool:
        return self.k.imag < 0


@dataclass(frozen=True)
class ModeFields:
    """Real fields; V and I have a trailing line axis."""

    V: np.ndarray
    I: np.ndarray
    Q: np.ndarray
    q: np.ndarray


@dataclass(frozen=True)
class SubsystemFluxes:
    mtl: np.ndarray
    beam: np.ndarray


@dataclass(frozen=True)
class SubsystemBalance:
    """d<S>/dz of each subsystem; the line gains what the beam loses."""

    power_to_mtl: np.ndarray
    power_to_beam: np.ndarray


@dataclass(frozen=True)
class EnergyReport:
    z_grid: np.ndarray
    avg_flux_total: np.ndarray
    avg_power_beam_to_mtl: np.ndarray
    poincare: complex
    positivity: bool
    flux_variation: float
    poincare_mismatch: float


def augmented_matrix(spec: MtlSpectralData, beam: BeamParams, v: complex) -> np.ndarray:
    """A~(v) = [[A(v), D], [D^T, d - xi (v - u0)^2]]."""
    n = spec.n
    out = np.zeros((n + 1, n + 1), dtype=complex)
    out[:n, :n] = characteristic_matrix(spec.mtl, v)
    out[:n, n] = spec.D
    out[n, :n] = spec.D
    out[n, n] = spec.d - beam.xi * (v - beam.u0) ** 2
    return out


def _normalized(x: np.ndarray) -> np.ndarray:
    if abs(x[-1]) > 1e-12 * np.linalg.norm(x):
        return x / x[-1]
    x = x / np.linalg.norm(x)
    pivot = x[int(np.argmax(np.abs(x)))]
    return x * (abs(pivot) / pivot)


def eigenmode_solve(spec: MtlSpectralData, beam: BeamParams, omega: float, v: complex) -> Eigenmode:
    """
    Amplitudes of the plane wave travelling with phase velocity v.

    Args:
        spec: spectral data of the lines
        beam: beam parameters
        omega: angular frequency
        v: a root of Delta(v)

    Returns:
        Eigenmode with q_hat = 1 whenever the beam takes part
    """
    if not omega > 0:
        raise InvalidParameterError("omega must be positive")
    v = complex(v)
    if v == 0:
        raise NotARootError("v = 0 is not a phase velocity")
    At = augmented_matrix(spec, beam, v)
    U, s, Vh = linalg.svd(At)
    if s[-1] > ROOT_TOL * s[0]:
        raise NotARootError(f"v={v} is not a root (sigma_min/sigma_max = {s[-1] / s[0]:.3e})")

    A = At[:-1, :-1]
    sA = linalg.svdvals(A)
    if sA[-1] > SINGULAR_A_TOL * sA[0]:
        Q_hat = -linalg.solve(A, spec.D.astype(complex))
        x = np.concatenate([Q_hat, [1.0 + 0j]])
    else:
        null = [Vh[i].conj() for i in range(s.size) if s[i] <= ROOT_TOL * s[0]]
        if len(null) > 1:
            raise RankDeficiencyAmbiguousError(
                f"null space at v={v} has dimension {len(null)}", basis=null
            )
        x = _normalized(null[0])

    residual = np.linalg.norm(At @ x)
    if residual > RESIDUAL_TOL * np.linalg.norm(At) * np.linalg.norm(x):
        raise NotARootError(f"mode residual {residual:.3e} at v={v}")
    logger.debug(f"Eigenmode at v={v}: q_hat={x[-1]}")
    return Eigenmode(omega=float(omega), v=v, k=omega / v, Q_hat=x[:-1], q_hat=complex(x[-1]))


def _envelope(mode: Eigenmode, z_grid: Sequence[float]) -> np.ndarray:
    return np.exp(1j * mode.k * np.asarray(z_grid, dtype=float))


def avg_flux(mode: Eigenmode, spec: MtlSpectralData, beam: BeamParams, z_grid: Sequence[float]) -> np.ndarray:
    """<S>(z) = Re{(-i w q)^* p_z} / 2 in the scaled (1/xi) units of the blocks."""
    blocks = assemble_blocks(spec.mtl, beam)
    V0 = mode_state(mode, blocks)
    N = blocks.size
    env = _envelope(mode, z_grid)
    p, w = V0[:N], V0[N:]
    return 0.5 * np.real(np.vdot(w, p)) * np.abs(env) ** 2


def poincare_invariant(mode: Eigenmode, spec: MtlSpectralData, beam: BeamParams, z_grid: Sequence[float]) -> np.ndarray:
    """V* J~ V along z for the mode's DW state."""
    dw = dw_system(assemble_blocks(spec.mtl, beam))
    V = mode_state(mode, dw.blocks)[None, :] * _envelope(mode, z_grid)[:, None]
    return poincare_form(dw.J_tilde, V)


def power_avg(mode: Eigenmode, beam: BeamParams, z_grid: Sequence[float]) -> np.ndarray:
    """
    Time-averaged beam-to-line power of the growing mode.

    <P>(z) = -omega xi |k0|^2 |q|^2 (Re v0 - u0) Im v0 exp(-2 Im k0 z)
    """
    z = np.asarray(z_grid, dtype=float)
    if mode.q_hat == 0:
        return np.zeros_like(z)
    if not mode.is_growing:
        raise NonGrowingModeError(f"mode with k={mode.k} does not grow toward +z")
    v0, k0 = mode.v, mode.k
    amplitude = -mode.omega * beam.xi * abs(k0) ** 2 * abs(mode.q_hat) ** 2 * (v0.real - beam.u0) * v0.imag
    return amplitude * np.exp(-2.0 * k0.imag * z)


def power_avg_from_amplitudes(mode: Eigenmode, mtl: MtlParams, z_grid: Sequence[float]) -> np.ndarray:
    """<P>(z) = (omega/2) e^{-2 Im k z} Im{|k|^2 (Q + B q)^* C^-1 B q}; valid for any mode."""
    z = np.asarray(z_grid, dtype=float)
    charge = mode.Q_hat + mtl.B * mode.q_hat
    core = abs(mode.k) ** 2 * np.vdot(charge, mtl.C_inv @ mtl.B * mode.q_hat)
    return 0.5 * mode.omega * np.exp(-2.0 * mode.k.imag * z) * core.imag


def mode_fields(mode: Eigenmode, mtl: MtlParams, z: Sequence[float], t) -> ModeFields:
    """
    Reconstruct real fields on a z grid at one time or a vector of times.

    Args:
        mode: eigenmode
        mtl: line parameters
        z: positions
        t: scalar time or 1-D array of times

    Returns:
        ModeFields; arrays are shaped (nz,) / (nz, n) for scalar t and
        (nt, nz) / (nt, nz, n) otherwise
    """
    z = np.asarray(z, dtype=float)
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    phase = np.exp(1j * (mode.k * z[None, :] - mode.omega * t_arr[:, None]))
    Q = np.real(phase[..., None] * mode.Q_hat)
    I = np.real(phase[..., None] * (-1j * mode.omega * mode.Q_hat))
    V_hat = -1j * mode.k * (mtl.C_inv @ (mode.Q_hat + mtl.B * mode.q_hat))
    V = np.real(phase[..., None] * V_hat)
    q = np.real(phase * mode.q_hat)
    if np.ndim(t) == 0:
        return ModeFields(V=V[0], I=I[0], Q=Q[0], q=q[0])
    return ModeFields(V=V, I=I, Q=Q, q=q)


def power_instant(
    V: np.ndarray,
    I: np.ndarray,
    dt: float,
    dz: float,
    mtl: MtlParams,
    time_periodic: bool = False,
) -> np.ndarray:
    """
    P = d_t[(CV,V)/2 + (LI,I)/2] + d_z (I,V) on a (t, z) grid.

    Args:
        V: voltages, shape (nt, nz, n) or (nt, nz) for one line
        I: currents, same shape
        dt: time step
        dz: grid spacing
        mtl: line parameters
        time_periodic: samples cover exactly one period (periodic time differences)

    Returns:
        Power density with shape (nt, nz)
    """
    V = np.asarray(V, dtype=float)
    I = np.asarray(I, dtype=float)
    if V.ndim == 2:
        V, I = V[..., None], I[..., None]
    H = 0.5 * np.einsum("tzi,ij,tzj->tz", V, mtl.C, V) + 0.5 * np.einsum("tzi,ij,tzj->tz", I, mtl.L, I)
    S = np.einsum("tzi,tzi->tz", I, V)
    if time_periodic:
        dH = (np.roll(H, -1, axis=0) - np.roll(H, 1, axis=0)) / (2.0 * dt)
    else:
        dH = np.gradient(H, dt, axis=0) if H.shape[0] > 1 else np.zeros_like(H)
    dS = np.gradient(S, dz, axis=1) if S.shape[1] > 1 else np.zeros_like(S)
    return dH + dS


def avg_subsystem_fluxes(mode: Eigenmode, mtl: MtlParams, beam: BeamParams, z_grid: Sequence[float]) -> SubsystemFluxes:
    """<(I,V)> for the lines and <[xi u0 (q_t + u0 q_z) + B.V] q_t> for the beam."""
    env = _envelope(mode, z_grid)
    I_hat = -1j * mode.omega * mode.Q_hat
    V_hat = -1j * mode.k * (mtl.C_inv @ (mode.Q_hat + mtl.B * mode.q_hat))
    qt = -1j * mode.omega * mode.q_hat
    qz = 1j * mode.k * mode.q_hat
    s_mtl = 0.5 * np.real(np.vdot(I_hat, V_hat))
    beam_momentum = beam.xi * beam.u0 * (qt + beam.u0 * qz) + mtl.B @ V_hat
    s_beam = 0.5 * np.real(np.conj(qt) * beam_momentum)
    scale = np.abs(env) ** 2
    return SubsystemFluxes(mtl=s_mtl * scale, beam=s_beam * scale)


def subsystem_balance(mode: Eigenmode, mtl: MtlParams, beam: BeamParams, z_grid: Sequence[float]) -> SubsystemBalance:
    fluxes = avg_subsystem_fluxes(mode, mtl, beam, z_grid)
    rate = -2.0 * mode.k.imag
    return SubsystemBalance(power_to_mtl=rate * fluxes.mtl, power_to_beam=rate * fluxes.beam)


def energy_density_blocks(blocks: QuadBlocks, qt: np.ndarray, qz: np.ndarray) -> float:
    """H = q_t.alpha.q_t/2 + q_z.eta.q_z/2 (scaled by 1/xi)."""
    return 0.5 * float(qt @ blocks.alpha @ qt) + 0.5 * float(qz @ blocks.eta @ qz)


def energy_density_split(
    mtl: MtlParams,
    beam: BeamParams,
    Qt: np.ndarray,
    Qz: np.ndarray,
    qt: float,
    qz: float,
) -> float:
    """H1 + H2 in physical units: line energy plus beam kinetic minus beam potential."""
    charge_z = Qz + mtl.B * qz
    H1 = 0.5 * float(Qt @ mtl.L @ Qt) + 0.5 * float(charge_z @ mtl.C_inv @ charge_z)
    H2 = 0.5 * beam.xi * qt * qt - 0.5 * beam.xi * beam.u0 ** 2 * qz * qz
    return H1 + H2


def energy_report(
    mode: Eigenmode,
    spec: MtlSpectralData,
    beam: BeamParams,
    z_grid: Optional[Sequence[float]] = None,
) -> EnergyReport:
    """
    Flux, power and invariant summary of one eigenmode.

    The default grid runs to z = 10 but stops where the envelope exponent
    2 |Im k| z reaches MAX_ENVELOPE_EXPONENT. The flux variation and
    Poincare mismatch are taken on the envelope-free values flux / |env|^2
    and invariant / |env|^2, relative to |w| |p_z|, since <S> itself
    vanishes for a growing mode.
    """
    if z_grid is None:
        decay = 2.0 * abs(mode.k.imag)
        z_end = DEFAULT_Z_END if decay == 0 else min(DEFAULT_Z_END, MAX_ENVELOPE_EXPONENT / decay)
        z = np.linspace(0.0, z_end, 101)
    else:
        z = np.asarray(z_grid, dtype=float)
        exponent = float(np.max(np.abs(2.0 * mode.k.imag * z)))
        if exponent > MAX_ENVELOPE_EXPONENT:
            raise InvalidParameterError(
                f"z grid reaches envelope exponent {exponent:.1f}, above {MAX_ENVELOPE_EXPONENT:g}; shorten it"
            )
    flux = avg_flux(mode, spec, beam, z)
    invariant = poincare_invariant(mode, spec, beam, z)
    if mode.is_growing:
        power = power_avg(mode, beam, z)
    else:
        power = power_avg_from_amplitudes(mode, spec.mtl, z)

    blocks = assemble_blocks(spec.mtl, beam)
    V0 = mode_state(mode, blocks)
    N = blocks.size
    env = np.abs(_envelope(mode, z)) ** 2
    scale = max(float(np.linalg.norm(V0[:N]) * np.linalg.norm(V0[N:])), np.finfo(float).tiny)
    flux_free = flux / env
    invariant_free = invariant / env
    flux_variation = float(np.max(np.abs(flux_free - flux_free[0]))) / scale
    poincare_mismatch = float(np.max(np.abs(invariant_free - 4j * flux_free))) / scale
    report = EnergyReport(
        z_grid=z,
        avg_flux_total=flux,
        avg_power_beam_to_mtl=power,
        poincare=complex(invariant[0]),
        positivity=bool(np.all(power > 0)),
        flux_variation=flux_variation,
        poincare_mismatch=poincare_mismatch,
    )
    logger.info(
        f"Energy report: <S>={flux[0]:.6g}, <P>(0)={power[0]:.6g}, positive={report.positivity}"
    )
    return report
