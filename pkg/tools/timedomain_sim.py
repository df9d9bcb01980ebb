"""Time-domain integration of the coupled line and beam field equations on a uniform grid."""
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.integrate import trapezoid
from scipy.sparse.linalg import splu

from tools.core_linalg import BeamParams, MtlParams, MtlSpectralData, spectral_data
from tools.dispersion import solve_dispersion
from tools.eigenmodes_energy import Eigenmode
from tools.errors import (
    BlowupError,
    InvalidParameterError,
    MtlbError,
    NotConvergedError,
    ReportIoError,
)

logger = logging.getLogger(__name__)

MIN_NODES = 64
BLOWUP_FACTOR = 1e12
CONVERGENCE_TOL = 0.05
DEFAULT_DAMPING_RATIO = 4.0
# grid-mode filter: order of the difference operator, cutoff over the largest
# physical wavenumber, and rate damping at the cutoff in units of 2 G k
FILTER_ORDER = 4
FILTER_CUTOFF_RATIO = 3.0
FILTER_MARGIN = 4.0


class Boundary(str, Enum):
    DRIVE_ABSORB = "DriveAbsorb"
    PERIODIC = "Periodic"


class DriveTarget(str, Enum):
    BEAM = "Beam"
    LINE = "Line"


class Scheme(str, Enum):
    UPWIND = "Upwind"
    CONSERVATIVE = "Conservative"


@dataclass(frozen=True)
class DriveSpec:
    """Harmonic drive A r(t) sin(omega t) with the ramp r = (1 - cos(pi t / t_r)) / 2."""

    omega: float
    amplitude: float = 1.0
    ramp_periods: float = 3.0
    target: DriveTarget = DriveTarget.BEAM

    def __post_init__(self):
        if not (math.isfinite(self.omega) and self.omega > 0):
            raise InvalidParameterError("drive omega must be positive")
        if not math.isfinite(self.amplitude):
            raise InvalidParameterError("drive amplitude must be finite")
        if not (math.isfinite(self.ramp_periods) and self.ramp_periods >= 0):
            raise InvalidParameterError("ramp_periods must be non-negative")
        object.__setattr__(self, "target", DriveTarget(self.target))

    @property
    def period(self) -> float:
        return 2.0 * math.pi / self.omega

    def signal(self, t: float) -> Tuple[float, float, float]:
        """Drive value and its first two time derivatives at t."""
        if t <= 0.0 or self.amplitude == 0.0:
            return 0.0, 0.0, 0.0
        ramp_time = self.ramp_periods * self.period
        if ramp_time == 0.0 or t >= ramp_time:
            r, r1, r2 = 1.0, 0.0, 0.0
        else:
            a = math.pi / ramp_time
            r = 0.5 * (1.0 - math.cos(a * t))
            r1 = 0.5 * a * math.sin(a * t)
            r2 = 0.5 * a * a * math.cos(a * t)
        w = self.omega
        s, c = math.sin(w * t), math.cos(w * t)
        A = self.amplitude
        return (
            A * r * s,
            A * (r1 * s + r * w * c),
            A * (r2 * s + 2.0 * r1 * w * c - r * w * w * s),
        )


@dataclass(frozen=True)
class SimConfig:
    nz: int
    dz: float
    dt: float
    steps: int
    drive: DriveSpec
    boundary: Boundary = Boundary.DRIVE_ABSORB
    cfl_safety: float = 0.5
    scheme: Optional[Scheme] = None
    snapshot_every: int = 1
    absorb_fraction: float = 0.1
    damping_max: Optional[float] = None
    filter_cutoff: Optional[float] = None
    filter_growth: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "boundary", Boundary(self.boundary))
        if self.scheme is not None:
            object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.nz < MIN_NODES:
            raise InvalidParameterError(f"nz must be at least {MIN_NODES}, got {self.nz}")
        if not (self.dz > 0 and self.dt > 0):
            raise InvalidParameterError("dz and dt must be positive")
        if self.steps < 0:
            raise InvalidParameterError("steps must be non-negative")
        if not 0.0 < self.cfl_safety < 1.0:
            raise InvalidParameterError("cfl_safety must lie in (0, 1)")
        if self.snapshot_every < 1:
            raise InvalidParameterError("snapshot_every must be at least 1")
        if not 0.0 < self.absorb_fraction < 1.0:
            raise InvalidParameterError("absorb_fraction must lie in (0, 1)")
        if self.damping_max is not None and self.damping_max < 0:
            raise InvalidParameterError("damping_max must be non-negative")
        if self.filter_cutoff is not None and not self.filter_cutoff > 0:
            raise InvalidParameterError("filter_cutoff must be positive")
        if not (math.isfinite(self.filter_growth) and self.filter_growth >= 0):
            raise InvalidParameterError("filter_growth must be non-negative")

    @property
    def periodic(self) -> bool:
        return self.boundary is Boundary.PERIODIC

    @property
    def resolved_scheme(self) -> Scheme:
        if self.scheme is not None:
            return self.scheme
        return Scheme.CONSERVATIVE if self.periodic else Scheme.UPWIND

    @property
    def length(self) -> float:
        return self.dz * (self.nz if self.periodic else self.nz - 1)

    @property
    def z(self) -> np.ndarray:
        return np.arange(self.nz) * self.dz

    @property
    def gamma_max(self) -> float:
        if self.damping_max is not None:
            return self.damping_max
        return DEFAULT_DAMPING_RATIO * self.drive.omega

    @property
    def inlet_absorber(self) -> bool:
        """The lines get a layer at z = 0 too when the beam carries the drive."""
        return not self.periodic and self.drive.target is DriveTarget.BEAM

    @property
    def filter_strength(self) -> float:
        """
        Coefficient nu of the rate damping nu H, H = E^T E / dz^(2p).

        nu lambda(k_c)^p = 2 FILTER_MARGIN G k_c, with lambda(k) = (2 sin(k dz / 2) / dz)^2
        the symbol of the second difference. The cutoff is capped at a quarter
        of the grid wavenumber range.
        """
        if self.filter_cutoff is None or self.filter_growth == 0.0:
            return 0.0
        k_c = min(self.filter_cutoff, 0.5 * math.pi / self.dz)
        lam = (2.0 * math.sin(0.5 * k_c * self.dz) / self.dz) ** 2
        return 2.0 * FILTER_MARGIN * self.filter_growth * k_c / lam ** FILTER_ORDER

    def check_cfl(self, max_speed: float) -> None:
        limit = self.cfl_safety * self.dz / max_speed
        if self.dt > limit * (1.0 + 1e-12):
            raise InvalidParameterError(
                f"dt={self.dt:.6g} violates the CFL bound {limit:.6g} "
                f"(cfl_safety={self.cfl_safety}, max speed {max_speed:.6g})"
            )

    @classmethod
    def for_drive(
        cls,
        spec: MtlSpectralData,
        beam: BeamParams,
        omega: float,
        length: float,
        nz: int,
        periods: float,
        boundary: Boundary = Boundary.DRIVE_ABSORB,
        cfl_safety: float = 0.5,
        snapshots_per_period: int = 32,
        amplitude: float = 1.0,
        ramp_periods: float = 3.0,
        target: DriveTarget = DriveTarget.BEAM,
        scheme: Optional[Scheme] = None,
        absorb_fraction: float = 0.1,
        damping_max: Optional[float] = None,
        grid_filter: bool = True,
    ) -> "SimConfig":
        """
        Build a configuration whose time step divides the drive period.

        Args:
            spec: spectral data of the line system
            beam: beam parameters
            omega: drive angular frequency
            length: domain length
            nz: number of grid nodes
            periods: run duration in drive periods
            snapshots_per_period: snapshots kept per drive period
            grid_filter: damp under-resolved wavenumbers on open runs

        Returns:
            SimConfig with dt = period / m, m a multiple of snapshots_per_period
        """
        if not (length > 0 and periods > 0 and snapshots_per_period >= 2):
            raise InvalidParameterError("length, periods and snapshots_per_period must be positive")
        boundary = Boundary(boundary)
        dz = length / nz if boundary is Boundary.PERIODIC else length / (nz - 1)
        drive = DriveSpec(omega=omega, amplitude=amplitude, ramp_periods=ramp_periods, target=target)
        dt_max = cfl_safety * dz / max_speed(spec, beam)
        per_period = math.ceil(drive.period / dt_max)
        per_period = math.ceil(per_period / snapshots_per_period) * snapshots_per_period
        cutoff, growth = None, 0.0
        if grid_filter and boundary is not Boundary.PERIODIC:
            cutoff, growth = grid_filter_parameters(spec, beam, omega)
            if cutoff is not None and cutoff * dz > 0.5 * math.pi:
                logger.warning(
                    f"Grid too coarse for the filter cutoff k={cutoff:.4g} (dz={dz:.4g}); "
                    f"the filter acts from k={0.5 * math.pi / dz:.4g}"
                )
        cfg = cls(
            nz=nz,
            dz=dz,
            dt=drive.period / per_period,
            steps=int(round(periods * per_period)),
            drive=drive,
            boundary=boundary,
            cfl_safety=cfl_safety,
            scheme=scheme,
            snapshot_every=per_period // snapshots_per_period,
            absorb_fraction=absorb_fraction,
            damping_max=damping_max,
            filter_cutoff=cutoff,
            filter_growth=growth,
        )
        logger.debug(f"for_drive: dz={dz:.4g}, dt={cfg.dt:.4g}, {per_period} steps per period")
        return cfg


@dataclass(frozen=True)
class FieldState:
    """Charges Q (n x nz), q (nz) and their time derivatives at time t."""

    Q: np.ndarray
    q: np.ndarray
    Qdot: np.ndarray
    qdot: np.ndarray
    t: float = 0.0

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in (self.Q, self.q, self.Qdot, self.qdot))

    def voltages(self, mtl: MtlParams, dz: float, periodic: bool = False) -> np.ndarray:
        """V = -C^-1 d/dz (Q + B q), shape (n, nz)."""
        total = self.Q + np.outer(mtl.B, self.q)
        return -mtl.C_inv @ _ddz(total, dz, periodic)

    def currents(self) -> np.ndarray:
        return np.array(self.Qdot, copy=True)

    def electric_field(self, mtl: MtlParams, dz: float, periodic: bool = False) -> np.ndarray:
        return -_ddz(self.voltages(mtl, dz, periodic), dz, periodic)


@dataclass
class SimHistory:
    config: SimConfig
    mtl: MtlParams
    beam: BeamParams
    snapshots: List[FieldState] = field(default_factory=list)
    steps_taken: int = 0

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.snapshots])

    @property
    def z(self) -> np.ndarray:
        return self.config.z

    def field_array(self, name: str, line: int = 0) -> np.ndarray:
        """Stack one field over snapshots, shape (n_snapshots, nz)."""
        if name in ("q", "qdot"):
            return np.array([getattr(s, name) for s in self.snapshots])
        if name in ("Q", "Qdot"):
            if not 0 <= line < self.mtl.n:
                raise InvalidParameterError(f"line index {line} out of range for n={self.mtl.n}")
            return np.array([getattr(s, name)[line] for s in self.snapshots])
        raise InvalidParameterError(f"unknown field '{name}'")


@dataclass(frozen=True)
class GrowthFit:
    gain_fit: float
    r_squared: float
    z: np.ndarray
    amplitude: np.ndarray
    period_change: float


@dataclass(frozen=True)
class EnergyAudit:
    max_relative_drift: float
    per_step_residual: np.ndarray
    energies: np.ndarray
    drift_per_period: float


@dataclass(frozen=True)
class FluxBudget:
    flux_change: float
    integrated_power: float
    relative_mismatch: float


def max_speed(spec: MtlSpectralData, beam: BeamParams) -> float:
    spec.require_real_velocities()
    return max(float(np.max(spec.real_velocities)), beam.u0)


def grid_filter_parameters(spec: MtlSpectralData, beam: BeamParams, omega: float) -> Tuple[Optional[float], float]:
    """
    Cutoff wavenumber and growth per unit wavenumber G for the grid-mode filter.

    A real wavenumber k grows in time at k Im v for every root v, so with a
    complex pair present all grid modes grow, the shortest fastest. The cutoff
    sits FILTER_CUTOFF_RATIO times above the largest physical wavenumber
    omega / |v|. Returns (None, 0.0) without a growing pair.
    """
    try:
        solution = solve_dispersion(spec, beam, omega)
    except MtlbError as e:
        logger.warning(f"Grid filter off: no dispersion roots at omega={omega} ({e})")
        return None, 0.0
    if not solution.has_growing_pair:
        return None, 0.0
    roots = solution.expanded_roots()
    growth = float(np.max(np.abs(roots.imag)))
    cutoff = FILTER_CUTOFF_RATIO * omega / float(np.min(np.abs(roots)))
    logger.debug(f"Grid filter: cutoff k={cutoff:.4g}, G={growth:.4g}")
    return cutoff, growth


def _ddz(arr: np.ndarray, dz: float, periodic: bool) -> np.ndarray:
    if periodic:
        return (np.roll(arr, -1, axis=-1) - np.roll(arr, 1, axis=-1)) / (2.0 * dz)
    return np.gradient(arr, dz, axis=-1, edge_order=2)


def _half_node_operator(nz: int, dz: float, periodic: bool, average: bool) -> sparse.csr_matrix:
    """Node-to-half-node difference (or average when ``average``)."""
    h = nz if periodic else nz - 1
    rows = np.arange(h)
    cols = (rows + 1) % nz
    if average:
        data = np.full(2 * h, 0.5)
    else:
        data = np.concatenate([-np.ones(h), np.ones(h)]) / dz
    return sparse.csr_matrix(
        (data, (np.concatenate([rows, rows]), np.concatenate([rows, cols]))), shape=(h, nz)
    )


def _upwind_operator(nz: int, dz: float, periodic: bool) -> sparse.csr_matrix:
    rows = np.arange(nz) if periodic else np.arange(1, nz)
    prev = (rows - 1) % nz
    data = np.concatenate([np.ones(rows.size), -np.ones(rows.size)]) / dz
    return sparse.csr_matrix(
        (data, (np.concatenate([rows, rows]), np.concatenate([rows, prev]))), shape=(nz, nz)
    )


def damping_profile(cfg: SimConfig, lines: bool = False) -> np.ndarray:
    """
    Cubic ramp of the damping rate over the absorbing layer; zero when periodic.

    With ``lines`` the profile also carries the mirrored inlet layer of a
    beam-driven run, which keeps backward line waves from reflecting at z = 0.
    """
    if cfg.periodic:
        return np.zeros(cfg.nz)
    z = cfg.z
    width = cfg.absorb_fraction * cfg.length
    s = np.clip((z - (cfg.length - width)) / width, 0.0, None)
    gamma = cfg.gamma_max * s ** 3
    if lines and cfg.inlet_absorber:
        s_in = np.clip((width - z) / width, 0.0, None)
        gamma = gamma + cfg.gamma_max * s_in ** 3
    return gamma


def difference_filter(nz: int, dz: float, periodic: bool, order: int = FILTER_ORDER) -> sparse.csr_matrix:
    """
    H = E^T E / dz^(2 order), E the order-th forward difference.

    On an open grid E keeps only full stencils, so H is symmetric positive
    semi-definite and vanishes on polynomials of degree < order.
    """
    coeffs = np.array([(-1.0) ** (order - j) * math.comb(order, j) for j in range(order + 1)])
    count = nz if periodic else nz - order
    rows = np.repeat(np.arange(count), order + 1)
    cols = (rows + np.tile(np.arange(order + 1), count)) % nz
    E = sparse.csr_matrix((np.tile(coeffs, count), (rows, cols)), shape=(count, nz))
    return (E.T @ E).tocsr() / dz ** (2 * order)


@dataclass
class _Operators:
    """Descriptor pencil mass * y' = generator * y + forcing on the full state."""

    scheme: Scheme
    n: int
    nz: int
    mass: sparse.csr_matrix
    generator: sparse.csr_matrix
    upwind: Optional[sparse.csr_matrix]
    fixed: np.ndarray
    free: np.ndarray

    @property
    def size(self) -> int:
        return (self.n + 1) * self.nz


def _assemble(mtl: MtlParams, beam: BeamParams, cfg: SimConfig) -> _Operators:
    n, nz = mtl.n, cfg.nz
    N = (n + 1) * nz
    periodic = cfg.periodic
    scheme = cfg.resolved_scheme
    xi, u0 = beam.xi, beam.u0

    delta = _half_node_operator(nz, cfg.dz, periodic, average=False)
    h = delta.shape[0]
    I_nz = sparse.identity(nz, format="csr")
    I_N = sparse.identity(N, format="csr")
    coupling = sparse.hstack([
        sparse.kron(sparse.identity(n), delta),
        sparse.kron(sparse.csr_matrix(mtl.B.reshape(-1, 1)), delta),
    ]).tocsr()
    K_line = (coupling.T @ sparse.kron(sparse.csr_matrix(mtl.C_inv), sparse.identity(h)) @ coupling).tocsr()
    L_nodes = sparse.kron(sparse.csr_matrix(mtl.L), I_nz).tocsr()
    gamma_lines = damping_profile(cfg, lines=True)
    gamma_beam = damping_profile(cfg)

    nu = cfg.filter_strength
    if nu > 0.0:
        H = nu * difference_filter(nz, cfg.dz, periodic)
        grid_damping = sparse.block_diag([sparse.kron(sparse.csr_matrix(mtl.L), H), xi * H]).tocsr()
        logger.debug(f"Grid filter on: nu={nu:.3e}, order {FILTER_ORDER}")
    else:
        grid_damping = sparse.csr_matrix((N, N))

    upwind = None
    if scheme is Scheme.CONSERVATIVE:
        avg = _half_node_operator(nz, cfg.dz, periodic, average=True)
        pick_q = sparse.hstack([sparse.csr_matrix((nz, n * nz)), I_nz]).tocsr()
        avg_q, delta_q = avg @ pick_q, delta @ pick_q
        M = sparse.block_diag([L_nodes, xi * (avg.T @ avg)]).tocsr()
        G0 = xi * u0 * (avg_q.T @ delta_q)
        G = G0 - G0.T
        K = K_line - xi * u0 * u0 * (delta_q.T @ delta_q)
        root = sparse.diags(np.sqrt(np.concatenate([np.tile(gamma_lines, n), gamma_beam])))
        damping = root @ M @ root + grid_damping
        mass = sparse.block_diag([I_N, M])
        generator = sparse.bmat([[None, I_N], [-K, -(G + damping)]])
    else:
        upwind = _upwind_operator(nz, cfg.dz, periodic)
        advect_x = sparse.block_diag([sparse.csr_matrix((n * nz, n * nz)), u0 * upwind])
        damp_lines = L_nodes @ sparse.diags(np.tile(gamma_lines, n))
        advect_w = sparse.block_diag([damp_lines, xi * (u0 * upwind + sparse.diags(gamma_beam))]) + grid_damping
        mass = sparse.block_diag([I_N, sparse.block_diag([L_nodes, xi * I_nz])])
        generator = sparse.bmat([[-advect_x, I_N], [-K_line, -advect_w]])

    fixed = _fixed_indices(n, nz, scheme, periodic)
    free = np.setdiff1d(np.arange(2 * N), fixed)
    return _Operators(scheme=scheme, n=n, nz=nz, mass=mass.tocsr(), generator=generator.tocsr(),
                      upwind=upwind, fixed=fixed, free=free)


def _fixed_indices(n: int, nz: int, scheme: Scheme, periodic: bool) -> np.ndarray:
    if periodic:
        return np.array([], dtype=int)
    N = (n + 1) * nz
    x_fixed = [a * nz + j for a in range(n) for j in (0, nz - 1)]
    x_fixed.append(n * nz)
    if scheme is Scheme.CONSERVATIVE:
        x_fixed.append(n * nz + nz - 1)
    return np.array(x_fixed + [N + i for i in x_fixed], dtype=int)


class _BoundaryDrive:
    """Prescribed values (and time derivatives) of the Dirichlet unknowns."""

    def __init__(self, ops: _Operators, drive: DriveSpec):
        self.drive = drive
        self.size = ops.fixed.size
        position: Dict[int, int] = {int(g): i for i, g in enumerate(ops.fixed)}
        N = ops.size
        if drive.target is DriveTarget.BEAM:
            node = ops.n * ops.nz
            self.value_pos = position.get(node)
            # the upwind form fixes r = 0 at the inflow node instead of the velocity
            self.rate_pos = position.get(N + node) if ops.scheme is Scheme.CONSERVATIVE else None
        else:
            self.value_pos = position.get(0)
            self.rate_pos = position.get(N)

    def values(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        vals = np.zeros(self.size)
        ders = np.zeros(self.size)
        if self.size == 0 or self.value_pos is None:
            return vals, ders
        g, g1, g2 = self.drive.signal(t)
        vals[self.value_pos], ders[self.value_pos] = g, g1
        if self.rate_pos is not None:
            vals[self.rate_pos], ders[self.rate_pos] = g1, g2
        return vals, ders


def _to_state(ops: _Operators, y_free: np.ndarray, boundary: _BoundaryDrive, u0: float, t: float) -> FieldState:
    N = ops.size
    y = np.zeros(2 * N)
    y[ops.free] = y_free
    if ops.fixed.size:
        y[ops.fixed] = boundary.values(t)[0]
    n, nz = ops.n, ops.nz
    x, w = y[:N], y[N:]
    q = x[n * nz:].copy()
    if ops.scheme is Scheme.CONSERVATIVE:
        qdot = w[n * nz:].copy()
    else:
        qdot = w[n * nz:] - u0 * (ops.upwind @ q)
        if ops.fixed.size:
            _, g1, _ = boundary.drive.signal(t)
            qdot[0] = g1 if boundary.drive.target is DriveTarget.BEAM else 0.0
    return FieldState(Q=x[:n * nz].reshape(n, nz).copy(), q=q,
                      Qdot=w[:n * nz].reshape(n, nz).copy(), qdot=qdot, t=t)


def _from_state(ops: _Operators, state: FieldState, u0: float) -> np.ndarray:
    n, nz = ops.n, ops.nz
    shapes = {"Q": (n, nz), "Qdot": (n, nz), "q": (nz,), "qdot": (nz,)}
    for name, shape in shapes.items():
        if np.shape(getattr(state, name)) != shape:
            raise InvalidParameterError(f"initial {name} must have shape {shape}")
    if not state.is_finite():
        raise InvalidParameterError("initial state has non-finite entries")
    q = np.asarray(state.q, dtype=float)
    if ops.scheme is Scheme.CONSERVATIVE:
        rate = np.asarray(state.qdot, dtype=float)
    else:
        rate = state.qdot + u0 * (ops.upwind @ q)
    y = np.concatenate([np.ravel(state.Q), q, np.ravel(state.Qdot), rate])
    return y[ops.free]


def simulate(
    mtl: MtlParams,
    beam: BeamParams,
    cfg: SimConfig,
    initial: Optional[FieldState] = None,
) -> SimHistory:
    """
    Step the semi-discrete field equations with the implicit midpoint rule.

    Args:
        mtl: homogeneous line parameters
        beam: beam parameters
        cfg: grid, step and boundary configuration
        initial: state at t = 0 (zero when omitted)

    Returns:
        SimHistory with a snapshot every ``cfg.snapshot_every`` steps
    """
    spec = spectral_data(mtl)
    cfg.check_cfl(max_speed(spec, beam))
    if cfg.periodic and cfg.resolved_scheme is Scheme.CONSERVATIVE and cfg.nz % 2 == 0:
        raise InvalidParameterError("the periodic conservative scheme needs an odd node count")
    if cfg.periodic and cfg.drive.amplitude != 0.0:
        logger.warning("Periodic boundary: the drive is ignored")

    ops = _assemble(mtl, beam, cfg)
    drive = cfg.drive if not cfg.periodic else DriveSpec(omega=cfg.drive.omega, amplitude=0.0)
    boundary = _BoundaryDrive(ops, drive)
    if initial is None:
        y = np.zeros(ops.free.size)
    else:
        y = _from_state(ops, initial, beam.u0)

    free, fixed = ops.free, ops.fixed
    mass_uu = ops.mass[free][:, free]
    gen_uu = ops.generator[free][:, free]
    if fixed.size:
        mass_ub = ops.mass[free][:, fixed]
        gen_ub = ops.generator[free][:, fixed]
    dt = cfg.dt
    lu = splu((mass_uu - 0.5 * dt * gen_uu).tocsc())
    explicit = (mass_uu + 0.5 * dt * gen_uu).tocsr()

    reference = max(abs(drive.amplitude), float(np.max(np.abs(y))) if y.size else 0.0)
    limit = BLOWUP_FACTOR * reference
    logger.info(
        f"Simulating n={mtl.n}, nz={cfg.nz}, steps={cfg.steps}, "
        f"scheme={ops.scheme.value}, boundary={cfg.boundary.value}"
    )

    history = SimHistory(config=cfg, mtl=mtl, beam=beam)
    history.snapshots.append(_to_state(ops, y, boundary, beam.u0, 0.0))
    for step in range(1, cfg.steps + 1):
        t_mid = (step - 0.5) * dt
        rhs = explicit @ y
        if fixed.size:
            vals, ders = boundary.values(t_mid)
            rhs += dt * (gen_ub @ vals - mass_ub @ ders)
        y = lu.solve(rhs)
        peak = float(np.max(np.abs(y))) if y.size else 0.0
        if not math.isfinite(peak) or (reference > 0.0 and peak > limit):
            raise BlowupError(
                f"field magnitude {peak:.3e} exceeds {BLOWUP_FACTOR:.0e} x reference at step {step}",
                step=step,
            )
        if step % cfg.snapshot_every == 0:
            history.snapshots.append(_to_state(ops, y, boundary, beam.u0, step * dt))
    history.steps_taken = cfg.steps
    logger.info(f"Simulation finished: {len(history.snapshots)} snapshots, t={cfg.steps * dt:.6g}")
    return history


def total_energy(
    state: FieldState,
    mtl: MtlParams,
    beam: BeamParams,
    dz: float,
    periodic: bool = True,
) -> float:
    """Discrete integral of the (indefinite) energy density, conserved by the conservative scheme."""
    def diff(a: np.ndarray) -> np.ndarray:
        ahead = np.roll(a, -1, axis=-1) if periodic else a[..., 1:]
        return (ahead - (a if periodic else a[..., :-1])) / dz

    def avg(a: np.ndarray) -> np.ndarray:
        ahead = np.roll(a, -1, axis=-1) if periodic else a[..., 1:]
        return 0.5 * (ahead + (a if periodic else a[..., :-1]))

    strain = diff(state.Q) + np.outer(mtl.B, diff(state.q))
    line_potential = 0.5 * np.einsum("aj,ab,bj->", strain, mtl.C_inv, strain)
    line_kinetic = 0.5 * np.einsum("aj,ab,bj->", state.Qdot, mtl.L, state.Qdot)
    beam_kinetic = 0.5 * beam.xi * float(np.sum(avg(state.qdot) ** 2))
    beam_potential = -0.5 * beam.xi * beam.u0 ** 2 * float(np.sum(diff(state.q) ** 2))
    return float(dz * (line_potential + line_kinetic + beam_kinetic + beam_potential))


def energy_audit(history: SimHistory, mtl: MtlParams, beam: BeamParams) -> EnergyAudit:
    """
    Track the discrete total energy of a closed (periodic) run.

    The energy is indefinite, so drift is measured against the largest |E|
    seen over the run.
    """
    cfg = history.config
    if not cfg.periodic:
        raise InvalidParameterError("energy audit needs a periodic (closed) run")
    energies = np.array([total_energy(s, mtl, beam, cfg.dz, periodic=True) for s in history.snapshots])
    scale = float(np.max(np.abs(energies))) if energies.size else 0.0
    if scale == 0.0:
        return EnergyAudit(max_relative_drift=0.0, per_step_residual=np.zeros(max(energies.size - 1, 0)),
                           energies=energies, drift_per_period=0.0)
    drift = float(np.max(np.abs(energies - energies[0])) / scale)
    periods = max(cfg.steps * cfg.dt / cfg.drive.period, 1.0)
    audit = EnergyAudit(
        max_relative_drift=drift,
        per_step_residual=np.diff(energies) / scale,
        energies=energies,
        drift_per_period=drift / periods,
    )
    logger.info(f"Energy audit: max relative drift {drift:.3e} over {periods:.3g} periods")
    return audit


def _samples_per_period(history: SimHistory, omega: float) -> int:
    cfg = history.config
    spacing = cfg.dt * cfg.snapshot_every
    exact = 2.0 * math.pi / omega / spacing
    count = int(round(exact))
    if count < 2 or abs(count - exact) > 1e-6 * exact:
        raise InvalidParameterError(
            f"snapshot spacing {spacing:.6g} does not divide the period of omega={omega}"
        )
    if len(history.snapshots) < 2 * count:
        raise InvalidParameterError(
            f"need two full periods of snapshots ({2 * count}), have {len(history.snapshots)}"
        )
    return count


def _fourier_amplitude(data: np.ndarray, times: np.ndarray, omega: float) -> np.ndarray:
    phase = np.exp(1j * omega * times)
    return 2.0 / times.size * (phase @ data)


def measure_growth(
    history: SimHistory,
    omega: float,
    fit_window: Tuple[float, float],
    field_name: str = "q",
    line: int = 0,
) -> GrowthFit:
    """
    Fit the spatial growth rate of the steady response at omega.

    Args:
        history: run with snapshot spacing dividing the drive period
        omega: analysis frequency
        fit_window: (z1, z2) range for the log-linear fit
        field_name: "q" or "Q"
        line: line index when field_name is "Q"

    Returns:
        GrowthFit; gain_fit is d log|a| / dz, comparable with -Im k0
    """
    z1, z2 = fit_window
    if not z1 < z2:
        raise InvalidParameterError("fit window must satisfy z1 < z2")
    count = _samples_per_period(history, omega)
    data = history.field_array(field_name, line)
    times = history.times
    last = _fourier_amplitude(data[-count:], times[-count:], omega)
    previous = _fourier_amplitude(data[-2 * count:-count], times[-2 * count:-count], omega)

    z = history.z
    mask = (z >= z1) & (z <= z2)
    if np.count_nonzero(mask) < 3:
        raise InvalidParameterError("fit window holds fewer than 3 grid nodes")
    amplitude = last[mask]
    scale = float(np.max(np.abs(amplitude)))
    if scale == 0.0 or np.any(amplitude == 0):
        raise InvalidParameterError("zero response amplitude in the fit window")
    change = float(np.max(np.abs(last[mask] - previous[mask])) / scale)
    if change > CONVERGENCE_TOL:
        raise NotConvergedError(
            f"amplitude changed by {change:.1%} between the last two periods"
        )

    log_amp = np.log(np.abs(amplitude))
    slope, intercept = np.polyfit(z[mask], log_amp, 1)
    residual = log_amp - (slope * z[mask] + intercept)
    total = float(np.sum((log_amp - log_amp.mean()) ** 2))
    r_squared = 1.0 if total == 0.0 else 1.0 - float(np.sum(residual ** 2)) / total
    logger.info(f"Growth fit on [{z1}, {z2}]: gain={slope:.6g}, r^2={r_squared:.4f}")
    return GrowthFit(gain_fit=float(slope), r_squared=r_squared, z=z[mask],
                     amplitude=amplitude, period_change=change)


def flux_budget(history: SimHistory, omega: float, z1: float, z2: float) -> FluxBudget:
    """
    Compare the change of the averaged line flux <I.V> between two stations with
    the integrated averaged beam-to-line power -<B^T V d/dz dq/dt>.
    """
    if not z1 < z2:
        raise InvalidParameterError("stations must satisfy z1 < z2")
    count = _samples_per_period(history, omega)
    cfg, mtl = history.config, history.mtl
    flux = np.zeros(cfg.nz)
    power = np.zeros(cfg.nz)
    for state in history.snapshots[-count:]:
        V = state.voltages(mtl, cfg.dz, cfg.periodic)
        flux += np.sum(state.Qdot * V, axis=0)
        power -= (mtl.B @ V) * _ddz(state.qdot, cfg.dz, cfg.periodic)
    flux /= count
    power /= count
    z = cfg.z
    j1, j2 = int(np.argmin(np.abs(z - z1))), int(np.argmin(np.abs(z - z2)))
    if j2 - j1 < 2:
        raise InvalidParameterError("station interval holds fewer than 3 grid nodes")
    change = float(flux[j2] - flux[j1])
    integrated = float(trapezoid(power[j1:j2 + 1], z[j1:j2 + 1]))
    scale = max(abs(change), abs(integrated))
    mismatch = 0.0 if scale == 0.0 else abs(change - integrated) / scale
    return FluxBudget(flux_change=change, integrated_power=integrated, relative_mismatch=mismatch)


def pulse_state(
    cfg: SimConfig,
    n: int,
    center: float,
    width: float,
    line: Optional[int] = None,
    speed: float = 0.0,
) -> FieldState:
    """Gaussian in one field, translating at ``speed``; the beam field when line is None."""
    z = cfg.z
    offset = z - center
    if cfg.periodic:
        offset = (offset + 0.5 * cfg.length) % cfg.length - 0.5 * cfg.length
    profile = np.exp(-(offset / width) ** 2)
    rate = speed * 2.0 * offset / (width * width) * profile
    Q = np.zeros((n, cfg.nz))
    Qdot = np.zeros((n, cfg.nz))
    q = np.zeros(cfg.nz)
    qdot = np.zeros(cfg.nz)
    if line is None:
        q, qdot = profile, rate
    else:
        Q[line], Qdot[line] = profile, rate
    return FieldState(Q=Q, q=q, Qdot=Qdot, qdot=qdot)


def smooth_random_state(cfg: SimConfig, n: int, rng: np.random.Generator, modes: int = 3) -> FieldState:
    """Random low-wavenumber Fourier data on a periodic grid."""
    if not cfg.periodic:
        raise InvalidParameterError("smooth random data is defined on a periodic grid")
    phase = 2.0 * np.pi * np.outer(np.arange(1, modes + 1), cfg.z) / cfg.length

    def sample(rows: int) -> np.ndarray:
        a = rng.standard_normal((rows, modes))
        b = rng.standard_normal((rows, modes))
        return a @ np.cos(phase) + b @ np.sin(phase)

    return FieldState(Q=sample(n), q=sample(1)[0], Qdot=sample(n), qdot=sample(1)[0])


def eigenmode_state(mode: Eigenmode, cfg: SimConfig, amplitude: float = 1.0, t: float = 0.0) -> FieldState:
    """Real fields of an eigenmode on the grid; periodic grids need a commensurate real k."""
    if cfg.periodic:
        k = mode.k
        if abs(k.imag) > 1e-12 * max(abs(k), 1.0):
            raise InvalidParameterError("a periodic grid only carries real wavenumbers")
        turns = k.real * cfg.length / (2.0 * math.pi)
        if abs(turns - round(turns)) > 1e-6:
            raise InvalidParameterError(f"k={k.real:.6g} is not commensurate with the periodic length")
    phase = amplitude * np.exp(1j * (mode.k * cfg.z - mode.omega * t))
    Q = np.outer(mode.Q_hat, phase)
    q = mode.q_hat * phase
    w = -1j * mode.omega
    return FieldState(Q=Q.real, q=q.real, Qdot=(w * Q).real, qdot=(w * q).real, t=t)


def write_snapshots(history: SimHistory, directory: str, every: int = 1) -> List[str]:
    """Write one CSV frame per kept snapshot; returns the paths."""
    if every < 1:
        raise InvalidParameterError("every must be at least 1")
    cfg, mtl = history.config, history.mtl
    paths: List[str] = []
    try:
        os.makedirs(directory, exist_ok=True)
        for index, state in enumerate(history.snapshots[::every]):
            frame = {"t": np.full(cfg.nz, state.t), "z": cfg.z, "q": state.q, "qdot": state.qdot}
            V = state.voltages(mtl, cfg.dz, cfg.periodic)
            for a in range(mtl.n):
                frame[f"Q{a}"] = state.Q[a]
                frame[f"I{a}"] = state.Qdot[a]
                frame[f"V{a}"] = V[a]
            path = os.path.join(directory, f"snapshot_{index:05d}.csv")
            pd.DataFrame(frame).to_csv(path, index=False, float_format="%.17g")
            paths.append(path)
    except OSError as e:
        raise ReportIoError(f"cannot write snapshots to {directory}: {e}") from e
    logger.info(f"Wrote {len(paths)} snapshot frames to {directory}")
    return paths


def history_table(history: SimHistory, stations: Sequence[float]) -> pd.DataFrame:
    """Time series of q and line-0 charge at the nodes nearest to ``stations``."""
    z = history.z
    columns = {"t": history.times}
    q = history.field_array("q")
    Q = history.field_array("Q", 0)
    for s in stations:
        j = int(np.argmin(np.abs(z - s)))
        columns[f"q@{z[j]:.6g}"] = q[:, j]
        columns[f"Q0@{z[j]:.6g}"] = Q[:, j]
    return pd.DataFrame(columns)
