"""Command orchestration: load a system, compute, and write reports and tables."""
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from config import Config
from schemas import (
    EnergySummary,
    FrequencyReport,
    GrowingSummary,
    LoadedSystem,
    Report,
    RootEntry,
    SpectralSummary,
    ThresholdSummary,
    VietaSummary,
    complex_pair,
)
from tools.core_linalg import MtlSpectralData, spectral_data
from tools.dispersion import (
    gain_sweep,
    loglog_slope,
    sample_characteristic_function,
    solve_dispersion,
    vieta_residuals,
    xi_threshold,
)
from tools.dw_hamiltonian import assemble_blocks, dw_system, mode_state, profile_from_samples, z_propagate
from tools.eigenmodes_energy import eigenmode_solve, energy_report
from tools.errors import (
    InvalidParameterError,
    MtlbError,
    NonGrowingInputError,
    NotConvergedError,
)
from tools.pierce_reduction import (
    compare_cubic_vs_exact,
    pierce_cubic,
    reduce_equivalent_line,
    verify_reduction,
)
from tools.report_writer import write_csv, write_report
from tools.timedomain_sim import (
    Boundary,
    DriveTarget,
    SimConfig,
    energy_audit,
    flux_budget,
    measure_growth,
    simulate,
    write_snapshots,
)

logger = logging.getLogger(__name__)

COMMANDS = ("analyze", "sweep", "pierce", "reduce", "simulate", "propagate")
CHARACTERISTIC_SAMPLES = 2001
PIERCE_DECADES = 7
PROPAGATION_TOL = 1e-7
SLOPE_MIN_DECADES = 3.0


def _unique(messages: List[str]) -> List[str]:
    seen = set()
    out = []
    for m in messages:
        if m not in seen:
            seen.add(m)
            out.append(m)
    return out


class MtlbRunner:
    """Runs one command against a loaded system and writes its outputs."""

    def __init__(
        self,
        system: LoadedSystem,
        output_dir: Optional[str] = None,
        tol: Optional[float] = None,
        threads: Optional[int] = None,
    ):
        self.system = system
        self.output_dir = output_dir or Config.OUTPUT_DIR
        self.tol = Config.ROOT_TOL if tol is None else tol
        self.threads = Config.THREADS if threads is None else threads
        if not self.tol > 0:
            raise InvalidParameterError("tolerance must be positive")
        if self.threads < 1:
            raise InvalidParameterError("thread count must be positive")
        self.spec: MtlSpectralData = spectral_data(system.mtl)
        self.warnings: List[str] = list(self.spec.warnings)

    @property
    def mtl(self):
        return self.system.mtl

    @property
    def beam(self):
        return self.system.beam

    @property
    def omega(self) -> float:
        return self.system.omegas[0]

    def _path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def _warn(self, message: str) -> None:
        logger.warning(message)
        self.warnings.append(message)

    def run(self, command: str, **options: Any) -> List[str]:
        """
        Execute one command.

        Args:
            command: one of analyze, sweep, pierce, reduce, simulate, propagate
            options: command-specific options (sweep range)

        Returns:
            Paths of the files written
        """
        if command not in COMMANDS:
            raise InvalidParameterError(f"unknown command: {command}")
        logger.info(f"Running {command} (output: {self.output_dir})")
        return getattr(self, command)(**options)

    # Report pieces

    def spectral_summary(self) -> SpectralSummary:
        spec = self.spec
        return SpectralSummary(
            lambdas=[float(x) for x in spec.lambdas],
            velocities=[complex_pair(v) for v in spec.velocities],
            D=[float(x) for x in spec.D],
            d=float(spec.d),
            weights=[float(c.weight) for c in spec.clusters],
        )

    def threshold_summary(self) -> Optional[ThresholdSummary]:
        try:
            threshold = xi_threshold(self.spec, self.beam.u0)
        except MtlbError as e:
            self._warn(f"xi threshold unavailable: {e}")
            return None
        xi0 = None if threshold.unconditional else float(threshold.xi0)
        return ThresholdSummary(xi0=xi0, method=threshold.method.value)

    def frequency_report(self, omega: float) -> FrequencyReport:
        """Roots, growing pair, Vieta checks and energy summary at one frequency."""
        spec, beam = self.spec, self.beam
        solution = solve_dispersion(spec, beam, omega, residual_tol=self.tol)
        warnings = list(solution.warnings)
        vieta = vieta_residuals(solution, beam, spec)
        if not vieta.within(self.tol):
            warnings.append(
                f"Vieta residuals above tolerance: sum {vieta.sum_residual:.3e}, "
                f"product {vieta.product_residual:.3e}"
            )

        growing = energy = None
        if solution.has_growing_pair:
            growing = GrowingSummary(v0=complex_pair(solution.v0), k0=complex_pair(solution.k0),
                                     gain=float(solution.gain))
            try:
                mode = eigenmode_solve(spec, beam, omega, solution.v0)
                er = energy_report(mode, spec, beam)
                energy = EnergySummary(
                    avg_flux=float(er.avg_flux_total[0]),
                    power_beam_to_mtl_at_0=float(er.avg_power_beam_to_mtl[0]),
                    positivity=er.positivity,
                    poincare=complex_pair(er.poincare),
                    flux_variation=er.flux_variation,
                    poincare_mismatch=er.poincare_mismatch,
                )
            except (MtlbError, ValidationError) as e:
                # non-finite metrics fail EnergySummary validation
                warnings.append(f"energy summary unavailable: {type(e).__name__}: {e}")

        return FrequencyReport(
            omega=float(omega),
            roots=[RootEntry(re=r.value.real, im=r.value.imag, multiplicity=r.multiplicity,
                             kind=r.kind.value) for r in solution.roots],
            n_real_roots=solution.n_real_roots,
            intersection_roots=[float(x) for x in solution.intersection_roots()],
            growing=growing,
            vieta=VietaSummary(
                sum_residual=vieta.sum_residual,
                product_residual=vieta.product_residual,
                sum_scale=vieta.sum_scale,
                product_scale=vieta.product_scale,
            ),
            energy=energy,
            warnings=_unique(warnings),
        )

    def build_report(
        self,
        command: str,
        frequencies: Optional[List[FrequencyReport]] = None,
        results: Optional[Dict[str, Any]] = None,
    ) -> Report:
        frequencies = frequencies or []
        threshold = self.threshold_summary() if not self.mtl.is_permissive else None
        warnings = list(self.warnings)
        for fr in frequencies:
            warnings.extend(f"omega={fr.omega:g}: {w}" for w in fr.warnings if w not in self.spec.warnings)
        return Report(
            command=command,
            inputs=self.system.config.model_dump(mode="json", exclude_none=True),
            spectral=self.spectral_summary(),
            threshold=threshold,
            frequencies=frequencies,
            results=results or {},
            warnings=_unique(warnings),
        )

    def _write(self, report: Report) -> str:
        return write_report(report.to_json_dict(), self._path(f"{report.command}_report.json"))

    # Commands

    def analyze(self) -> List[str]:
        """Full report for every frequency plus R(v) samples for plotting."""
        with ThreadPoolExecutor(max_workers=min(self.threads, len(self.system.omegas))) as pool:
            frequencies = list(pool.map(self.frequency_report, self.system.omegas))
        report = self.build_report("analyze", frequencies)

        poles = self.spec.real_velocities
        span = 2.0 * max(float(poles.max()) if poles.size else 0.0, self.beam.u0, 1e-12)
        grid = np.linspace(-span, span, CHARACTERISTIC_SAMPLES)
        table = sample_characteristic_function(self.spec, grid, self.beam)
        return [self._write(report), write_csv(table, self._path("characteristic_function.csv"))]

    def sweep(
        self,
        param: str = "xi",
        start: float = 1e-6,
        stop: float = 1e-3,
        points: int = 31,
        log: bool = False,
    ) -> List[str]:
        """
        Gain over a range of xi, u0 or omega.

        A log-spaced xi sweep spanning at least three decades also gets the
        fitted log-log exponent as a CSV footer.
        """
        if points < 0:
            raise InvalidParameterError("points must be non-negative")
        if log:
            if not (start > 0 and stop > 0):
                raise InvalidParameterError("a log sweep needs positive bounds")
            values = np.logspace(math.log10(start), math.log10(stop), points)
        else:
            values = np.linspace(start, stop, points)
        frame = gain_sweep(self.spec, self.beam, self.omega, param, values, threads=self.threads)
        for w in frame.attrs.get("warnings", []):
            self._warn(w)

        footer = None
        results: Dict[str, Any] = {"param": param, "points": int(points), "log": bool(log)}
        decades = abs(math.log10(stop / start)) if log else 0.0
        if param == "xi" and log and decades >= SLOPE_MIN_DECADES:
            try:
                slope = loglog_slope(frame["xi"], frame["gain"])
                footer = {"loglog_slope": slope}
                results["loglog_slope"] = slope
            except InvalidParameterError as e:
                self._warn(f"no exponent fitted: {e}")
        table_path = write_csv(frame, self._path("sweep.csv"), footer=footer)
        return [table_path, self._write(self.build_report("sweep", results=results))]

    def pierce(self) -> List[str]:
        """Cubic-versus-quartic comparison of the single-line limit at synchronism."""
        mtl, beam = self.mtl, self.beam
        if mtl.n != 1:
            raise InvalidParameterError("pierce requires n=1")
        b = float(mtl.B[0])
        if b == 0.0:
            raise InvalidParameterError("pierce requires a coupled beam (B != 0)")
        # unit-weight equivalent line
        L = float(mtl.L[0, 0]) * b * b
        C = float(mtl.C[0, 0]) / (b * b)
        v1 = 1.0 / math.sqrt(L * C)
        if abs(beam.u0 - v1) > 1e-12 * v1:
            self._warn(f"pierce comparison uses the synchronous u0=v1={v1:.12g}, not u0={beam.u0:.12g}")
        omega = self.omega
        xi_list = beam.xi * np.logspace(0, PIERCE_DECADES - 1, PIERCE_DECADES)
        table = compare_cubic_vs_exact(L, C, xi_list, omega, u0=v1)
        if table["ambiguous"].any():
            self._warn(f"{int(table['ambiguous'].sum())} xi values have ambiguous root pairings")

        approx = pierce_cubic(L, beam.xi, omega / v1, u0=v1, sigma=beam.sigma)
        results = {
            "k_b": approx.k_b,
            "c": approx.c,
            "smallness": approx.smallness,
            "k_approx": [complex_pair(k) for k in approx.k_approx],
            "increasing": complex_pair(approx.increasing),
            "k_p": approx.k_p,
        }
        return [write_csv(table, self._path("pierce.csv")),
                self._write(self.build_report("pierce", results=results))]

    def reduce(self) -> List[str]:
        """Equivalent single line and its growing root against the full system."""
        reduced = reduce_equivalent_line(self.mtl)
        checks = []
        for omega in self.system.omegas:
            try:
                check = verify_reduction(self.mtl, self.beam, omega)
            except NonGrowingInputError as e:
                self._warn(f"omega={omega:g}: reduction not checked: {e}")
                continue
            checks.append({
                "omega": float(omega),
                "v0_full": complex_pair(check.v0_full),
                "v0_reduced": complex_pair(check.v0_reduced),
                "difference": check.difference,
            })
        results = {"L_tilde": reduced.L_tilde, "C_tilde": reduced.C_tilde, "v1": reduced.v1,
                   "checks": checks}
        return [self._write(self.build_report("reduce", results=results))]

    def simulate(self) -> List[str]:
        """Driven (or closed) time-domain run with growth fit, flux budget and energy audit."""
        section = self.system.config.simulation
        if section is None:
            raise InvalidParameterError("simulate needs a 'simulation' section in the input")
        mtl, beam, omega = self.mtl, self.beam, self.omega
        cfg = SimConfig.for_drive(
            self.spec, beam, omega,
            length=section.length,
            nz=section.nz,
            periods=section.periods,
            boundary=section.boundary,
            snapshots_per_period=section.snapshots_per_period,
            amplitude=section.amplitude,
            ramp_periods=section.ramp_periods,
            target=section.target,
            scheme=section.scheme,
            absorb_fraction=section.absorb_fraction,
        )
        history = simulate(mtl, beam, cfg)
        results: Dict[str, Any] = {
            "dt": cfg.dt, "dz": cfg.dz, "steps": cfg.steps, "scheme": cfg.resolved_scheme.value,
            "grid_filter": {"cutoff": cfg.filter_cutoff, "strength": cfg.filter_strength},
        }
        paths: List[str] = []

        if cfg.boundary is Boundary.PERIODIC:
            audit = energy_audit(history, mtl, beam)
            results["energy"] = {"max_relative_drift": audit.max_relative_drift,
                                 "drift_per_period": audit.drift_per_period}
        else:
            length = cfg.length
            start = cfg.absorb_fraction + 0.2 if cfg.inlet_absorber else 0.2
            window = section.fit_window or (start * length, (0.9 - cfg.absorb_fraction) * length)
            field_name = "q" if cfg.drive.target is DriveTarget.BEAM else "Q"
            try:
                fit = measure_growth(history, omega, window, field_name=field_name)
                solution = solve_dispersion(self.spec, beam, omega, residual_tol=self.tol)
                exact = solution.gain if solution.gain is not None else 0.0
                results["growth"] = {
                    "gain_fit": fit.gain_fit,
                    "gain_exact": exact,
                    "relative_error": abs(fit.gain_fit - exact) / exact if exact else None,
                    "r_squared": fit.r_squared,
                    "period_change": fit.period_change,
                    "window": [float(window[0]), float(window[1])],
                }
                profile = pd.DataFrame({"z": fit.z, "amplitude": np.abs(fit.amplitude)})
                paths.append(write_csv(profile, self._path("growth_profile.csv")))
            except NotConvergedError as e:
                self._warn(f"NotConverged: {e}")
            try:
                budget = flux_budget(history, omega, *window)
                results["flux_budget"] = {"flux_change": budget.flux_change,
                                          "integrated_power": budget.integrated_power,
                                          "relative_mismatch": budget.relative_mismatch}
            except MtlbError as e:
                self._warn(f"flux budget unavailable: {e}")

        paths.extend(write_snapshots(history, self._path("snapshots"), every=section.snapshots_per_period))
        paths.append(self._write(self.build_report("simulate", results=results)))
        return paths

    def propagate(self) -> List[str]:
        """z-propagation of a supplied state, or of the growing eigenmode, with invariant drift."""
        section = self.system.config.propagation
        if section is None:
            raise InvalidParameterError("propagate needs a 'propagation' section in the input")
        mtl, beam, omega = self.mtl, self.beam, self.omega
        blocks = assemble_blocks(mtl, beam)
        dw = dw_system(blocks)

        k0 = None
        if section.V0 is not None:
            V0 = np.array([complex(re, im) for re, im in section.V0])
        else:
            solution = solve_dispersion(self.spec, beam, omega, residual_tol=self.tol)
            if not solution.has_growing_pair:
                raise NonGrowingInputError("no growing eigenmode to propagate; supply V0")
            mode = eigenmode_solve(self.spec, beam, omega, solution.v0)
            V0, k0 = mode_state(mode, blocks), mode.k

        profile_section = self.system.config.profile
        if profile_section is not None:
            samples = [(s.z, s.L, s.C) for s in profile_section.samples]
            profile = profile_from_samples(samples, profile_section.period, beam,
                                           B=mtl.B, strictness=mtl.strictness)
        else:
            profile = dw
        trajectory = z_propagate(profile, omega, V0, (0.0, section.z_end), section.steps,
                                 tol=PROPAGATION_TOL)

        results: Dict[str, Any] = {
            "max_drift": trajectory.max_drift,
            "halvings": trajectory.halvings,
            "final_norm": float(np.linalg.norm(trajectory.V[-1])),
            "eigenmode_mismatch": None,
        }
        if k0 is not None and profile_section is None:
            expected = np.exp(1j * k0 * trajectory.z)[:, None] * V0[None, :]
            scale = float(np.max(np.abs(expected)))
            results["eigenmode_mismatch"] = float(np.max(np.abs(trajectory.V - expected))) / scale

        table = pd.DataFrame({
            "z": trajectory.z,
            "norm": np.linalg.norm(trajectory.V, axis=1),
            "invariant_re": trajectory.invariant.real,
            "invariant_im": trajectory.invariant.imag,
        })
        return [write_csv(table, self._path("trajectory.csv")),
                self._write(self.build_report("propagate", results=results))]
