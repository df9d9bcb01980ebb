"""Single-line Pierce limit and the reduction of identical-line systems to one equivalent line."""
import itertools
import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from tools.core_linalg import BeamParams, MtlParams, spectral_data, validate_mtl
from tools.dispersion import loglog_slope, solve_dispersion
from tools.errors import (
    InvalidParameterError,
    MatchingAmbiguousError,
    NonGrowingInputError,
    NotReducibleError,
)

logger = logging.getLogger(__name__)

REDUCTION_TOL = 1e-10
SYNCHRONISM_TOL = 1e-12
AMBIGUITY_RATIO = 2.0
INCREASING_WAVE = 1


@dataclass(frozen=True)
class PierceApprox:
    """
    Near-synchronous roots k = k_b + i delta of the cubic delta^3 = -i c^3.

    deltas are ordered (unattenuated, increasing, decreasing): c i,
    c(-sqrt3 - i)/2 and c(sqrt3 - i)/2.
    """

    k_b: float
    c: float
    deltas: np.ndarray
    k_p: Optional[float] = None
    exact_roots_k: Optional[np.ndarray] = None

    @property
    def k_approx(self) -> np.ndarray:
        return self.k_b + 1j * self.deltas

    @property
    def smallness(self) -> float:
        """|i delta / k_b|, the term dropped from the quartic."""
        return self.c / self.k_b

    @property
    def increasing(self) -> complex:
        return complex(self.k_approx[INCREASING_WAVE])


@dataclass(frozen=True)
class ReducedLine:
    L_tilde: float
    C_tilde: float
    v1: float


@dataclass(frozen=True)
class ReductionCheck:
    v0_full: complex
    v0_reduced: complex
    difference: float


@dataclass(frozen=True)
class GainScaling:
    table: pd.DataFrame
    slope: float


def _require_positive(**values: float) -> None:
    for name, value in values.items():
        if not (math.isfinite(value) and value > 0):
            raise InvalidParameterError(f"{name} must be positive, got {value}")


def pierce_quartic(L: float, C: float, u0: float, xi: float, omega: float) -> np.ndarray:
    """
    Coefficients of the single-line dispersion relation in k, highest power first.

    Args:
        L: inductance per unit length
        C: capacitance per unit length
        u0: beam velocity
        xi: beam coupling constant
        omega: angular frequency (zero allowed)

    Returns:
        (u0^2, -2 u0 w, [1 + L/xi - LC u0^2] w^2, 2 LC u0 w^3, -LC w^4)
    """
    _require_positive(L=L, C=C, u0=u0, xi=xi)
    if not (math.isfinite(omega) and omega >= 0):
        raise InvalidParameterError(f"omega must be non-negative, got {omega}")
    w = omega
    return np.array([
        u0 * u0,
        -2.0 * u0 * w,
        (1.0 + L / xi - L * C * u0 * u0) * w * w,
        2.0 * L * C * u0 * w ** 3,
        -L * C * w ** 4,
    ])


def pierce_cubic(
    L: float,
    xi: float,
    k_b: float,
    u0: Optional[float] = None,
    sigma: Optional[float] = None,
) -> PierceApprox:
    """
    Roots of the cubic obtained by dropping i delta / k_b at synchronism.

    c^3 = L k_b^3 / (2 xi); this equals the familiar L k_b^2 / (2 xi) in units
    where k_b = 1. k_p = sqrt(4 pi / (sigma xi)) / u0 is attached when both u0
    and sigma are given.
    """
    _require_positive(L=L, xi=xi, k_b=k_b)
    c = (L * k_b ** 3 / (2.0 * xi)) ** (1.0 / 3.0)
    s3 = math.sqrt(3.0)
    deltas = np.array([c * 1j, c * (-s3 - 1j) / 2.0, c * (s3 - 1j) / 2.0])
    k_p = None
    if u0 is not None and sigma is not None:
        _require_positive(u0=u0, sigma=sigma)
        k_p = math.sqrt(4.0 * math.pi / (sigma * xi)) / u0
    return PierceApprox(k_b=k_b, c=c, deltas=deltas, k_p=k_p)


def match_pierce_roots(approx: PierceApprox, exact_k: Sequence[complex]) -> np.ndarray:
    """
    Pair each cubic root with its nearest exact root.

    A pairing is rejected when the second-nearest exact root lies within
    twice the nearest distance, or when two cubic roots claim the same one.

    Returns:
        exact roots in the order of ``approx.deltas``
    """
    exact = np.asarray(exact_k, dtype=complex)
    if exact.size < 3:
        raise InvalidParameterError("need at least three exact roots to match")
    chosen: List[int] = []
    for k in approx.k_approx:
        dist = np.abs(exact - k)
        order = np.argsort(dist)
        nearest, second = dist[order[0]], dist[order[1]]
        if second < AMBIGUITY_RATIO * nearest:
            raise MatchingAmbiguousError(
                f"root near {k:.6g} is ambiguous: distances {nearest:.3e} and {second:.3e}"
            )
        chosen.append(int(order[0]))
    if len(set(chosen)) != len(chosen):
        raise MatchingAmbiguousError("two cubic roots matched the same exact root")
    return exact[chosen]


def _best_assignment(approx: PierceApprox, forward: np.ndarray) -> np.ndarray:
    best, best_err = None, math.inf
    for perm in itertools.permutations(range(forward.size), 3):
        candidate = forward[list(perm)]
        err = float(np.max(np.abs(candidate - approx.k_approx)))
        if err < best_err:
            best, best_err = candidate, err
    return best


def compare_cubic_vs_exact(
    L: float,
    C: float,
    xi_list: Sequence[float],
    omega: float,
    u0: Optional[float] = None,
) -> pd.DataFrame:
    """
    Compare cubic and quartic roots at synchronism u0 = 1/sqrt(LC) for each xi.

    Args:
        L: inductance per unit length
        C: capacitance per unit length
        xi_list: beam coupling constants
        omega: angular frequency
        u0: beam velocity; must equal the line velocity

    Returns:
        DataFrame with columns xi, c, smallness, max_mismatch, max_mismatch_rel,
        backward_v, backward_offset, velocity_sum_residual, ambiguous
    """
    _require_positive(L=L, C=C, omega=omega)
    v1 = 1.0 / math.sqrt(L * C)
    if u0 is None:
        u0 = v1
    if abs(u0 - v1) > SYNCHRONISM_TOL * v1:
        raise InvalidParameterError(f"u0={u0} must equal the line velocity {v1} for the cubic limit")
    k_b = omega / u0

    rows = []
    for xi in xi_list:
        roots = np.roots(pierce_quartic(L, C, u0, xi, omega))
        back = int(np.argmin(roots.real))
        forward = np.delete(roots, back)
        approx = replace(pierce_cubic(L, xi, k_b), exact_roots_k=roots)
        try:
            matched = match_pierce_roots(approx, forward)
            ambiguous = False
        except MatchingAmbiguousError:
            matched = _best_assignment(approx, forward)
            ambiguous = True
            logger.debug(f"xi={xi}: cubic/quartic pairing is ambiguous")
        mismatch = float(np.max(np.abs(matched - approx.k_approx)))
        velocities = omega / roots
        v_back = complex(velocities[back]).real
        rows.append({
            "xi": float(xi),
            "c": approx.c,
            "smallness": approx.smallness,
            "max_mismatch": mismatch,
            "max_mismatch_rel": mismatch / k_b,
            "backward_v": v_back,
            "backward_offset": abs(v_back + u0) / u0,
            "velocity_sum_residual": abs(complex(np.sum(velocities)) - 2.0 * u0) / u0,
            "ambiguous": ambiguous,
        })
    table = pd.DataFrame(rows)
    logger.info(f"Compared cubic and quartic roots for {len(rows)} values of xi")
    return table


def reduce_equivalent_line(mtl: MtlParams) -> ReducedLine:
    """
    Collapse a system with LC = Id / v1^2 to one line with the same growing root.

    The reduced line has C~^-1 = B^T C^-1 B and L~ = C~^-1 / v1^2, coupled
    with unit weight.
    """
    if mtl.is_permissive:
        raise InvalidParameterError("reduction requires strict-mode line parameters")
    spec = spectral_data(mtl)
    v1 = spec.v1
    LC = mtl.L @ mtl.C
    gap = float(np.linalg.norm(LC - np.eye(mtl.n) / (v1 * v1)))
    if gap >= REDUCTION_TOL * float(np.linalg.norm(LC)):
        raise NotReducibleError(f"LC is not a multiple of the identity (gap {gap:.3e})")
    c_inv = spec.d
    if c_inv <= 0:
        raise NotReducibleError("beam does not couple to the lines (B^T C^-1 B = 0)")
    reduced = ReducedLine(L_tilde=c_inv / (v1 * v1), C_tilde=1.0 / c_inv, v1=v1)
    logger.info(f"Reduced n={mtl.n} lines to L~={reduced.L_tilde:.6g}, C~={reduced.C_tilde:.6g}")
    return reduced


def verify_reduction(mtl: MtlParams, beam: BeamParams, omega: float) -> ReductionCheck:
    """Growing root of the reduced line against the full system."""
    reduced = reduce_equivalent_line(mtl)
    full = solve_dispersion(spectral_data(mtl), beam, omega)
    line = validate_mtl([[reduced.L_tilde]], [[reduced.C_tilde]])
    single = solve_dispersion(spectral_data(line), beam, omega)
    if not (full.has_growing_pair and single.has_growing_pair):
        raise NonGrowingInputError("no growing pair to compare")
    diff = abs(full.v0 - single.v0)
    return ReductionCheck(v0_full=full.v0, v0_reduced=single.v0, difference=float(diff))


def _gain(solution) -> float:
    return solution.gain if solution.gain is not None else math.nan


def gain_scaling_identical_lines(
    L_hat: float,
    C_hat: float,
    beam: BeamParams,
    omega: float,
    n_list: Sequence[int],
) -> GainScaling:
    """
    Gain of n identical uncoupled lines against one line with beam(xi / n).

    Returns:
        GainScaling with columns n, gain, gain_equivalent, difference and the
        log-log slope of gain against n
    """
    _require_positive(L_hat=L_hat, C_hat=C_hat, omega=omega)
    single = spectral_data(validate_mtl([[L_hat]], [[C_hat]]))
    rows = []
    for n in n_list:
        if n < 1:
            raise InvalidParameterError(f"line count must be positive, got {n}")
        mtl = validate_mtl(L_hat * np.eye(n), C_hat * np.eye(n))
        gain = _gain(solve_dispersion(spectral_data(mtl), beam, omega))
        equivalent = _gain(solve_dispersion(single, beam.with_values(xi=beam.xi / n), omega))
        rows.append({"n": int(n), "gain": gain, "gain_equivalent": equivalent,
                     "difference": abs(gain - equivalent)})
    table = pd.DataFrame(rows)
    slope = loglog_slope(table["n"].to_numpy(dtype=float), table["gain"].to_numpy()) if len(rows) > 1 else math.nan
    logger.info(f"Gain scaling over n={list(n_list)}: slope {slope:.4f}")
    return GainScaling(table=table, slope=slope)
