"""Dispersion relation of the line/beam system: roots, gain and thresholds."""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import reduce
from typing import List, Optional, Sequence, Tuple

import numpy as np
import numpy.polynomial.polynomial as poly
import pandas as pd
from scipy.optimize import brentq, minimize_scalar

from tools.core_linalg import (
    BeamParams,
    MtlSpectralData,
    SpectralCluster,
    characteristic_matrix,
)
from tools.errors import (
    AtAsymptoteError,
    InvalidParameterError,
    MtlbNumericError,
    NearCharacteristicVelocityError,
    NonGrowingInputError,
    RootResidualTooLargeError,
)

logger = logging.getLogger(__name__)

COMPLEX_TOL = 1e-7
MERGE_TOL = 1e-7
ASYMPTOTE_TOL = 1e-12
BRACKET_OFFSET = 1e-8
NEAR_CHARACTERISTIC_TOL = 1e-10
ADJACENT_TOL = 1e-3


class RootKind(str, Enum):
    REAL_OSCILLATORY = "RealOscillatory"
    CHARACTERISTIC = "CharacteristicCoincident"
    GROWING_PAIR = "GrowingPair"
    SPURIOUS_COMPLEX = "SpuriousComplex"


class ThresholdMethod(str, Enum):
    UNCONDITIONAL = "Unconditional"
    EXACT = "Exact"
    SUFFICIENT = "Sufficient"


@dataclass(frozen=True)
class DispersionRoot:
    value: complex
    multiplicity: int
    kind: RootKind

    @property
    def is_real(self) -> bool:
        return self.value.imag == 0.0


@dataclass(frozen=True)
class DispersionSolution:
    """All roots of Delta(v) at one frequency, classified."""

    omega: float
    u0: float
    coeffs_v: np.ndarray
    reduced_coeffs: np.ndarray
    roots: Tuple[DispersionRoot, ...]
    v0: Optional[complex] = None
    k0: Optional[complex] = None
    gain: Optional[float] = None
    warnings: Tuple[str, ...] = field(default=())

    @property
    def has_growing_pair(self) -> bool:
        return self.v0 is not None

    def expanded_roots(self) -> np.ndarray:
        """Every root repeated by its multiplicity."""
        values = [r.value for r in self.roots for _ in range(r.multiplicity)]
        return np.array(values, dtype=complex)

    @property
    def n_real_roots(self) -> int:
        return sum(r.multiplicity for r in self.roots if r.is_real)

    @property
    def n_complex_pairs(self) -> int:
        return sum(r.multiplicity for r in self.roots if not r.is_real and r.value.imag > 0)

    def intersection_roots(self) -> np.ndarray:
        """Real roots that are not characteristic velocities, with multiplicity."""
        values = [r.value.real for r in self.roots
                  if r.kind is RootKind.REAL_OSCILLATORY for _ in range(r.multiplicity)]
        return np.sort(np.array(values, dtype=float))


@dataclass(frozen=True)
class XiThreshold:
    xi0: float
    method: ThresholdMethod

    @property
    def unconditional(self) -> bool:
        return math.isinf(self.xi0)


@dataclass(frozen=True)
class VietaResiduals:
    sum_residual: float
    product_residual: float
    sum_scale: float
    product_scale: float

    def within(self, rtol: float) -> bool:
        return (self.sum_residual <= rtol * self.sum_scale
                and self.product_residual <= rtol * self.product_scale)


def _lambda_factor(lam: float) -> np.ndarray:
    # lambda - v^2, ascending
    return np.array([lam, 0.0, -1.0])


def _beam_factor(beam: BeamParams, d: float) -> np.ndarray:
    # d - xi (v - u0)^2, ascending
    xi, u0 = beam.xi, beam.u0
    return np.array([d - xi * u0 * u0, 2.0 * xi * u0, -xi])


def _product(factors: Sequence[np.ndarray]) -> np.ndarray:
    return reduce(poly.polymul, factors, np.array([1.0]))


def _padded(coeffs: np.ndarray, length: int) -> np.ndarray:
    out = np.zeros(length)
    out[: min(length, coeffs.size)] = coeffs[:length]
    return out


def _combine(lambdas: Sequence[float], weights: Sequence[float], beam: BeamParams, d: float) -> np.ndarray:
    """prod(lambda - v^2)(d - xi(v-u0)^2) - sum_i W_i prod_{j != i}(lambda_j - v^2), ascending."""
    factors = [_lambda_factor(lam) for lam in lambdas]
    result = poly.polymul(_product(factors), _beam_factor(beam, d))
    for i, w in enumerate(weights):
        if w == 0.0:
            continue
        others = _product(factors[:i] + factors[i + 1:])
        result = poly.polysub(result, w * others)
    return _padded(result, 2 * len(lambdas) + 3)


def dispersion_polynomial(spec: MtlSpectralData, beam: BeamParams) -> np.ndarray:
    """
    Coefficients of Delta(v) = |A~(v)| in descending powers of v.

    Args:
        spec: spectral data of the lines
        beam: beam parameters

    Returns:
        Real array of length 2n+3
    """
    det_l = float(np.linalg.det(spec.mtl.L))
    ascending = det_l * _combine(spec.lambdas, spec.Dtilde ** 2, beam, spec.d)
    return ascending[::-1]


def _reduced_polynomial(
    spec: MtlSpectralData, beam: BeamParams
) -> Tuple[np.ndarray, List[Tuple[SpectralCluster, int]]]:
    """Delta with the characteristic factors divided out.

    Delta = |L| prod_c (lambda_c - v^2)^e_c * Delta_red, where e_c = m_c - 1
    for a coupled cluster and m_c for a decoupled one.
    """
    active = spec.active_clusters
    ascending = _combine([c.lam for c in active], [c.weight for c in active], beam, spec.d)
    exponents = [(c, c.multiplicity - 1 if c.active else c.multiplicity) for c in spec.clusters]
    return ascending, exponents


def _polish(coeffs: np.ndarray, root: complex, iterations: int = 3) -> complex:
    deriv = poly.polyder(coeffs)
    best, best_res = root, abs(poly.polyval(root, coeffs))
    current = root
    for _ in range(iterations):
        slope = poly.polyval(current, deriv)
        if slope == 0:
            break
        current = current - poly.polyval(current, coeffs) / slope
        res = abs(poly.polyval(current, coeffs))
        if res < best_res:
            best, best_res = current, res
    return complex(best)


def _is_complex(r: complex) -> bool:
    return abs(r.imag) > COMPLEX_TOL * max(1.0, abs(r))


def _merge_real(values: List[float]) -> List[Tuple[float, int]]:
    merged: List[Tuple[float, int]] = []
    for x in sorted(values):
        if merged and abs(x - merged[-1][0]) <= MERGE_TOL * max(1.0, abs(x)):
            prev, m = merged[-1]
            merged[-1] = ((prev * m + x) / (m + 1), m + 1)
        else:
            merged.append((x, 1))
    return merged


def amplification_factor(omega: float, v0: complex) -> float:
    """-Im(omega / v0) = omega Im v0 / |v0|^2."""
    if not omega > 0:
        raise InvalidParameterError("omega must be positive")
    if not v0.imag > 0:
        raise NonGrowingInputError(f"v0={v0} has Im v0 <= 0")
    return omega * v0.imag / abs(v0) ** 2


def solve_dispersion(
    spec: MtlSpectralData,
    beam: BeamParams,
    omega: float,
    residual_tol: float = 1e-8,
) -> DispersionSolution:
    """
    Find and classify all 2n+2 roots of Delta(v).

    Args:
        spec: spectral data of the lines
        beam: beam parameters
        omega: angular frequency
        residual_tol: relative residual accepted for each root

    Returns:
        DispersionSolution
    """
    if not (math.isfinite(omega) and omega > 0):
        raise InvalidParameterError("omega must be positive")

    reduced, exponents = _reduced_polynomial(spec, beam)
    roots: List[DispersionRoot] = []

    for cluster, exponent in exponents:
        if exponent == 0:
            continue
        r = complex(np.sqrt(complex(cluster.lam)))
        for value in (r, -r):
            if value.imag == 0.0:
                value = complex(value.real, 0.0)
            roots.append(DispersionRoot(value=value, multiplicity=exponent,
                                        kind=RootKind.CHARACTERISTIC))

    trimmed = np.trim_zeros(reduced, "b")
    degree = trimmed.size - 1
    raw = np.roots(trimmed[::-1]) if degree > 0 else np.array([], dtype=complex)
    coeff_scale = float(np.max(np.abs(trimmed)))

    reals: List[float] = []
    uppers: List[complex] = []
    for r in raw:
        r = _polish(trimmed, complex(r))
        residual = abs(poly.polyval(r, trimmed))
        if residual > residual_tol * coeff_scale * max(1.0, abs(r)) ** degree:
            raise RootResidualTooLargeError(
                f"root {r} has residual {residual:.3e} (scale {coeff_scale:.3e})"
            )
        if _is_complex(r):
            if r.imag > 0:
                uppers.append(r)
        else:
            reals.append(r.real)

    for value, mult in _merge_real(reals):
        roots.append(DispersionRoot(value=complex(value, 0.0), multiplicity=mult,
                                    kind=RootKind.REAL_OSCILLATORY))

    warnings = list(spec.warnings)
    mtl = spec.mtl
    if mtl.is_permissive:
        warnings.append("permissive mode: theorem-based root classification skipped")

    u0 = beam.u0
    v0: Optional[complex] = None
    if uppers:
        gains = [amplification_factor(omega, r) for r in uppers]
        matching = [i for i, r in enumerate(uppers) if (r.real - u0) <= 1e-12 * u0]
        pool = matching if matching else list(range(len(uppers)))
        best = max(pool, key=lambda i: gains[i])
        v0 = uppers[best]
        if not matching:
            msg = f"growing pair v0={v0} does not satisfy Re v0 <= u0"
            logger.warning(msg)
            warnings.append(msg)
        if len(uppers) > 1:
            msg = f"{len(uppers)} complex pairs found; {len(uppers) - 1} labelled SpuriousComplex"
            logger.warning(msg)
            warnings.append(msg)
        for i, r in enumerate(uppers):
            kind = RootKind.GROWING_PAIR if i == best else RootKind.SPURIOUS_COMPLEX
            roots.append(DispersionRoot(value=r, multiplicity=1, kind=kind))
            roots.append(DispersionRoot(value=r.conjugate(), multiplicity=1, kind=kind))
    else:
        msg = "NoComplexPair: all roots are real"
        logger.warning(msg)
        warnings.append(msg)

    if not mtl.is_permissive and u0 <= spec.v1 and len(uppers) != 1:
        msg = f"root structure deviates from the u0 <= v1 amplification theorem ({len(uppers)} pairs)"
        logger.warning(msg)
        warnings.append(msg)

    roots.sort(key=lambda r: (r.value.real, r.value.imag))
    total = sum(r.multiplicity for r in roots)
    if total != 2 * spec.n + 2:
        raise MtlbNumericError(f"found {total} roots, expected {2 * spec.n + 2}")

    k0 = omega / v0 if v0 is not None else None
    gain = amplification_factor(omega, v0) if v0 is not None else None
    logger.info(
        f"Dispersion at omega={omega:g}: {sum(r.multiplicity for r in roots if r.is_real)} real roots, "
        f"v0={v0}, gain={gain}"
    )
    return DispersionSolution(
        omega=float(omega),
        u0=u0,
        coeffs_v=dispersion_polynomial(spec, beam),
        reduced_coeffs=reduced[::-1],
        roots=tuple(roots),
        v0=v0,
        k0=k0,
        gain=gain,
        warnings=tuple(warnings),
    )


def _positive_poles(spec: MtlSpectralData) -> np.ndarray:
    return np.array(sorted(math.sqrt(c.lam) for c in spec.active_clusters if c.lam > 0))


def _r_values(spec: MtlSpectralData, v: np.ndarray) -> np.ndarray:
    v2 = np.asarray(v, dtype=float) ** 2
    total = np.full_like(v2, -spec.d)
    for c in spec.active_clusters:
        total = total + c.weight / (c.lam - v2)
    return total


def _r_prime(spec: MtlSpectralData, v: float) -> float:
    return float(sum(2.0 * v * c.weight / (c.lam - v * v) ** 2 for c in spec.active_clusters))


def characteristic_function(spec: MtlSpectralData, v: float) -> float:
    """R(v) = sum_i D~_i^2 / (v_i^2 - v^2) - d."""
    for pole in _positive_poles(spec):
        if abs(abs(v) - pole) <= ASYMPTOTE_TOL * max(1.0, pole):
            raise AtAsymptoteError(f"v={v} is at the asymptote {pole}")
    return float(_r_values(spec, np.array([v]))[0])


def sample_characteristic_function(
    spec: MtlSpectralData, v_grid: Sequence[float], beam: Optional[BeamParams] = None
) -> pd.DataFrame:
    """
    Tabulate R(v) on a grid.

    Points on an asymptote get a NaN value. When a beam is given the
    parabola -xi (v - u0)^2 is added as a column.
    """
    v = np.asarray(v_grid, dtype=float)
    poles = _positive_poles(spec)
    asymptotes = np.sort(np.concatenate([-poles, poles]))
    with np.errstate(divide="ignore", invalid="ignore"):
        values = _r_values(spec, v)
    if asymptotes.size:
        distance = np.min(np.abs(v[:, None] - asymptotes[None, :]), axis=1)
        scale = max(1.0, float(np.max(np.abs(asymptotes))))
        values = np.where(distance <= ASYMPTOTE_TOL * scale, np.nan, values)
        adjacent = distance <= ADJACENT_TOL * scale
    else:
        adjacent = np.zeros(v.shape, dtype=bool)
    frame = pd.DataFrame({
        "v": v,
        "value": values,
        "branch_index": np.searchsorted(asymptotes, v).astype(int),
        "is_asymptote_adjacent": adjacent,
    })
    if beam is not None:
        frame["parabola"] = -beam.xi * (v - beam.u0) ** 2
    return frame


def _outer_bound(spec: MtlSpectralData, beam: BeamParams, poles: np.ndarray) -> float:
    """V such that R(v) + xi (v - u0)^2 > 0 for all |v| >= V."""
    lam_max = max((c.lam for c in spec.active_clusters), default=0.0)
    V = 2.0 * max(1.0, beam.u0, float(poles.max()) if poles.size else 0.0,
                  math.sqrt(abs(spec.d) / beam.xi))
    for _ in range(200):
        if V * V >= 2.0 * lam_max:
            tail = abs(spec.d)
            for c in spec.active_clusters:
                tail += c.weight / (V * V - c.lam)
            if beam.xi * (V - beam.u0) ** 2 > tail:
                return V
        V *= 2.0
    raise MtlbNumericError("could not bound the real roots")


def branch_bracketed_roots(
    spec: MtlSpectralData, beam: BeamParams, samples_per_branch: int = 400
) -> np.ndarray:
    """
    Real roots as intersections of R(v) with the parabola -xi (v - u0)^2.

    Each branch between consecutive asymptotes is scanned on a grid clustered
    toward its ends; sign changes of F(v) = R(v) + xi (v - u0)^2 are refined
    with Brent's method.
    """
    poles = _positive_poles(spec)
    V = _outer_bound(spec, beam, poles)
    asymptotes = list(np.sort(np.concatenate([-poles, poles])))
    edges = [-V] + asymptotes + [V]

    def F(x: float) -> float:
        return float(_r_values(spec, np.array([x]))[0]) + beam.xi * (x - beam.u0) ** 2

    found: List[float] = []
    for i in range(len(edges) - 1):
        a, b = edges[i], edges[i + 1]
        if i > 0:
            a += BRACKET_OFFSET * max(1.0, abs(a))
        if i < len(edges) - 2:
            b -= BRACKET_OFFSET * max(1.0, abs(b))
        if b <= a:
            continue
        k = np.arange(samples_per_branch)
        grid = 0.5 * (a + b) - 0.5 * (b - a) * np.cos(np.pi * k / (samples_per_branch - 1))
        values = np.array([F(x) for x in grid])
        for j in range(grid.size - 1):
            if values[j] == 0.0:
                found.append(float(grid[j]))
            elif values[j] * values[j + 1] < 0:
                found.append(brentq(F, grid[j], grid[j + 1], xtol=1e-15, maxiter=200))
        if values[-1] == 0.0:
            found.append(float(grid[-1]))
    logger.debug(f"Bracketing found {len(found)} real roots over {len(edges) - 1} branches")
    return np.array(sorted(set(found)))


def xi_threshold(spec: MtlSpectralData, u0: float) -> XiThreshold:
    """
    Coupling constant below which a growing pair is guaranteed.

    Args:
        spec: strict-mode spectral data
        u0: beam velocity

    Returns:
        XiThreshold; xi0 is infinite when u0 <= v1
    """
    if spec.mtl.is_permissive:
        raise InvalidParameterError("xi_threshold requires strict-mode spectral data")
    spec.require_real_velocities()
    v1 = spec.v1
    if u0 <= v1:
        return XiThreshold(xi0=math.inf, method=ThresholdMethod.UNCONDITIONAL)

    if spec.n == 1:
        gamma = v1 / u0
        b = float(spec.mtl.B[0])
        L = float(spec.mtl.L[0, 0]) * b * b
        # tangency of the parabola with R at v = v1 * gamma**(-1/3)
        return XiThreshold(xi0=L * gamma ** 2 / (1.0 - gamma ** (2.0 / 3.0)) ** 3,
                           method=ThresholdMethod.EXACT)

    inner = [p for p in _positive_poles(spec) if v1 < p < u0]
    edges = [v1] + inner + [u0]
    best = math.inf
    for a, b in zip(edges[:-1], edges[1:]):
        k = np.arange(1, 255)
        grid = 0.5 * (a + b) - 0.5 * (b - a) * np.cos(np.pi * k / 255)
        values = np.array([_r_prime(spec, x) for x in grid])
        j = int(np.argmin(values))
        lo, hi = grid[max(j - 1, 0)], grid[min(j + 1, grid.size - 1)]
        if b == u0 and j == grid.size - 1:
            hi = u0
        result = minimize_scalar(lambda x: _r_prime(spec, x), bounds=(lo, hi), method="bounded")
        best = min(best, float(values[j]), float(result.fun))
    return XiThreshold(xi0=best / (2.0 * u0), method=ThresholdMethod.SUFFICIENT)


def locate_xi_threshold(
    spec: MtlSpectralData,
    u0: float,
    omega: float,
    xi_lo: float,
    xi_hi: float,
    rtol: float = 1e-10,
) -> float:
    """Bisect on xi for the point where the growing pair disappears."""

    def has_pair(xi: float) -> bool:
        return solve_dispersion(spec, BeamParams(u0=u0, xi=xi), omega).has_growing_pair

    if not has_pair(xi_lo) or has_pair(xi_hi):
        raise InvalidParameterError(
            f"[{xi_lo}, {xi_hi}] does not bracket the disappearance of the growing pair"
        )
    lo, hi = xi_lo, xi_hi
    for _ in range(400):
        if hi / lo - 1.0 < rtol:
            break
        mid = math.sqrt(lo * hi)
        if has_pair(mid):
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)


def vieta_residuals(solution: DispersionSolution, beam: BeamParams, spec: MtlSpectralData) -> VietaResiduals:
    """Root sum against 2 u0 and root product against (-1)^n u0^2 / (|L||C|)."""
    roots = solution.expanded_roots()
    n = spec.n
    expected_product = (-1) ** n * beam.u0 ** 2 / (
        float(np.linalg.det(spec.mtl.L)) * float(np.linalg.det(spec.mtl.C))
    )
    total = complex(np.sum(roots))
    product = complex(np.prod(roots))
    return VietaResiduals(
        sum_residual=abs(total - 2.0 * beam.u0),
        product_residual=abs(product - expected_product),
        sum_scale=max(1.0, float(np.sum(np.abs(roots)))),
        product_scale=max(1.0, abs(expected_product), float(np.prod(np.abs(roots)))),
    )


def canonical_factorization_residual(spec: MtlSpectralData, beam: BeamParams, v: complex) -> float:
    """|Delta(v) - |A(v)| (d - xi (v-u0)^2 - D^T A(v)^-1 D)| relative to |Delta(v)|."""
    v2 = v * v
    lam = spec.lambdas
    product = np.prod(lam - v2)
    scale = np.prod(np.maximum(np.abs(lam), abs(v2)))
    if abs(product) <= NEAR_CHARACTERISTIC_TOL * scale:
        raise NearCharacteristicVelocityError(f"v={v} is too close to a characteristic velocity")
    delta = np.polyval(dispersion_polynomial(spec, beam), v)
    A = characteristic_matrix(spec.mtl, v)
    schur = spec.d - beam.xi * (v - beam.u0) ** 2 - spec.D @ np.linalg.solve(A, spec.D)
    factored = np.linalg.det(A) * schur
    denom = max(abs(delta), abs(factored), np.finfo(float).tiny)
    return float(abs(delta - factored) / denom)


def asymmetry_gaps(solution: DispersionSolution) -> np.ndarray:
    """v_k+ - v_k- for intersection roots matched by rank on each side of zero."""
    roots = solution.intersection_roots()
    positive = np.sort(roots[roots > 0])
    negative = np.sort(-roots[roots < 0])
    if positive.size != negative.size:
        return np.array([])
    return positive - negative


def _sweep_point(spec: MtlSpectralData, beam: BeamParams, omega: float, param: str, value: float) -> dict:
    if param == "xi":
        point_beam, point_omega = beam.with_values(xi=value), omega
    elif param == "u0":
        point_beam, point_omega = beam.with_values(u0=value), omega
    else:
        point_beam, point_omega = beam, value
    row = {param: value, "gain": np.nan, "re_v0": np.nan, "im_v0": np.nan, "n_real_roots": 0}
    try:
        solution = solve_dispersion(spec, point_beam, point_omega)
    except MtlbNumericError as e:
        logger.warning(f"Sweep point {param}={value} failed: {e}")
        row["warning"] = f"{param}={value}: {type(e).__name__}: {e}"
        return row
    row["n_real_roots"] = solution.n_real_roots
    if solution.v0 is not None:
        row.update(gain=solution.gain, re_v0=solution.v0.real, im_v0=solution.v0.imag)
    return row


def gain_sweep(
    spec: MtlSpectralData,
    beam: BeamParams,
    omega: float,
    param: str,
    values: Sequence[float],
    threads: int = 1,
) -> pd.DataFrame:
    """
    Gain and growing root over a parameter range.

    Args:
        spec: spectral data of the lines
        beam: baseline beam
        omega: baseline frequency
        param: one of "xi", "u0", "omega"
        values: parameter values
        threads: worker threads (results keep the input order)

    Returns:
        DataFrame with columns param, gain, re_v0, im_v0, n_real_roots
    """
    if param not in ("xi", "u0", "omega"):
        raise InvalidParameterError(f"unknown sweep parameter: {param}")
    columns = [param, "gain", "re_v0", "im_v0", "n_real_roots"]
    values = [float(x) for x in values]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        rows = list(pool.map(lambda x: _sweep_point(spec, beam, omega, param, x), values))
    frame = pd.DataFrame(rows, columns=columns)
    frame["n_real_roots"] = frame["n_real_roots"].astype(int)
    frame.attrs["warnings"] = [r["warning"] for r in rows if "warning" in r]
    logger.info(f"Swept {param} over {len(values)} points")
    return frame


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Slope of the least-squares line through (log x, log y)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    mask = np.isfinite(x) & np.isfinite(y) & (x > 0) & (y > 0)
    if np.count_nonzero(mask) < 2:
        raise InvalidParameterError("need at least two positive finite points for a log-log fit")
    return float(np.polyfit(np.log(x[mask]), np.log(y[mask]), 1)[0])
