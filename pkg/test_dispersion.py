"""Tests for the dispersion polynomial, root classification, thresholds and gain sweeps."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_same_roots, random_strict_system, random_unstable_system
from tools.core_linalg import BeamParams, spectral_data, validate_mtl
from tools.dispersion import (
    RootKind,
    ThresholdMethod,
    amplification_factor,
    asymmetry_gaps,
    branch_bracketed_roots,
    canonical_factorization_residual,
    characteristic_function,
    dispersion_polynomial,
    gain_sweep,
    locate_xi_threshold,
    loglog_slope,
    sample_characteristic_function,
    solve_dispersion,
    vieta_residuals,
    xi_threshold,
)
from tools.errors import AtAsymptoteError, InvalidParameterError, NearCharacteristicVelocityError


def test_reference_polynomial(single_spec, reference_beam):
    coeffs = dispersion_polynomial(single_spec, reference_beam)
    np.testing.assert_allclose(coeffs, [1.0, -2.0, -1.0, 2.0, -1.0], atol=1e-14)


def test_leading_coefficients_for_one_line(single_spec):
    beam = BeamParams(u0=1.7, xi=3.0)
    coeffs = dispersion_polynomial(single_spec, beam)
    assert coeffs[0] == pytest.approx(3.0)
    assert coeffs[1] == pytest.approx(-2.0 * 3.0 * 1.7)


def test_polynomial_beam_terms_linear_in_xi(rng):
    spec, beam = random_strict_system(rng, 3)
    base = dispersion_polynomial(spec, beam)
    doubled = dispersion_polynomial(spec, beam.with_values(xi=2.0 * beam.xi))
    assert doubled[0] == pytest.approx(2.0 * base[0])
    assert doubled[1] == pytest.approx(2.0 * base[1])
    # R(0) = 0 leaves only the beam term in the constant coefficient
    assert doubled[-1] == pytest.approx(2.0 * base[-1], rel=1e-8)


def test_reference_roots(single_spec, reference_beam):
    solution = solve_dispersion(single_spec, reference_beam, 1.0)
    assert solution.n_real_roots == 2
    assert solution.n_complex_pairs == 1
    assert solution.has_growing_pair
    assert solution.v0.imag > 0
    assert solution.k0.imag < 0
    assert solution.gain > 0
    companion = np.roots([1.0, -2.0, -1.0, 2.0, -1.0])
    assert_same_roots(solution.expanded_roots(), companion, atol=1e-10)
    kinds = [r.kind for r in solution.roots]
    assert kinds.count(RootKind.GROWING_PAIR) == 2


def test_characteristic_function_values(single_spec):
    assert characteristic_function(single_spec, 0.0) == 0.0
    assert characteristic_function(single_spec, 0.5) == pytest.approx(1.0 / 3.0)
    assert characteristic_function(single_spec, 1e6) == pytest.approx(-single_spec.d, rel=1e-4)
    with pytest.raises(AtAsymptoteError):
        characteristic_function(single_spec, 1.0)


def test_characteristic_function_tends_to_minus_d(rng):
    spec, _ = random_strict_system(rng, 3)
    v = 1e6 * float(spec.real_velocities[-1])
    assert characteristic_function(spec, v) == pytest.approx(-spec.d, rel=1e-4)
    assert characteristic_function(spec, 0.0) == pytest.approx(0.0, abs=1e-12 * spec.d)


def test_sample_characteristic_function_marks_asymptotes(single_spec, reference_beam):
    frame = sample_characteristic_function(single_spec, [-2.0, -1.0, 0.5, 1.0, 2.0], reference_beam)
    assert list(frame.columns) == ["v", "value", "branch_index", "is_asymptote_adjacent", "parabola"]
    assert np.isnan(frame["value"].iloc[1]) and np.isnan(frame["value"].iloc[3])
    assert frame["value"].iloc[2] == pytest.approx(1.0 / 3.0)
    assert frame["parabola"].iloc[4] == pytest.approx(-1.0)


def test_canonical_factorization(single_spec, rng):
    beam = BeamParams(u0=1.0, xi=1.0)
    assert canonical_factorization_residual(single_spec, beam, 2.0) < 1e-12
    spec, beam = random_strict_system(rng, 3)
    assert canonical_factorization_residual(spec, beam, 0.0) < 1e-12
    with pytest.raises(NearCharacteristicVelocityError):
        canonical_factorization_residual(spec, beam, spec.v1 + 1e-15)


@pytest.mark.parametrize("omega, v0, expected", [
    (1.0, 1j, 1.0),
    (2.0, 1j, 2.0),
    (1.0, 1 + 1j, 0.5),
])
def test_amplification_factor(omega, v0, expected):
    assert amplification_factor(omega, v0) == pytest.approx(expected)


@pytest.mark.parametrize("u0", [0.5, 1.0])
def test_threshold_unconditional_up_to_v1(single_spec, u0):
    threshold = xi_threshold(single_spec, u0)
    assert threshold.unconditional
    assert threshold.method is ThresholdMethod.UNCONDITIONAL


def test_single_line_threshold_matches_bisection(single_spec):
    threshold = xi_threshold(single_spec, 2.0)
    assert threshold.method is ThresholdMethod.EXACT
    gamma = 0.5
    assert threshold.xi0 == pytest.approx(gamma ** 2 / (1.0 - gamma ** (2.0 / 3.0)) ** 3, rel=1e-14)
    assert threshold.xi0 == pytest.approx(4.934, abs=1e-3)
    located = locate_xi_threshold(single_spec, 2.0, 1.0, 1.0, 20.0)
    assert located == pytest.approx(threshold.xi0, rel=1e-6)


def test_growing_pair_on_either_side_of_threshold(single_spec):
    xi0 = xi_threshold(single_spec, 2.0).xi0
    below = solve_dispersion(single_spec, BeamParams(u0=2.0, xi=0.9 * xi0), 1.0)
    above = solve_dispersion(single_spec, BeamParams(u0=2.0, xi=1.1 * xi0), 1.0)
    assert below.has_growing_pair
    assert not above.has_growing_pair
    assert above.gain is None
    assert any("NoComplexPair" in w for w in above.warnings)


def test_sufficient_threshold_guarantees_pair():
    mtl = validate_mtl(np.diag([1.0, 2.0]), np.diag([1.0, 0.25]))
    spec = spectral_data(mtl)
    u0 = 1.5 * spec.v1
    threshold = xi_threshold(spec, u0)
    assert threshold.method is ThresholdMethod.SUFFICIENT
    assert 0 < threshold.xi0 < math.inf
    for factor in (0.1, 0.5, 0.99):
        assert solve_dispersion(spec, BeamParams(u0=u0, xi=factor * threshold.xi0), 1.0).has_growing_pair


def test_threshold_rejects_permissive(three_line_spec):
    with pytest.raises(InvalidParameterError):
        xi_threshold(three_line_spec, 0.5)


def test_vieta_on_reference(single_spec, reference_beam):
    solution = solve_dispersion(single_spec, reference_beam, 1.0)
    residuals = vieta_residuals(solution, reference_beam, single_spec)
    assert residuals.sum_residual < 1e-12
    assert residuals.product_residual < 1e-12


@settings(max_examples=30, deadline=None)
@given(n=st.integers(min_value=1, max_value=4), seed=st.integers(min_value=0, max_value=2 ** 32 - 1))
def test_vieta_on_random_systems(n, seed):
    spec, beam = random_strict_system(np.random.default_rng(seed), n)
    solution = solve_dispersion(spec, beam, 1.0)
    assert vieta_residuals(solution, beam, spec).within(1e-7)


def test_root_structure_over_random_ensemble():
    rng = np.random.default_rng(7)
    fast = 0
    for trial in range(200):
        n = 1 + trial % 4
        spec, beam = random_unstable_system(rng, n)
        fast += beam.u0 > spec.v1
        solution = solve_dispersion(spec, beam, 1.0)
        assert solution.n_real_roots == 2 * n, f"trial {trial}"
        assert solution.n_complex_pairs == 1, f"trial {trial}"
        bracketed = branch_bracketed_roots(spec, beam)
        np.testing.assert_allclose(bracketed, solution.intersection_roots(), atol=1e-9, rtol=1e-9)
    # both growth conditions are represented
    assert 50 < fast < 150


def test_three_line_root_counts(three_line_spec):
    few = solve_dispersion(three_line_spec, BeamParams(u0=0.18, xi=2.0), 1.0)
    many = solve_dispersion(three_line_spec, BeamParams(u0=0.8, xi=18.0), 1.0)
    assert few.intersection_roots().size == 4
    assert many.intersection_roots().size == 6
    for solution in (few, many):
        assert any("permissive" in w for w in solution.warnings)


def test_gain_exponent_for_dense_beam(single_spec):
    frame = gain_sweep(single_spec, BeamParams(u0=1.0, xi=1.0), 1.0, "xi", np.logspace(-6, -3, 13))
    assert frame["gain"].notna().all()
    assert loglog_slope(frame["xi"], frame["gain"]) == pytest.approx(-0.5, abs=0.05)


def test_gain_exponent_for_dense_beam_multi_line(rng):
    spec, beam = random_strict_system(rng, 3)
    frame = gain_sweep(spec, beam, 1.0, "xi", np.logspace(-6, -3, 13), threads=2)
    assert loglog_slope(frame["xi"], frame["gain"]) == pytest.approx(-0.5, abs=0.05)


def test_gain_exponent_for_weak_beam_at_synchronism(single_spec):
    frame = gain_sweep(single_spec, BeamParams(u0=1.0, xi=1.0), 1.0, "xi", np.logspace(3, 6, 13))
    assert loglog_slope(frame["xi"], frame["gain"]) == pytest.approx(-1.0 / 3.0, abs=0.05)


def test_sweep_keeps_order_and_columns(single_spec, reference_beam):
    values = [3.0, 0.5, 1.0]
    serial = gain_sweep(single_spec, reference_beam, 1.0, "u0", values, threads=1)
    parallel = gain_sweep(single_spec, reference_beam, 1.0, "u0", values, threads=3)
    assert list(serial.columns) == ["u0", "gain", "re_v0", "im_v0", "n_real_roots"]
    assert serial.equals(parallel)
    assert list(serial["u0"]) == values


def test_sweep_without_pair_leaves_gain_empty(single_spec):
    frame = gain_sweep(single_spec, BeamParams(u0=2.0, xi=1.0), 1.0, "xi", [1.0, 100.0])
    assert frame["gain"].iloc[0] > 0
    assert np.isnan(frame["gain"].iloc[1])
    assert frame["n_real_roots"].iloc[1] == 4


def test_empty_sweep(single_spec, reference_beam):
    frame = gain_sweep(single_spec, reference_beam, 1.0, "omega", [])
    assert frame.empty
    assert list(frame.columns) == ["omega", "gain", "re_v0", "im_v0", "n_real_roots"]


def test_unknown_sweep_parameter(single_spec, reference_beam):
    with pytest.raises(InvalidParameterError):
        gain_sweep(single_spec, reference_beam, 1.0, "L", [1.0])


def test_gain_scales_linearly_with_omega(single_spec, reference_beam):
    one = solve_dispersion(single_spec, reference_beam, 1.0)
    two = solve_dispersion(single_spec, reference_beam, 2.0)
    assert two.v0 == pytest.approx(one.v0)
    assert two.gain == pytest.approx(2.0 * one.gain)


def test_asymmetry_gaps_follow_beam_direction(single_spec):
    gaps = asymmetry_gaps(solve_dispersion(single_spec, BeamParams(u0=0.5, xi=1.0), 1.0))
    assert gaps.size == 1
    assert gaps[0] > 0
