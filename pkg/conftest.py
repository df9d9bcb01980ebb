"""Shared fixtures: reference systems and system-file helpers."""
import json

import numpy as np
import pytest

from tools.core_linalg import BeamParams, Strictness, spectral_data, validate_mtl
from tools.dispersion import xi_threshold

# Three-line system with an indefinite C (accepted in permissive mode only)
THREE_LINE_L = [[4.0, 1.0, 0.5], [1.0, 5.0, 2.0], [0.5, 2.0, 2.0]]
THREE_LINE_C = [[2.0, 1.0, 2.0], [1.0, 4.0, 0.0], [2.0, 0.0, 1.0]]


def random_spd(rng: np.random.Generator, n: int) -> np.ndarray:
    A = rng.standard_normal((n, n))
    return A @ A.T + n * np.eye(n)


def random_strict_system(rng: np.random.Generator, n: int):
    """Random strict system with a beam in the u0 <= v1 regime."""
    mtl = validate_mtl(random_spd(rng, n), random_spd(rng, n))
    spec = spectral_data(mtl)
    u0 = spec.v1 * rng.uniform(0.2, 0.95)
    xi = 10.0 ** rng.uniform(-2.0, 2.0)
    return spec, BeamParams(u0=u0, xi=xi)


def random_fast_beam_system(rng: np.random.Generator, n: int):
    """Random strict system with u0 > v1 and xi below the growth threshold."""
    mtl = validate_mtl(random_spd(rng, n), random_spd(rng, n))
    spec = spectral_data(mtl)
    u0 = spec.v1 * rng.uniform(1.05, 3.0)
    xi = xi_threshold(spec, u0).xi0 * rng.uniform(0.1, 0.8)
    return spec, BeamParams(u0=u0, xi=xi)


def random_unstable_system(rng: np.random.Generator, n: int):
    """Either growth condition, chosen at random: slow beam, or fast beam below threshold."""
    if rng.random() < 0.5:
        return random_strict_system(rng, n)
    return random_fast_beam_system(rng, n)


def assert_same_roots(actual, expected, atol: float) -> None:
    """Match each expected root to its nearest actual root."""
    actual = np.asarray(actual, dtype=complex)
    expected = np.asarray(expected, dtype=complex)
    assert actual.size == expected.size
    for root in expected:
        assert np.min(np.abs(actual - root)) < atol, f"no root near {root}"


@pytest.fixture
def single_line():
    return validate_mtl([[1.0]], [[1.0]])


@pytest.fixture
def single_spec(single_line):
    return spectral_data(single_line)


@pytest.fixture
def reference_beam():
    return BeamParams(u0=1.0, xi=1.0)


@pytest.fixture
def three_line_spec():
    return spectral_data(validate_mtl(THREE_LINE_L, THREE_LINE_C, strictness=Strictness.PERMISSIVE))


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def reference_system():
    return {
        "mtl": {"L": [[1.0]], "C": [[1.0]]},
        "beam": {"u0": 1.0, "xi": 1.0},
        "omega": 1.0,
    }


@pytest.fixture
def write_system(tmp_path):
    """Write a system dict (or raw text) to a file and return its path."""

    def _write(system, name: str = "system.json") -> str:
        path = tmp_path / name
        text = system if isinstance(system, str) else json.dumps(system, indent=2)
        path.write_text(text, encoding="utf-8")
        return str(path)

    return _write
