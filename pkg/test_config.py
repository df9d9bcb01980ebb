"""Tests for environment configuration and system-file parsing."""
import importlib
import json
import math

import pytest

from app import main
from config import Config
from schemas import SystemConfig, build_domain, parse_system
from tools.errors import ConfigParseError, ConfigValidationError


def test_default_configuration_is_valid():
    assert Config.validate()
    assert Config.UNITS == "gaussian"


@pytest.mark.parametrize("attr, value", [
    ("THREADS", 0),
    ("LOG_LEVEL", "LOUD"),
    ("ROOT_TOL", 0.0),
])
def test_invalid_configuration_rejected(monkeypatch, attr, value):
    monkeypatch.setattr(Config, attr, value)
    with pytest.raises(ValueError):
        Config.validate()


def test_invalid_configuration_exits_with_one(monkeypatch, write_system, reference_system):
    monkeypatch.setattr(Config, "THREADS", 0)
    assert main(["analyze", "--input", write_system(reference_system)]) == 1


def test_reference_system_parses(reference_system):
    config = parse_system(json.dumps(reference_system))
    assert isinstance(config, SystemConfig)
    assert config.omegas == [1.0]
    system = build_domain(config)
    assert system.mtl.n == 1
    assert system.beam.xi == 1.0


def test_omega_list(reference_system):
    reference_system["omega"] = [0.5, 2.0]
    assert parse_system(json.dumps(reference_system)).omegas == [0.5, 2.0]


@pytest.mark.parametrize("omega", [[], 0.0, [1.0, -1.0]])
def test_bad_omega_rejected(reference_system, omega):
    reference_system["omega"] = omega
    with pytest.raises(ConfigValidationError, match="omega"):
        parse_system(json.dumps(reference_system))


def test_non_finite_numbers_rejected(reference_system):
    text = json.dumps(reference_system).replace('"xi": 1.0', '"xi": NaN')
    with pytest.raises(ConfigValidationError, match="beam.xi"):
        parse_system(text)


def test_plasma_quantities_derive_xi(reference_system):
    reference_system["beam"] = {"u0": 1.0, "sigma": 2.0, "rho0": 0.5, "charge_mass_ratio": 4.0}
    system = build_domain(parse_system(json.dumps(reference_system)))
    assert system.beam.xi == pytest.approx(0.25)
    assert system.beam.sigma == 2.0


def test_consistent_plasma_quantities_accepted(reference_system):
    reference_system["beam"] = {"u0": 1.0, "xi": 0.25, "sigma": 2.0, "rho0": 0.5, "charge_mass_ratio": 4.0}
    assert parse_system(json.dumps(reference_system)).beam.has_plasma


@pytest.mark.parametrize("beam, fragment", [
    ({"u0": 1.0}, "beam needs xi"),
    ({"u0": 1.0, "xi": 1.0, "sigma": 2.0}, "given together"),
    ({"u0": 1.0, "xi": -1.0}, "xi must be positive"),
    ({"u0": -1.0, "xi": 1.0}, "u0 must be positive"),
])
def test_beam_section_errors(reference_system, beam, fragment):
    reference_system["beam"] = beam
    with pytest.raises(ConfigValidationError, match=fragment):
        parse_system(json.dumps(reference_system))


def test_ragged_matrix_rejected(reference_system):
    reference_system["mtl"]["L"] = [[1.0, 0.0], [0.0]]
    with pytest.raises(ConfigValidationError, match="rectangular"):
        parse_system(json.dumps(reference_system))


def test_profile_needs_two_samples(reference_system):
    reference_system["profile"] = {"period": 1.0, "samples": [{"z": 0.0, "L": 1.0, "C": 1.0}]}
    with pytest.raises(ConfigValidationError, match="profile.samples"):
        parse_system(json.dumps(reference_system))


def test_simulation_defaults(reference_system):
    reference_system["simulation"] = {"length": 4.0}
    section = parse_system(json.dumps(reference_system)).simulation
    assert section.nz == 256
    assert section.boundary == "DriveAbsorb"
    assert section.target == "Beam"
    assert section.scheme is None
    assert math.isclose(section.absorb_fraction, 0.1)


def test_simulation_grid_floor(reference_system):
    reference_system["simulation"] = {"length": 4.0, "nz": 16}
    with pytest.raises(ConfigValidationError, match="simulation.nz"):
        parse_system(json.dumps(reference_system))


def test_parse_error_carries_position():
    with pytest.raises(ConfigParseError) as excinfo:
        parse_system('{\n  "omega": 1.0,,\n}')
    assert excinfo.value.line == 2
    assert excinfo.value.column == 16


@pytest.fixture
def reloaded_config(monkeypatch):
    """Re-read config.py under a patched environment, then restore it."""
    import config

    def reload_with(**env):
        for key, value in env.items():
            monkeypatch.setenv(key, value)
        return importlib.reload(config).Config

    yield reload_with
    monkeypatch.undo()
    importlib.reload(config)


@pytest.mark.parametrize("key, value", [
    ("MTLB_THREADS", "four"),
    ("MTLB_THREADS", "2.5"),
    ("MTLB_ROOT_TOL", "tight"),
])
def test_malformed_environment_fails_in_validate(reloaded_config, key, value):
    fresh = reloaded_config(**{key: value})
    with pytest.raises(ValueError, match=key):
        fresh.validate()


def test_malformed_threads_exit_with_one(monkeypatch, write_system, reference_system, capsys):
    monkeypatch.setattr(Config, "THREADS", None)
    monkeypatch.setattr(Config, "THREADS_RAW", "four")
    assert main(["analyze", "--input", write_system(reference_system)]) == 1
    assert "MTLB_THREADS" in capsys.readouterr().err
