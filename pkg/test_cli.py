"""End-to-end tests of the mtlb command line and the command runner."""
import json
import os

import pandas as pd
import pytest

from app import main
from runner import MtlbRunner
from schemas import load_system
from tools.report_writer import dumps_report, read_report


def _error_payload(capsys) -> dict:
    lines = [line for line in capsys.readouterr().err.splitlines() if line.startswith("{")]
    assert lines, "no JSON error on stderr"
    return json.loads(lines[-1])


def _run(args, out):
    return main(list(args) + ["--output", str(out)])


def test_analyze_reference_system(write_system, reference_system, tmp_path, capsys):
    out = tmp_path / "out"
    assert _run(["analyze", "--input", write_system(reference_system)], out) == 0
    printed = capsys.readouterr().out.split()
    report_path = str(out / "analyze_report.json")
    assert report_path in printed

    report = read_report(report_path)
    assert report["command"] == "analyze"
    assert report["units"] == "gaussian"
    (frequency,) = report["frequencies"]
    kinds = [root["kind"] for root in frequency["roots"]]
    assert kinds.count("GrowingPair") == 2
    assert frequency["n_real_roots"] == 2
    assert frequency["growing"]["gain"] > 0
    assert frequency["energy"]["positivity"] is True
    assert frequency["vieta"]["sum_residual"] < 1e-8
    assert report["threshold"]["method"] == "Unconditional"
    assert report["threshold"]["xi0"] is None

    with open(report_path, encoding="utf-8") as f:
        assert dumps_report(report) == f.read()
    table = pd.read_csv(out / "characteristic_function.csv")
    assert list(table.columns) == ["v", "value", "branch_index", "is_asymptote_adjacent", "parabola"]


def test_analyze_writes_one_entry_per_frequency(write_system, reference_system, tmp_path):
    reference_system["omega"] = [0.5, 1.0, 2.0]
    out = tmp_path / "out"
    assert _run(["analyze", "--input", write_system(reference_system)], out) == 0
    report = read_report(str(out / "analyze_report.json"))
    assert [f["omega"] for f in report["frequencies"]] == [0.5, 1.0, 2.0]
    gains = [f["growing"]["gain"] for f in report["frequencies"]]
    assert gains[2] == pytest.approx(4.0 * gains[0])


def test_analyze_is_independent_of_thread_count(write_system, reference_system, tmp_path):
    reference_system["omega"] = [0.3, 0.7, 1.1, 1.9]
    system = load_system(write_system(reference_system))
    outputs = []
    for threads in (1, 4):
        out = tmp_path / f"threads{threads}"
        paths = MtlbRunner(system, output_dir=str(out), threads=threads).run("analyze")
        outputs.append([open(p, "rb").read() for p in paths])
    assert outputs[0] == outputs[1]


def test_sweep_reports_dense_beam_exponent(write_system, reference_system, tmp_path):
    out = tmp_path / "out"
    args = ["sweep", "--input", write_system(reference_system), "--param", "xi",
            "--from", "1e-6", "--to", "1e-3", "--points", "13", "--log"]
    assert _run(args, out) == 0
    lines = (out / "sweep.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "xi,gain,re_v0,im_v0,n_real_roots"
    footer = [line for line in lines if line.startswith("# ")]
    assert len(footer) == 1 and footer[0].startswith("# loglog_slope=")
    assert float(footer[0].split("=", 1)[1]) == pytest.approx(-0.5, abs=0.05)
    table = pd.read_csv(out / "sweep.csv", comment="#")
    assert len(table) == 13
    report = read_report(str(out / "sweep_report.json"))
    assert report["results"]["loglog_slope"] == pytest.approx(-0.5, abs=0.05)


def test_empty_sweep_writes_header_only(write_system, reference_system, tmp_path):
    out = tmp_path / "out"
    assert _run(["sweep", "--input", write_system(reference_system), "--points", "0"], out) == 0
    assert (out / "sweep.csv").read_text(encoding="utf-8") == "xi,gain,re_v0,im_v0,n_real_roots\n"


def test_pierce_on_single_line(write_system, reference_system, tmp_path):
    out = tmp_path / "out"
    reference_system["beam"]["xi"] = 10.0
    assert _run(["pierce", "--input", write_system(reference_system)], out) == 0
    table = pd.read_csv(out / "pierce.csv")
    assert len(table) == 7
    assert table["max_mismatch_rel"].iloc[-1] < 1e-2
    results = read_report(str(out / "pierce_report.json"))["results"]
    assert results["c"] == pytest.approx(0.05 ** (1.0 / 3.0))
    assert results["increasing"][1] < 0


def test_pierce_rejects_multi_line(write_system, reference_system, tmp_path, capsys):
    reference_system["mtl"] = {"L": [[1, 0, 0], [0, 1, 0], [0, 0, 1]], "C": [[1, 0, 0], [0, 1, 0], [0, 0, 1]]}
    assert _run(["pierce", "--input", write_system(reference_system)], tmp_path) == 1
    payload = _error_payload(capsys)
    assert payload["message"] == "pierce requires n=1"
    assert payload["error"] == "InvalidParameterError"
    assert payload["exit_code"] == 1


def test_reduce_identical_lines(write_system, reference_system, tmp_path):
    reference_system["mtl"] = {"L": [[2, 0], [0, 2]], "C": [[0.5, 0], [0, 0.5]]}
    reference_system["beam"]["u0"] = 0.5
    out = tmp_path / "out"
    assert _run(["reduce", "--input", write_system(reference_system)], out) == 0
    results = read_report(str(out / "reduce_report.json"))["results"]
    assert results["L_tilde"] == pytest.approx(4.0)
    assert results["C_tilde"] == pytest.approx(0.25)
    (check,) = results["checks"]
    assert check["difference"] < 1e-9


def test_reduce_rejects_mismatched_lines(write_system, reference_system, tmp_path, capsys):
    reference_system["mtl"] = {"L": [[1, 0], [0, 2]], "C": [[1, 0], [0, 1]]}
    assert _run(["reduce", "--input", write_system(reference_system)], tmp_path) == 1
    assert _error_payload(capsys)["error"] == "NotReducibleError"


def test_propagate_growing_mode(write_system, reference_system, tmp_path):
    reference_system["propagation"] = {"z_end": 2.0, "steps": 200}
    out = tmp_path / "out"
    assert _run(["propagate", "--input", write_system(reference_system)], out) == 0
    results = read_report(str(out / "propagate_report.json"))["results"]
    assert results["max_drift"] < 1e-7
    assert results["eigenmode_mismatch"] < 1e-6
    table = pd.read_csv(out / "trajectory.csv")
    assert list(table.columns) == ["z", "norm", "invariant_re", "invariant_im"]
    assert len(table) == 201


def test_propagate_through_profile(write_system, reference_system, tmp_path):
    reference_system["propagation"] = {"z_end": 1.0, "steps": 100, "V0": [[1, 0], [0, 0.5], [0.2, 0], [0, 0]]}
    reference_system["profile"] = {"period": 1.0, "samples": [
        {"z": 0.0, "L": 1.0, "C": 1.0},
        {"z": 0.5, "L": 1.0, "C": 1.2},
    ]}
    out = tmp_path / "out"
    assert _run(["propagate", "--input", write_system(reference_system)], out) == 0
    results = read_report(str(out / "propagate_report.json"))["results"]
    assert results["max_drift"] < 1e-7
    assert results["eigenmode_mismatch"] is None


def test_simulate_closed_run(write_system, reference_system, tmp_path):
    reference_system["beam"] = {"u0": 2.0, "xi": 10.0}
    reference_system["omega"] = 6.283185307179586
    reference_system["simulation"] = {"length": 1.0, "nz": 65, "periods": 2, "boundary": "Periodic",
                                      "amplitude": 0.0}
    out = tmp_path / "out"
    assert _run(["simulate", "--input", write_system(reference_system)], out) == 0
    results = read_report(str(out / "simulate_report.json"))["results"]
    assert results["scheme"] == "Conservative"
    assert results["energy"]["max_relative_drift"] < 1e-9
    frames = sorted(os.listdir(out / "snapshots"))
    assert len(frames) == 3


def test_simulate_driven_run(write_system, reference_system, tmp_path):
    reference_system["beam"] = {"u0": 1.0, "xi": 100.0}
    reference_system["omega"] = 6.283185307179586
    reference_system["simulation"] = {"length": 16.0, "nz": 1601, "periods": 32, "absorb_fraction": 0.15,
                                      "snapshots_per_period": 8}
    out = tmp_path / "out"
    assert _run(["simulate", "--input", write_system(reference_system)], out) == 0
    results = read_report(str(out / "simulate_report.json"))["results"]
    assert results["scheme"] == "Upwind"
    assert results["grid_filter"]["strength"] > 0
    growth = results["growth"]
    assert growth["window"] == pytest.approx([5.6, 12.0])
    # first-order upwind beam at dz = 0.01; the finer grids are covered in test_timedomain_sim
    assert growth["relative_error"] < 0.25
    assert (out / "growth_profile.csv").exists()


def test_simulate_needs_section(write_system, reference_system, tmp_path, capsys):
    assert _run(["simulate", "--input", write_system(reference_system)], tmp_path) == 1
    assert "simulation" in _error_payload(capsys)["message"]


def test_nonpositive_beam_velocity_rejected(write_system, reference_system, tmp_path, capsys):
    reference_system["beam"]["u0"] = 0.0
    assert _run(["analyze", "--input", write_system(reference_system)], tmp_path) == 1
    payload = _error_payload(capsys)
    assert payload["error"] == "ConfigValidationError"
    assert "u0 must be positive" in payload["message"]


def test_inconsistent_plasma_data_rejected(write_system, reference_system, tmp_path, capsys):
    reference_system["beam"].update(sigma=2.0, rho0=0.5, charge_mass_ratio=4.0)
    assert _run(["analyze", "--input", write_system(reference_system)], tmp_path) == 1
    assert "plasma relation" in _error_payload(capsys)["message"]


def test_malformed_json_reports_position(write_system, tmp_path, capsys):
    text = '{"mtl": {"L": [[1.0]],\n  "C": [[1.0]]\n  "beam": {}}'
    assert _run(["analyze", "--input", write_system(text)], tmp_path) == 1
    payload = _error_payload(capsys)
    assert payload["error"] == "ConfigParseError"
    assert (payload["line"], payload["column"]) == (3, 3)


def test_unknown_key_rejected(write_system, reference_system, tmp_path, capsys):
    reference_system["mtl"]["R"] = [[0.1]]
    assert _run(["analyze", "--input", write_system(reference_system)], tmp_path) == 1
    assert "mtl.R" in _error_payload(capsys)["message"]


def test_missing_input_file(tmp_path, capsys):
    assert _run(["analyze", "--input", str(tmp_path / "absent.json")], tmp_path) == 1
    assert _error_payload(capsys)["error"] == "ConfigValidationError"


def test_nonpositive_tolerance_rejected(write_system, reference_system, tmp_path):
    assert _run(["analyze", "--input", write_system(reference_system), "--tol", "0"], tmp_path) == 1


def test_usage_errors_exit_with_one(tmp_path):
    assert main(["explode", "--input", "x.json"]) == 1
    assert main(["analyze"]) == 1
    assert main(["--help"]) == 0


def test_analyze_high_gain_system(write_system, reference_system, tmp_path):
    reference_system["beam"] = {"u0": 0.5, "xi": 0.001}
    out = tmp_path / "out"
    assert _run(["analyze", "--input", write_system(reference_system)], out) == 0
    (frequency,) = read_report(str(out / "analyze_report.json"))["frequencies"]
    assert frequency["growing"]["gain"] > 40
    assert frequency["energy"]["positivity"] is True
    assert frequency["energy"]["flux_variation"] < 1e-8


def test_unexpected_failure_exits_with_two(monkeypatch, write_system, reference_system, tmp_path, capsys):
    def explode(self, command, **options):
        raise RuntimeError("singular pencil")

    monkeypatch.setattr(MtlbRunner, "run", explode)
    assert _run(["analyze", "--input", write_system(reference_system)], tmp_path) == 2
    payload = _error_payload(capsys)
    assert payload == {"error": "RuntimeError", "message": "singular pencil", "exit_code": 2}
