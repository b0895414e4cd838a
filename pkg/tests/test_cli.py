import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from sipmtwin import EasyScenarioRunner, __version__, load_scenario
from sipmtwin.__main__ import _main
from sipmtwin.errors import ExperimentError

DATA_DIR = Path(__file__).parent / "data"


def run_cli(*args):
    result = CliRunner().invoke(_main, [str(a) for a in args])
    return result


def get_result(out_dir):
    return json.loads((Path(out_dir) / "result.json").read_text())


def get_manifest(out_dir):
    lines = (Path(out_dir) / "manifest.txt").read_text().splitlines()
    return dict(line.split(": ", 1) for line in lines)


def get_sptr_scenario(name, tmp_path, seed=None, trials=None, **sections):
    """ Scenario from tests/data with some config sections patched """
    scenario = load_scenario(DATA_DIR / name, experiment="sptr")
    data = scenario.with_overrides(seed=seed, trials=trials, output_dir=tmp_path).model_dump()
    for section, values in sections.items():
        data[section].update(values)
    return type(scenario).model_validate(data)


def test_version():
    result = run_cli("--version")
    assert result.exit_code == 0
    assert __version__ in result.output


def test_sptr_command(tmp_path):
    result = run_cli("sptr", "-c", DATA_DIR / "sptr.yaml", "-o", tmp_path, "-n", 20000)
    assert result.exit_code == 0, result.output
    record = get_result(tmp_path)
    assert record["experiment"] == "sptr"
    assert record["n_pulses"] == 20000
    assert record["fwhm_ps"] > 0
    assert record["method"] == "interpolated"
    low, high = record["gate_tot_ns"]
    assert low < record["single_photon_tot_ns"] < high
    assert record["fwhm_all_ps"] > 0
    assert (tmp_path / "delta_t.csv").exists()
    assert (tmp_path / "delta_t_energy_bin_7.csv").exists()
    assert (tmp_path / "delta_t_single_photon.csv").exists()
    manifest = get_manifest(tmp_path)
    assert manifest["seed"] == "7"
    assert manifest["sipmtwin_version"] == __version__


def test_sptr_without_single_photon_gate(tmp_path):
    scenario = get_sptr_scenario(
        "sptr.yaml", tmp_path, trials=20000, sptr={"single_photon_gate": False}
    )
    record = EasyScenarioRunner().run(scenario)
    assert record["gate_tot_ns"] is None
    assert "fwhm_all_ps" not in record
    assert not (tmp_path / "delta_t_single_photon.csv").exists()


def test_darkcount_manifest_quotes_the_expected_count(tmp_path):
    result = run_cli("darkcount", "-c", DATA_DIR / "darkcount.yaml", "-o", tmp_path)
    assert result.exit_code == 0, result.output
    assert get_manifest(tmp_path)["expected_count"] == "15000000"
    record = get_result(tmp_path)
    assert record["expected_count"] == 15_000_000
    assert len(record["z_scores"]) == 20
    assert record["fraction_within_5_sigma"] == 1.0
    assert "threshold_scan" in record
    assert (tmp_path / "dark_tot.csv").exists()


def test_calibrate_command(tmp_path):
    result = run_cli("calibrate", "-c", DATA_DIR / "calibrate.yaml", "-o", tmp_path)
    assert result.exit_code == 0, result.output
    record = get_result(tmp_path)
    assert [m["setting"]["bias_V"] for m in record["models"]] == [40.0, 45.0]
    assert all(m["converged"] for m in record["models"])
    assert (tmp_path / "calibration_points.csv").exists()


def test_impedance_command(tmp_path):
    result = run_cli("impedance", "-c", DATA_DIR / "impedance.yaml", "-o", tmp_path)
    assert result.exit_code == 0, result.output
    record = get_result(tmp_path)
    assert 3.4e9 <= record["f_below_limit_hz"] <= 3.6e9
    assert record["input_impedance_ohm"] == pytest.approx(1 / 11)
    assert record["pole_shift_factor"] == pytest.approx(550.0)
    assert record["n_flagged"] == 0
    assert (tmp_path / "raw" / "open.s1p").exists()
    assert (tmp_path / "impedance.csv").exists()


def test_tofct_command(tmp_path):
    result = run_cli("tofct", "-c", DATA_DIR / "tofct.yaml", "-o", tmp_path)
    assert result.exit_code == 0, result.output
    record = get_result(tmp_path)
    assert record["timing_fwhm_ps"] == pytest.approx(200.0)
    assert record["primary_acceptance"] >= 0.95
    assert len(record["grid"]) == 3
    assert record["monotone_in_timing"]
    assert (tmp_path / "arrival_scattered.csv").exists()


def test_spectrum_command(tmp_path):
    result = run_cli("spectrum", "-c", DATA_DIR / "spectrum.yaml", "-o", tmp_path)
    assert result.exit_code == 0, result.output
    record = get_result(tmp_path)
    assert [s["source"] for s in record["sources"]] == ["Am-241", "Co-57", "Ge-68", "Cs-137"]
    assert record["n_events"] > 0
    assert (tmp_path / "energy_spectrum.csv").exists()


def test_same_seed_gives_identical_records(tmp_path):
    for name in ("a", "b"):
        result = run_cli("tofct", "-c", DATA_DIR / "tofct.yaml", "-o", tmp_path / name)
        assert result.exit_code == 0, result.output
    first = (tmp_path / "a" / "result.json").read_bytes()
    assert first == (tmp_path / "b" / "result.json").read_bytes()
    assert get_manifest(tmp_path / "a")["config_hash"] == get_manifest(tmp_path / "b")["config_hash"]


def test_seed_override_changes_the_run(tmp_path):
    run_cli("tofct", "-c", DATA_DIR / "tofct.yaml", "-o", tmp_path / "a")
    run_cli("tofct", "-c", DATA_DIR / "tofct.yaml", "-o", tmp_path / "b", "-s", 99)
    assert get_result(tmp_path / "b")["seed"] == 99
    assert get_result(tmp_path / "a") != get_result(tmp_path / "b")


def test_invalid_config_names_the_field(tmp_path):
    result = run_cli("sptr", "-c", DATA_DIR / "invalid_bias.yaml", "-o", tmp_path)
    assert result.exit_code == 1
    assert "invalid scenario" in result.output
    assert "sipm" in result.output


def test_unknown_section_is_rejected(tmp_path):
    path = tmp_path / "typo.yaml"
    path.write_text("seed: 1\nsimp:\n  pde: 0.5\n")
    result = run_cli("sptr", "-c", path, "-o", tmp_path / "out")
    assert result.exit_code == 1
    assert "simp" in result.output


def test_missing_config_file(tmp_path):
    result = run_cli("sptr", "-c", tmp_path / "nope.yaml")
    assert result.exit_code == 2


def test_module_errors_carry_the_experiment(tmp_path):
    scenario = load_scenario(DATA_DIR / "calibrate.yaml", experiment="calibrate")
    scenario = scenario.with_overrides(output_dir=tmp_path)
    bad = tmp_path / "points.csv"
    bad.write_text("source_label,energy_keV,tot_ns,bias_V,threshold_V\nAm-241,59.5,20.0,40,0.01\n")
    data = scenario.model_dump()
    data["calibration"]["dataset"] = bad
    scenario = type(scenario).model_validate(data)
    with pytest.raises(ExperimentError) as info:
        EasyScenarioRunner().run(scenario)
    assert info.value.experiment == "calibrate"


@pytest.mark.slow
@pytest.mark.parametrize("seed", [2024, 2025, 2026, 2027, 2028])
def test_sptr_reaches_the_configured_jitter_budget(tmp_path, seed):
    result = run_cli("sptr", "-c", DATA_DIR / "sptr_201ps.yaml", "-o", tmp_path, "-s", seed)
    assert result.exit_code == 0, result.output
    record = get_result(tmp_path)
    assert record["predicted_fwhm_ps"] == pytest.approx(201.0, abs=0.5)
    assert record["gate_tot_ns"] is not None
    assert record["n_events"] >= 80_000
    assert 196.0 <= record["fwhm_ps"] <= 206.0


@pytest.mark.slow
@pytest.mark.parametrize(
    "laser, transit, noise",
    [(60e-12, 150e-12, 0.0), (150e-12, 60e-12, 1e-3), (30e-12, 100e-12, 2e-3)],
)
def test_jitter_splits_add_in_quadrature(tmp_path, laser, transit, noise):
    scenario = get_sptr_scenario(
        "sptr.yaml",
        tmp_path,
        trials=300_000,
        laser={"jitter_fwhm": laser},
        sipm={"intrinsic_transit_jitter_fwhm": transit},
        comparator={"noise_rms": noise},
        analysis={"fwhm_method": "gaussian_fit", "rebin": 1},
        sptr={"include_dark": False},
    )
    record = EasyScenarioRunner().run(scenario)
    assert record["fwhm_ps"] ** 2 == pytest.approx(record["predicted_fwhm_ps"] ** 2, rel=0.05)


@pytest.mark.slow
def test_sptr_narrows_with_bias_for_every_seed(tmp_path):
    for seed in range(10):
        scenario = get_sptr_scenario("sptr_bias.yaml", tmp_path / f"seed_{seed}", seed=seed)
        sweep = EasyScenarioRunner().run(scenario)["bias_sweep"]
        assert [s["bias_V"] for s in sweep] == [38.0, 40.0, 42.5, 45.0, 48.0]
        widths = [s["fwhm_ps"] for s in sweep]
        assert all(b <= a for a, b in zip(widths, widths[1:])), (seed, widths)
