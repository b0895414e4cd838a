import json
import math
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from sipmtwin import Scenario, load_scenario
from sipmtwin.config import ExperimentKind, SipmConfig
from sipmtwin.file_utils import read_json, to_builtin, write_json
from sipmtwin.rng import Stream, make_rng

DATA_DIR = Path(__file__).parent / "data"


# scenarios
def test_load_every_shipped_scenario():
    for path in sorted(DATA_DIR.glob("*.yaml")):
        if path.stem == "invalid_bias":
            continue
        experiment = path.stem.split("_")[0]
        scenario = load_scenario(path, experiment=experiment)
        assert scenario.experiment == ExperimentKind(experiment)


def test_command_fills_in_the_experiment():
    scenario = load_scenario(DATA_DIR / "tofct.yaml", experiment="tofct")
    assert scenario.experiment == ExperimentKind.TOFCT
    assert scenario.trials == 20000
    assert scenario.tofct.timing_grid == [100e-12, 200e-12, 400e-12]


def test_scenario_needs_an_experiment():
    with pytest.raises(ValidationError):
        load_scenario(DATA_DIR / "tofct.yaml")


def test_overrides_are_validated():
    scenario = load_scenario(DATA_DIR / "tofct.yaml", experiment="tofct")
    changed = scenario.with_overrides(seed=5, trials=10, output_dir="elsewhere")
    assert (changed.seed, changed.trials, changed.output_dir) == (5, 10, Path("elsewhere"))
    with pytest.raises(ValidationError):
        scenario.with_overrides(trials=0)


def test_config_hash_ignores_the_output_directory():
    scenario = load_scenario(DATA_DIR / "tofct.yaml", experiment="tofct")
    assert scenario.config_hash() == scenario.with_overrides(output_dir="x").config_hash()
    assert scenario.config_hash() != scenario.with_overrides(seed=1).config_hash()


def test_sections_are_frozen():
    cfg = SipmConfig()
    with pytest.raises(ValidationError):
        cfg.pde = 0.9


def test_overvoltage_limit():
    with pytest.raises(ValidationError):
        SipmConfig(bias_voltage=32.5 + 20.0)
    assert SipmConfig(bias_voltage=45.0).overvoltage == pytest.approx(12.5)


def test_undersampled_scenario_is_rejected():
    with pytest.raises(ValidationError):
        Scenario(experiment="sptr", sptr={"sample_period": 1e-9})


def test_bias_sweep_outside_the_overvoltage_range():
    with pytest.raises(ValidationError):
        Scenario(experiment="sptr", sptr={"bias_sweep": [30.0]})


# random streams
def test_streams_are_reproducible_and_distinct():
    a = make_rng(42, Stream.DARK).random(5)
    assert np.array_equal(a, make_rng(42, Stream.DARK).random(5))
    assert not np.array_equal(a, make_rng(42, Stream.LASER).random(5))
    assert not np.array_equal(a, make_rng(43, Stream.DARK).random(5))


def test_generators_pass_through():
    rng = np.random.default_rng(1)
    assert make_rng(rng, Stream.DARK) is rng


# result records
def test_records_serialize_to_plain_json(tmp_path):
    record = {
        "array": np.arange(3),
        "scalar": np.float64(1.5),
        "flag": np.bool_(True),
        "missing": math.nan,
        "kind": ExperimentKind.SPTR,
        "path": Path("a/b"),
    }
    path = write_json(record, tmp_path / "result.json")
    assert read_json(path) == {
        "array": [0, 1, 2],
        "flag": True,
        "kind": "sptr",
        "missing": "nan",
        "path": "a/b",
        "scalar": 1.5,
    }
    assert json.loads(json.dumps(to_builtin(record))) == read_json(path)
