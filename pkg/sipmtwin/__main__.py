import logging
from pathlib import Path
from typing import Optional

import click
import yaml
from pydantic import ValidationError

from . import __version__
from .config import ExperimentKind, load_scenario
from .errors import SipmTwinError
from .experiments import EasyScenarioRunner
from .file_utils import Tqdm

logger = logging.getLogger(__name__)


@click.group(
    help="sipmtwin: a digital twin of a SiPM fast readout chain, from photon to TDC histogram"
)
@click.version_option(version=__version__)
@click.option("-v", "--verbose", is_flag=True, help="Log per-stage detail")
@click.option(
    "--quiet-progress", is_flag=True, help="Refresh progress bars every 10 s (for log files)"
)
def _main(verbose: bool, quiet_progress: bool) -> None:
    logging.basicConfig(
        format="%(asctime)s - %(levelname)s - %(name)s -   %(message)s",
        datefmt="%m/%d/%Y %H:%M:%S",
        level=logging.DEBUG if verbose else logging.INFO,
    )
    Tqdm.set_slower_interval(quiet_progress)


def _run(
    experiment: ExperimentKind,
    config: Path,
    seed: Optional[int],
    out: Optional[Path],
    trials: Optional[int],
) -> None:
    try:
        scenario = load_scenario(config, experiment=experiment.value)
        scenario = scenario.with_overrides(seed=seed, trials=trials, output_dir=out)
    except ValidationError as err:
        raise click.ClickException(f"invalid scenario {config}:\n{err}")
    except (ValueError, yaml.YAMLError) as err:
        raise click.ClickException(str(err))
    try:
        record = EasyScenarioRunner().run(scenario)
    except SipmTwinError as err:
        raise click.ClickException(str(err))
    click.echo(f"{experiment.value}: results in {scenario.output_dir} ({len(record)} fields)")


def _experiment_command(experiment: ExperimentKind, help_text: str):
    @_main.command(name=experiment.value, help=help_text)
    @click.option(
        "-c",
        "--config",
        required=True,
        type=click.Path(exists=True, dir_okay=False, path_type=Path),
        help="YAML scenario file",
    )
    @click.option("-s", "--seed", type=click.IntRange(0, 2 ** 64 - 1), help="Override the scenario seed")
    @click.option(
        "-o", "--out", type=click.Path(file_okay=False, path_type=Path), help="Output directory"
    )
    @click.option("-n", "--trials", type=click.IntRange(min=1), help="Override the number of trials")
    def _command(config: Path, seed: Optional[int], out: Optional[Path], trials: Optional[int]):
        _run(experiment, config, seed, out, trials)

    return _command


_experiment_command(ExperimentKind.SPTR, "Laser single-photon time resolution")
_experiment_command(ExperimentKind.DARKCOUNT, "Dark count rate verification and threshold scan")
_experiment_command(ExperimentKind.CALIBRATE, "ToT to energy calibration fit")
_experiment_command(ExperimentKind.IMPEDANCE, "Open/short/load corrected input impedance")
_experiment_command(ExperimentKind.TOFCT, "X-ray time-of-flight scatter rejection")
_experiment_command(ExperimentKind.SPECTRUM, "Energy spectrum through the energy channel")


if __name__ == "__main__":
    _main(prog_name="sipmtwin")
