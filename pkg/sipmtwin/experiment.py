from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, List

from .config import Scenario


class Experiment(ABC):
    """ One runnable measurement procedure of the digital twin

    Subclasses set `name` to their `ExperimentKind` value and fill `artifacts`
    with every file they write besides the result record.
    """

    name: str = ""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.artifacts: List[Path] = []
        self.manifest: Dict[str, Any] = {}

    @classmethod
    @abstractmethod
    def load(cls, scenario: Scenario) -> "Experiment":
        """ Build the experiment from a validated scenario as alternative constructor """
        pass

    @abstractmethod
    def run(self, output_dir: Path) -> Dict[str, Any]:
        """ Run the experiment, write its artifacts and return the result record """
        pass
