from importlib import resources

# Easy Modules
from .photodetector import EasySipm
from .frontend import EasyFrontend
from .tdc import EasyTdc
from .analysis import EasySptrAnalysis
from .calibration import EasyCalibrator
from .impedance import EasyImpedance
from .tofct import EasyTofCt

# Scenarios and experiments
from .config import Scenario, load_scenario
from .experiments import EasyScenarioRunner

__version__ = (
    resources.files("sipmtwin").joinpath("VERSION.txt").read_text(encoding="UTF-8").strip()
)

__all__ = [
    "__version__",
    "EasySipm",
    "EasyFrontend",
    "EasyTdc",
    "EasySptrAnalysis",
    "EasyCalibrator",
    "EasyImpedance",
    "EasyTofCt",
    "Scenario",
    "load_scenario",
    "EasyScenarioRunner",
]
