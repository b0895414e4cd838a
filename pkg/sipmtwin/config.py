"""
Scenario configuration.

Every module section is a frozen pydantic model whose validators enforce the
invariants of the quantity it holds, so a scenario that would violate one is
rejected (with the offending field path) before any simulation starts.
"""
import json
import logging
from enum import Enum
from hashlib import sha256
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

logger = logging.getLogger(__name__)

N_ENERGY_BINS = 8

# Reference photopeak energies in keV (nuclide chart values)
NUCLIDE_ENERGIES = {
    "Am-241": 59.54,
    "Co-57": 122.06,
    "Ge-68": 511.0,
    "Cs-137": 661.66,
}


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


# Photodetector
class SipmConfig(_Section):
    """ SiPM device parameters

    **Parameters:**

    * **active_area** - Active area in mm²
    * **breakdown_voltage** - Breakdown voltage in V
    * **max_overvoltage** - Largest allowed bias above breakdown in V
    * **bias_voltage** - Operating bias in V
    * **terminal_capacitance** - Terminal capacitance in F
    * **dark_rate_density** - Dark count rate in counts/s/mm² at the operating bias
    * **pde** - Photon detection efficiency in [0, 1]
    * **single_cell_charge_gain** - Dimensionless gain multiplier of one fired cell
    * **cell_current_per_volt** - Peak avalanche current of one cell per volt of overvoltage, A/V
    * **pulse_rise_time** - Rise time constant of the cell pulse in s
    * **pulse_decay_time** - Decay time constant of the cell pulse in s
    * **intrinsic_transit_jitter_fwhm** - Single-photon transit time spread (FWHM) in s
    """

    active_area: float = Field(4.0, gt=0)
    breakdown_voltage: float = Field(32.5, gt=0)
    max_overvoltage: float = Field(16.0, gt=0)
    bias_voltage: float = 40.0
    terminal_capacitance: float = Field(160e-12, gt=0)
    dark_rate_density: float = Field(125e3, ge=0)
    pde: float = Field(0.4, ge=0, le=1)
    single_cell_charge_gain: float = Field(1.0, gt=0)
    cell_current_per_volt: float = Field(1e-6, gt=0)
    pulse_rise_time: float = Field(1e-9, gt=0)
    pulse_decay_time: float = Field(50e-9, gt=0)
    intrinsic_transit_jitter_fwhm: float = Field(150e-12, ge=0)

    @model_validator(mode="after")
    def _check_bias(self):
        if self.bias_voltage < self.breakdown_voltage:
            raise ValueError(
                f"bias_voltage {self.bias_voltage} V is below breakdown {self.breakdown_voltage} V"
            )
        if self.overvoltage > self.max_overvoltage:
            raise ValueError(
                f"overvoltage {self.overvoltage:.3f} V exceeds max_overvoltage {self.max_overvoltage} V"
            )
        if self.pulse_decay_time <= self.pulse_rise_time:
            raise ValueError("pulse_decay_time must be longer than pulse_rise_time")
        return self

    @property
    def overvoltage(self) -> float:
        return self.bias_voltage - self.breakdown_voltage

    @property
    def dark_rate(self) -> float:
        """ Total dark count rate in counts/s """
        return self.dark_rate_density * self.active_area


class LaserConfig(_Section):
    """ Pulsed laser used for the single-photon timing measurement

    * **jitter_fwhm** - Pulse-to-pulse timing jitter (FWHM) in s
    * **rep_rate** - Pulse repetition rate in Hz
    * **mean_photons_per_pulse** - Mean photons reaching the SiPM per pulse after attenuation
    """

    jitter_fwhm: float = Field(60e-12, ge=0)
    rep_rate: float = Field(2e6, gt=0)
    mean_photons_per_pulse: float = Field(0.25, ge=0)


# Front end
class PreampConfig(_Section):
    """ Small-signal parameters of the current-mode preamplifier

    * **gm1**, **gm2**, **gmf** - Transconductances in S
    * **r_f** - Feedback resistance in Ω (0 disables the feedback boost)
    * **r_b1** - Small-signal resistance of the first bias source in Ω
    * **mirror_ratio_n** - Current mirror size ratio N
    * **r_load** - Load resistance in Ω
    * **bandwidth_limit** - Single-pole model of the internal poles, Hz
    * **bypass_corner** - High-pass corner of the baseline bypass, Hz
    """

    gm1: float = Field(10e-3, gt=0)
    gm2: float = Field(10e-3, gt=0)
    gmf: float = Field(10e-3, gt=0)
    r_f: float = Field(1e3, ge=0)
    r_b1: float = Field(10e3, gt=0)
    mirror_ratio_n: float = Field(8.0, ge=1)
    r_load: float = Field(500.0, gt=0)
    bandwidth_limit: float = Field(1e9, gt=0)
    bypass_corner: float = Field(1.6e6, gt=0)

    @model_validator(mode="after")
    def _check_corners(self):
        if self.bypass_corner >= self.bandwidth_limit:
            raise ValueError("bypass_corner must be below bandwidth_limit")
        return self


class ComparatorConfig(_Section):
    """ Leading-edge comparator

    * **threshold** - Threshold in V
    * **noise_rms** - Input-referred voltage noise in V
    * **min_pulse_width** - Shortest pulse the digital stage resolves, s
    """

    threshold: float = Field(10e-3, gt=0)
    noise_rms: float = Field(1e-3, ge=0)
    min_pulse_width: float = Field(100e-12, ge=0)


class TdcConfig(_Section):
    """ FPGA time-to-digital converter

    * **delta_t_window** - ΔT acceptance window in s
    * **delta_t_lsb** - ΔT quantization step in s
    * **tot_bin_width** - ToT quantization step in s
    * **tot_range** - Upper end of the ToT histogram in s (longer ToT lands in the last bin)
    * **energy_bin_edges** - 7 ascending ToT edges in s; `None` picks uniform edges over the observed ToT
    """

    delta_t_window: float = Field(20e-9, gt=0)
    delta_t_lsb: float = Field(10e-12, gt=0)
    tot_bin_width: float = Field(1e-9, gt=0)
    tot_range: float = Field(256e-9, gt=0)
    energy_bin_edges: Optional[List[float]] = None

    @model_validator(mode="after")
    def _check_tdc(self):
        if self.delta_t_lsb >= self.delta_t_window:
            raise ValueError("delta_t_lsb must be smaller than delta_t_window")
        if self.tot_bin_width > self.tot_range:
            raise ValueError("tot_bin_width must not exceed tot_range")
        edges = self.energy_bin_edges
        if edges is not None:
            if len(edges) != N_ENERGY_BINS - 1:
                raise ValueError(
                    f"energy_bin_edges needs {N_ENERGY_BINS - 1} values, got {len(edges)}"
                )
            if any(b <= a for a, b in zip(edges, edges[1:])):
                raise ValueError("energy_bin_edges must be strictly ascending")
        return self


# Analysis
class FwhmMethod(str, Enum):
    INTERPOLATED = "interpolated"
    GAUSSIAN_FIT = "gaussian_fit"


class AnalysisConfig(_Section):
    """ Histogram analysis knobs

    * **min_prominence** - Peak prominence as a fraction of the histogram maximum
    * **fwhm_method** - `interpolated` or `gaussian_fit`
    * **rebin** - Merge this many ΔT bins before the FWHM extraction
    * **tolerance_bins** - Threshold scan: allowed single-photon peak drift in ToT bins
    * **drop_fraction** - Threshold scan: a step keeping less than this share of the previous counts is the "sudden drop"
    """

    min_prominence: float = Field(0.05, gt=0, lt=1)
    fwhm_method: FwhmMethod = FwhmMethod.INTERPOLATED
    rebin: int = Field(2, ge=1)
    tolerance_bins: int = Field(2, ge=0)
    drop_fraction: float = Field(0.5, ge=0, le=1)


# Experiments
class SptrConfig(_Section):
    """ Single-photon timing run

    * **sample_period** - Waveform sample period in s
    * **include_dark** - Mix dark counts into the laser acquisition
    * **pileup_gap** - Fires closer than this are simulated as one waveform; `None` uses two decay times
    * **bias_sweep** - Optional list of bias voltages to repeat the measurement at
    * **single_photon_gate** - Extract the FWHM only from events whose ToT lies in the single-photon window
    """

    sample_period: float = Field(10e-12, gt=0)
    include_dark: bool = True
    pileup_gap: Optional[float] = Field(None, gt=0)
    bias_sweep: List[float] = []
    single_photon_gate: bool = True


class DarkCountConfig(_Section):
    """ Dark count verification and threshold scan

    * **duration** - Acquisition time the expected count is quoted for, s
    * **simulated_duration** - Acquisition time actually simulated per trial, s
    * **spectrum_duration** - Acquisition time used to build the dark ToT spectrum, s
    * **sample_period** - Waveform sample period for the dark spectrum, s
    * **thresholds** - Ascending comparator thresholds to scan, V (empty skips the scan)
    """

    duration: float = Field(30.0, gt=0)
    simulated_duration: float = Field(0.2, gt=0)
    spectrum_duration: float = Field(2e-3, gt=0)
    sample_period: float = Field(100e-12, gt=0)
    thresholds: List[float] = []

    @model_validator(mode="after")
    def _check_thresholds(self):
        t = self.thresholds
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("thresholds must be strictly ascending")
        return self


class CalibrationSetting(_Section):
    bias_voltage: float
    threshold: float


class CalibrationConfig(_Section):
    """ ToT to energy calibration

    * **dataset** - CSV with `source_label,energy_keV,tot_ns,bias_V,threshold_V`; `None` synthesizes one
    * **true_a**, **true_b**, **true_c**, **true_d** - Generating model of the synthetic dataset
    * **sources** - Nuclide labels (keys of the reference table) used for synthesis
    * **energies** - Overrides of the reference photopeak energies, keV
    * **points_per_source** - Synthetic repeats per source
    * **noise_sigma** - Gaussian ToT noise of the synthetic dataset, ns
    * **settings** - (bias, threshold) pairs to synthesize
    * **initial_d** - Starting value of d for the fit, keV
    """

    dataset: Optional[Path] = None
    true_a: float = 10.0
    true_b: float = 5.0
    true_c: float = 6.0
    true_d: float = 5.0
    sources: List[str] = list(NUCLIDE_ENERGIES)
    energies: Dict[str, float] = {}
    points_per_source: int = Field(10, ge=1)
    noise_sigma: float = Field(0.2, ge=0)
    settings: List[CalibrationSetting] = [
        CalibrationSetting(bias_voltage=40.0, threshold=10e-3)
    ]
    initial_d: float = 1.0

    @model_validator(mode="after")
    def _check_sources(self):
        table = {**NUCLIDE_ENERGIES, **self.energies}
        unknown = [s for s in self.sources if s not in table]
        if unknown:
            raise ValueError(f"no reference energy for sources {unknown}")
        if self.dataset is None and len(self.sources) * self.points_per_source < 4:
            raise ValueError("a synthetic dataset needs at least 4 points")
        return self

    def source_energy(self, label: str) -> float:
        return {**NUCLIDE_ENERGIES, **self.energies}[label]


class ErrorBoxConfig(_Section):
    """ Synthetic one-port fixture error terms (complex values as [re, im]) """

    e00: Tuple[float, float] = (0.05, 0.02)
    e11: Tuple[float, float] = (0.1, -0.05)
    e10e01: Tuple[float, float] = (0.9, 0.1)


class ImpedanceConfig(_Section):
    """ Impedance spectrum processing

    * **dut**, **open**, **short**, **load** - Raw reflection files (`.s1p` or CSV); all four or none
    * **reference_impedance** - System impedance Z0 in Ω
    * **limit** - Impedance limit of the summary, Ω
    * **series_inductance** - Synthetic run: input bond inductance in H
    * **f_start**, **f_stop**, **n_points** - Synthetic frequency grid
    * **error_box** - Synthetic fixture error terms
    * **noise_rms** - Synthetic complex measurement noise on the raw S11
    """

    dut: Optional[Path] = None
    open: Optional[Path] = None
    short: Optional[Path] = None
    load: Optional[Path] = None
    reference_impedance: float = Field(50.0, gt=0)
    limit: float = Field(50.0, gt=0)
    series_inductance: float = Field(2.27e-9, ge=0)
    f_start: float = Field(10e6, gt=0)
    f_stop: float = Field(5e9, gt=0, le=5e9)
    n_points: int = Field(500, ge=2)
    error_box: ErrorBoxConfig = ErrorBoxConfig()
    noise_rms: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _check_files(self):
        files = [self.dut, self.open, self.short, self.load]
        if any(f is not None for f in files) and not all(f is not None for f in files):
            raise ValueError("dut, open, short and load must be given together")
        if self.f_start >= self.f_stop:
            raise ValueError("f_start must be below f_stop")
        return self


class XraySourceConfig(_Section):
    """ Pulsed X-ray source

    * **kvp** - Tube voltage in kV (spectrum endpoint in keV)
    * **e_min** - Low-energy cut of the spectrum, keV
    * **pulse_fwhm** - Source pulse width (FWHM) in s
    * **rep_rate** - Pulse repetition rate in Hz
    * **mean_photons_per_pulse** - Mean detected X-rays per pulse
    """

    kvp: float = Field(120.0, gt=0)
    e_min: float = Field(10.0, gt=0)
    pulse_fwhm: float = Field(80e-12, gt=0)
    rep_rate: float = Field(1e6, gt=0)
    mean_photons_per_pulse: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _check_range(self):
        if self.e_min >= self.kvp:
            raise ValueError("e_min must be below kvp")
        return self


class ScintillatorKind(str, Enum):
    LYSO = "LYSO"
    MQW = "MQW"


class ScintillatorConfig(_Section):
    """ Scintillator light emission

    * **kind** - `LYSO` or `MQW`
    * **decay_time**, **rise_time** - Bi-exponential emission constants, s
    * **light_yield** - Photons per keV
    * **dimensions** - Crystal size in mm (x, y, z)
    * **collection_efficiency** - Fraction of photons reaching the SiPM
    """

    kind: ScintillatorKind = ScintillatorKind.LYSO
    decay_time: float = Field(33e-9, gt=0)
    rise_time: float = Field(70e-12, gt=0)
    light_yield: float = Field(30.0, ge=0)
    dimensions: Tuple[float, float, float] = (3.0, 3.0, 10.0)
    collection_efficiency: float = Field(0.1, ge=0, le=1)

    @model_validator(mode="after")
    def _check_times(self):
        if self.decay_time <= self.rise_time:
            raise ValueError("decay_time must be longer than rise_time")
        return self


class ExtraPathDistribution(str, Enum):
    EXPONENTIAL = "exponential"
    UNIFORM = "uniform"
    FOLDED_NORMAL = "folded_normal"


class GeometryConfig(_Section):
    """ Single-scatter phantom geometry

    * **source_detector_distance** - Direct flight path in m
    * **extra_path_distribution** - Shape of the additional scatter path length
    * **extra_path_mean** - Mean additional path in m
    * **extra_path_spread** - Spread of the additional path in m (uniform width or normal sigma)
    * **scatter_fraction** - Probability that a detected X-ray was scattered
    * **compton_factor_range** - Uniform range of the energy kept after a scatter
    """

    source_detector_distance: float = Field(1.0, gt=0)
    extra_path_distribution: ExtraPathDistribution = ExtraPathDistribution.EXPONENTIAL
    extra_path_mean: float = Field(0.15, ge=0)
    extra_path_spread: float = Field(0.1, ge=0)
    scatter_fraction: float = Field(1.0 / 3.0, ge=0, le=1)
    compton_factor_range: Tuple[float, float] = (0.5, 0.95)

    @model_validator(mode="after")
    def _check_compton(self):
        lo, hi = self.compton_factor_range
        if not 0 < lo <= hi <= 1:
            raise ValueError("compton_factor_range must satisfy 0 < lo <= hi <= 1")
        return self


class TofCtMode(str, Enum):
    PARAMETRIC = "parametric"
    CHAIN = "chain"


class TofCtConfig(_Section):
    """ Scatter rejection study

    * **timing_fwhm** - System timing resolution used for the headline result, s
    * **primary_acceptance** - Fraction of primaries the time window must keep
    * **timing_grid** - Extra timing resolutions for the monotonicity grid, s
    * **acceptance_grid** - Extra acceptance targets for the grid
    * **mode** - `parametric` (gaussian timing) or `chain` (scintillator + SiPM first photon)
    """

    timing_fwhm: float = Field(200e-12, ge=0)
    primary_acceptance: float = Field(0.95, gt=0, le=1)
    timing_grid: List[float] = []
    acceptance_grid: List[float] = []
    mode: TofCtMode = TofCtMode.PARAMETRIC


class SpectrumConfig(_Section):
    """ Energy spectrum reconstruction through the energy channel

    * **sources** - Nuclides to simulate
    * **events_per_source** - Photopeak events per nuclide
    * **integrator_tau** - Energy channel integrator time constant, s
    * **gain** - Energy channel amplifier gain (V per A)
    * **threshold** - Energy channel comparator threshold, V
    * **sample_period** - Energy channel sample period, s
    * **energy_bin_width** - Reconstructed spectrum bin width, keV
    """

    sources: List[str] = list(NUCLIDE_ENERGIES)
    events_per_source: int = Field(500, ge=1)
    integrator_tau: float = Field(200e-9, gt=0)
    gain: float = Field(1e3, gt=0)
    threshold: float = Field(20e-3, gt=0)
    sample_period: float = Field(1e-9, gt=0)
    energy_bin_width: float = Field(5.0, gt=0)


class ExperimentKind(str, Enum):
    SPTR = "sptr"
    DARKCOUNT = "darkcount"
    CALIBRATE = "calibrate"
    IMPEDANCE = "impedance"
    TOFCT = "tofct"
    SPECTRUM = "spectrum"


class Scenario(_Section):
    """ A complete run description: which experiment, its seed and every module section

    Usage:
    ```python
    >>> scenario = load_scenario("tests/data/sptr.yaml", experiment="sptr")
    >>> scenario.experiment
    <ExperimentKind.SPTR: 'sptr'>
    ```
    """

    experiment: ExperimentKind
    seed: int = Field(0, ge=0, lt=2 ** 64)
    trials: Optional[int] = Field(None, gt=0)
    output_dir: Path = Path("results")
    sipm: SipmConfig = SipmConfig()
    laser: LaserConfig = LaserConfig()
    preamp: PreampConfig = PreampConfig()
    comparator: ComparatorConfig = ComparatorConfig()
    tdc: TdcConfig = TdcConfig()
    analysis: AnalysisConfig = AnalysisConfig()
    sptr: SptrConfig = SptrConfig()
    darkcount: DarkCountConfig = DarkCountConfig()
    calibration: CalibrationConfig = CalibrationConfig()
    impedance: ImpedanceConfig = ImpedanceConfig()
    xray: XraySourceConfig = XraySourceConfig()
    scintillator: ScintillatorConfig = ScintillatorConfig()
    geometry: GeometryConfig = GeometryConfig()
    tofct: TofCtConfig = TofCtConfig()
    spectrum: SpectrumConfig = SpectrumConfig()

    @model_validator(mode="after")
    def _check_sampling(self):
        if self.experiment in (ExperimentKind.SPTR, ExperimentKind.DARKCOUNT):
            period = (
                self.sptr.sample_period
                if self.experiment == ExperimentKind.SPTR
                else self.darkcount.sample_period
            )
            if period > 1.0 / (10.0 * self.preamp.bandwidth_limit):
                raise ValueError(
                    f"sample period {period} s undersamples bandwidth_limit {self.preamp.bandwidth_limit} Hz"
                )
        for v in self.sptr.bias_sweep:
            overvoltage = v - self.sipm.breakdown_voltage
            if not 0 <= overvoltage <= self.sipm.max_overvoltage:
                raise ValueError(
                    f"bias_sweep value {v} V is outside the allowed overvoltage range"
                )
        return self

    def canonical_json(self) -> str:
        """ Canonical JSON of everything that determines the results (the output directory does not) """
        payload = self.model_dump(mode="json", exclude={"output_dir"})
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def with_overrides(
        self,
        experiment: Optional[ExperimentKind] = None,
        seed: Optional[int] = None,
        trials: Optional[int] = None,
        output_dir: Optional[Union[str, Path]] = None,
    ) -> "Scenario":
        """ Return a validated copy with command line overrides applied """
        data = self.model_dump()
        if experiment is not None:
            data["experiment"] = experiment
        if seed is not None:
            data["seed"] = seed
        if trials is not None:
            data["trials"] = trials
        if output_dir is not None:
            data["output_dir"] = Path(output_dir)
        return Scenario.model_validate(data)


def load_scenario(
    path: Union[str, Path], experiment: Optional[ExperimentKind] = None
) -> Scenario:
    """ Parse a YAML scenario file

    * **path** - Path to the YAML file
    * **experiment** - Fills in `experiment` when the file leaves it out
    **return** - A validated `Scenario`
    """
    with open(path, "r") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: scenario must be a mapping of sections")
    if experiment is not None:
        data["experiment"] = experiment
    logger.debug(f"Loaded scenario sections {sorted(data)} from {path}")
    return Scenario.model_validate(data)
