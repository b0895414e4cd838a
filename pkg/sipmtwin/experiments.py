"""
The runnable experiments of the digital twin and the scenario runner that
dispatches to them.

Every experiment writes its artifacts below the output directory and returns a
JSON-ready result record; the runner adds the record and the run manifest.
"""
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Type

import numpy as np
import scipy

from .analysis import EasySptrAnalysis, ScanResult, quadrature_sum, verify_dark_rate
from .calibration import (
    CalibrationDataset,
    CalibrationModel,
    EasyCalibrator,
    synthesize_dataset,
)
from .config import ComparatorConfig, ExperimentKind, Scenario, SipmConfig
from .errors import ExperimentError, NotFoundError, SipmTwinError
from .experiment import Experiment
from .file_utils import write_json, write_manifest
from .frontend import (
    EasyFrontend,
    input_impedance,
    input_pole_frequency,
    pole_shift_factor,
    voltage_mode_pole_frequency,
)
from .impedance import (
    EasyImpedance,
    synthesize_input_impedance,
    synthetic_measurement,
    write_impedance_csv,
    write_reflection,
)
from .photodetector import (
    EasySipm,
    PhotonEventList,
    PhotonOrigin,
    avalanche_current,
    detect_photons,
    merge_events,
    poisson_counts,
)
from .rng import Stream, make_rng
from .tdc import EasyTdc, Histogram, accumulate, n_tot_codes, tot_window
from .tofct import EasyTofCt, TofEvents, scintillation_photons
from .units import FWHM_PER_SIGMA, NANOSECOND, PICOSECOND

logger = logging.getLogger(__name__)

DEFAULT_LASER_PULSES = 100_000
DEFAULT_DARK_TRIALS = 100
DEFAULT_XRAY_EVENTS = 100_000


def _tot_histogram(tot: np.ndarray, tdc_cfg) -> Histogram:
    h = Histogram.uniform(0.0, tdc_cfg.tot_bin_width, n_tot_codes(tdc_cfg))
    h.fill(tot, clamp=True)
    return h


class SptrExperiment(Experiment):
    """ Laser single-photon timing: SiPM, front end, TDC and FWHM extraction

    `trials` is the number of laser pulses. With a `bias_sweep` the measurement
    is repeated at every listed bias.
    """

    name = ExperimentKind.SPTR.value

    @classmethod
    def load(cls, scenario: Scenario) -> "SptrExperiment":
        return cls(scenario)

    @property
    def n_pulses(self) -> int:
        return self.scenario.trials or DEFAULT_LASER_PULSES

    def predicted_fwhm(self, frontend: EasyFrontend) -> float:
        """ Quadrature sum of laser, SiPM transit, comparator and TDC quantization jitter """
        sc = self.scenario
        response = frontend.response(1)
        comparator = 0.0
        if response is not None and response.slope_up > 0:
            comparator = FWHM_PER_SIGMA * sc.comparator.noise_rms / response.slope_up
        quantization = FWHM_PER_SIGMA * sc.tdc.delta_t_lsb / math.sqrt(12.0)
        return quadrature_sum(
            sc.laser.jitter_fwhm,
            sc.sipm.intrinsic_transit_jitter_fwhm,
            comparator,
            quantization,
        )

    def single_photon_window(self, frontend: EasyFrontend) -> Optional[Tuple[float, float]]:
        """ ToT window around the single-photon response reaching half way to the
        two-photon one, `None` when a single photon stays below threshold """
        one, two = frontend.response(1), frontend.response(2)
        if one is None or two is None:
            return None
        half = 0.5 * (two.tot - one.tot)
        return one.tot - half, one.tot + half

    def measure(self, sipm_cfg: SipmConfig, output_dir: Path) -> Dict[str, Any]:
        sc = self.scenario
        sipm = EasySipm(sipm_cfg, seed=sc.seed)
        sync, fires = sipm.laser_fires(sc.laser, self.n_pulses)
        if sc.sptr.include_dark:
            dark = sipm.dark_counts(self.n_pulses / sc.laser.rep_rate)
            fires = merge_events(fires, dark)

        frontend = EasyFrontend(
            sipm_cfg,
            sc.preamp,
            sc.comparator,
            sample_period=sc.sptr.sample_period,
            pileup_gap=sc.sptr.pileup_gap,
        )
        hits = frontend.readout(fires, seed=sc.seed)
        tdc = EasyTdc(sc.tdc)
        histograms = tdc.acquire(sync, hits)
        self.artifacts.extend(histograms.write_csv(output_dir))

        analysis = EasySptrAnalysis(sc.analysis)
        window = self.single_photon_window(frontend) if sc.sptr.single_photon_gate else None
        if window is None:
            record = analysis.sptr(histograms.delta_t).to_record()
        else:
            gated = accumulate(tot_window(tdc.records, *window, sc.tdc), sc.tdc)
            self.artifacts.append(gated.delta_t.to_csv(output_dir / "delta_t_single_photon.csv"))
            record = analysis.sptr(gated.delta_t).to_record()
            record["fwhm_all_ps"] = analysis.sptr(histograms.delta_t).fwhm / PICOSECOND
        record["gate_tot_ns"] = None if window is None else [w / NANOSECOND for w in window]
        try:
            record["single_photon_tot_ns"] = (
                analysis.single_photon_tot(histograms.tot) / NANOSECOND
            )
        except NotFoundError:
            record["single_photon_tot_ns"] = None
        record.update(
            bias_V=sipm_cfg.bias_voltage,
            overvoltage_V=sipm_cfg.overvoltage,
            predicted_fwhm_ps=self.predicted_fwhm(frontend) / PICOSECOND,
            single_photon_amplitude_V=frontend.single_photon_amplitude(),
            n_fires=len(fires),
            n_hits=len(hits),
            out_of_window=histograms.out_of_window,
            energy_bin_edges_ns=[e / NANOSECOND for e in tdc.edges],
        )
        return record

    def run(self, output_dir: Path) -> Dict[str, Any]:
        sc = self.scenario
        record = self.measure(sc.sipm, output_dir)
        record["n_pulses"] = self.n_pulses
        if sc.sptr.bias_sweep:
            sweep = []
            for bias in sorted(sc.sptr.bias_sweep):
                cfg = sc.sipm.model_copy(update={"bias_voltage": bias})
                logger.info(f"Bias sweep: {bias} V ({cfg.overvoltage:.2f} V overvoltage)")
                sweep.append(self.measure(cfg, output_dir / f"bias_{bias:g}V"))
            record["bias_sweep"] = sweep
        return record


class DarkCountExperiment(Experiment):
    """ Dark count expectation, Poisson verification over trials, dark ToT spectrum
    and the optional threshold scan """

    name = ExperimentKind.DARKCOUNT.value

    @classmethod
    def load(cls, scenario: Scenario) -> "DarkCountExperiment":
        return cls(scenario)

    def _frontend(self, comparator: ComparatorConfig) -> EasyFrontend:
        sc = self.scenario
        return EasyFrontend(
            sc.sipm, sc.preamp, comparator, sample_period=sc.darkcount.sample_period
        )

    def _tot_spectrum(self, fires: PhotonEventList, threshold: float) -> Histogram:
        comparator = self.scenario.comparator.model_copy(update={"threshold": threshold})
        hits = self._frontend(comparator).readout(fires, seed=self.scenario.seed)
        return _tot_histogram(hits.tot, self.scenario.tdc)

    def run(self, output_dir: Path) -> Dict[str, Any]:
        sc, cfg = self.scenario, self.scenario.darkcount
        sipm = EasySipm(sc.sipm, seed=sc.seed)
        expected = sipm.expected_dark_count(cfg.duration)
        self.manifest["expected_count"] = int(round(expected))

        trials = sc.trials or DEFAULT_DARK_TRIALS
        counts = poisson_counts(sc.sipm, cfg.simulated_duration, trials, sc.seed)
        z = np.array([verify_dark_rate(c, sc.sipm, cfg.simulated_duration) for c in counts])
        logger.info(
            f"Dark counts over {trials} trials: mean {np.mean(counts):.1f}, "
            f"max |z| {np.abs(z).max():.2f}"
        )

        fires = sipm.dark_counts(cfg.spectrum_duration)
        spectrum = self._tot_spectrum(fires, sc.comparator.threshold)
        self.artifacts.append(spectrum.to_csv(output_dir / "dark_tot.csv"))
        analysis = EasySptrAnalysis(sc.analysis)
        try:
            single_tot = analysis.single_photon_tot(spectrum)
        except NotFoundError:
            single_tot = None

        record = {
            "expected_count": int(round(expected)),
            "duration_s": cfg.duration,
            "dark_rate_cps": sc.sipm.dark_rate,
            "simulated_duration_s": cfg.simulated_duration,
            "simulated_expected": sipm.expected_dark_count(cfg.simulated_duration),
            "trials": trials,
            "counts": counts,
            "z_scores": z,
            "fraction_within_5_sigma": float(np.mean(np.abs(z) <= 5.0)),
            "single_photon_tot_ns": None if single_tot is None else single_tot / NANOSECOND,
            "spectrum_events": spectrum.total,
        }
        if cfg.thresholds:
            scan: ScanResult = analysis.threshold_scan(
                lambda th: self._tot_spectrum(fires, th), cfg.thresholds, reference_tot=single_tot
            )
            record["threshold_scan"] = scan.to_record()
            record["single_photon_amplitude_V"] = self._frontend(
                sc.comparator
            ).single_photon_amplitude()
        return record


class CalibrateExperiment(Experiment):
    """ ToT to energy calibration of a measured or synthesized dataset, one fit per setting """

    name = ExperimentKind.CALIBRATE.value

    @classmethod
    def load(cls, scenario: Scenario) -> "CalibrateExperiment":
        return cls(scenario)

    @property
    def true_model(self) -> CalibrationModel:
        cfg = self.scenario.calibration
        return CalibrationModel(cfg.true_a, cfg.true_b, cfg.true_c, cfg.true_d)

    def dataset(self) -> CalibrationDataset:
        cfg = self.scenario.calibration
        if cfg.dataset is not None:
            logger.info(f"Reading calibration points from {cfg.dataset}")
            return CalibrationDataset.from_csv(cfg.dataset)
        rng = make_rng(self.scenario.seed, Stream.CALIBRATION)
        energies = {label: cfg.source_energy(label) for label in cfg.sources}
        parts = [
            synthesize_dataset(
                self.true_model,
                energies,
                cfg.points_per_source,
                cfg.noise_sigma,
                rng,
                setting=(s.bias_voltage, s.threshold),
            )
            for s in cfg.settings
        ]
        return CalibrationDataset(
            np.concatenate([p.energies for p in parts]),
            np.concatenate([p.tots for p in parts]),
            [label for p in parts for label in p.sources],
            np.concatenate([p.bias for p in parts]),
            np.concatenate([p.threshold for p in parts]),
        )

    def run(self, output_dir: Path) -> Dict[str, Any]:
        cfg = self.scenario.calibration
        ds = self.dataset()
        self.artifacts.append(ds.to_csv(output_dir / "calibration_points.csv"))
        models = EasyCalibrator(initial_d=cfg.initial_d).calibrate(ds)
        record: Dict[str, Any] = {
            "n_points": len(ds),
            "models": [m.to_record() for m in models.values()],
        }
        if cfg.dataset is None:
            truth = self.true_model.params
            record["true_model"] = self.true_model.to_record()
            record["max_relative_error"] = max(
                float(np.max(np.abs(m.params - truth) / np.abs(truth))) for m in models.values()
            )
        return record


class ImpedanceExperiment(Experiment):
    """ Input impedance spectrum: measured files, or a synthetic DUT seen through a
    fixture error box, corrected with open/short/load """

    name = ExperimentKind.IMPEDANCE.value

    @classmethod
    def load(cls, scenario: Scenario) -> "ImpedanceExperiment":
        return cls(scenario)

    def _synthesize_raw(self, raw_dir: Path) -> List[Path]:
        sc, cfg = self.scenario, self.scenario.impedance
        freqs = np.linspace(cfg.f_start, cfg.f_stop, cfg.n_points)
        z_true = synthesize_input_impedance(sc.preamp, cfg.series_inductance, freqs)
        box = cfg.error_box
        error_box = tuple(complex(*v) for v in (box.e00, box.e11, box.e10e01))
        sweeps = synthetic_measurement(
            z_true,
            error_box,
            cfg.reference_impedance,
            cfg.noise_rms,
            make_rng(sc.seed, Stream.IMPEDANCE),
        )
        names = ("dut", "open", "short", "load")
        return [write_reflection(s, raw_dir / f"{n}.s1p") for s, n in zip(sweeps, names)]

    def run(self, output_dir: Path) -> Dict[str, Any]:
        sc, cfg = self.scenario, self.scenario.impedance
        if cfg.dut is not None:
            paths = [cfg.dut, cfg.open, cfg.short, cfg.load]
        else:
            paths = self._synthesize_raw(output_dir / "raw")
            self.artifacts.extend(paths)
        impedance = EasyImpedance(cfg.reference_impedance, cfg.limit)
        spectrum = impedance.measure(*paths)
        self.artifacts.append(write_impedance_csv(spectrum, output_dir / "impedance.csv"))
        c_sipm = sc.sipm.terminal_capacitance
        return {
            "f_below_limit_hz": impedance.bandwidth_below_limit(spectrum),
            "limit_ohm": cfg.limit,
            "n_points": len(spectrum),
            "n_flagged": int(np.count_nonzero(spectrum.flagged)),
            "input_impedance_ohm": input_impedance(sc.preamp),
            "input_pole_hz": input_pole_frequency(sc.preamp, c_sipm),
            "voltage_mode_pole_hz": voltage_mode_pole_frequency(cfg.reference_impedance, c_sipm),
            "pole_shift_factor": pole_shift_factor(sc.preamp, c_sipm, cfg.reference_impedance),
            "synthetic": cfg.dut is None,
        }


class TofCtExperiment(Experiment):
    """ Scatter rejection with a time window; `trials` is the number of X-rays """

    name = ExperimentKind.TOFCT.value

    @classmethod
    def load(cls, scenario: Scenario) -> "TofCtExperiment":
        return cls(scenario)

    def run(self, output_dir: Path) -> Dict[str, Any]:
        sc = self.scenario
        tofct = EasyTofCt(
            sc.xray, sc.geometry, sc.tofct, sc.scintillator, sc.sipm, seed=sc.seed
        )
        events = tofct.simulate(sc.trials or DEFAULT_XRAY_EVENTS)
        headline = tofct.reject(events)
        self.artifacts.extend(self._arrival_histograms(tofct.measure(events), output_dir))

        record = headline.to_record()
        record["mode"] = sc.tofct.mode.value
        if sc.tofct.timing_grid or sc.tofct.acceptance_grid:
            grid = tofct.grid(events)
            record["grid"] = [r.to_record() for r in grid]
            record["monotone_in_timing"] = _monotone_in_timing(grid)
        return record

    def _arrival_histograms(self, measured: TofEvents, output_dir: Path) -> List[Path]:
        width = self.scenario.tdc.delta_t_lsb
        lo = math.floor(measured.measured_time.min() / width) * width
        n_bins = int(math.ceil((measured.measured_time.max() - lo) / width)) + 1
        paths = []
        for label, mask in (("primary", ~measured.scattered), ("scattered", measured.scattered)):
            h = Histogram.uniform(lo, width, n_bins)
            h.fill(measured.measured_time[mask], clamp=True)
            paths.append(h.to_csv(output_dir / f"arrival_{label}.csv"))
        return paths


def _monotone_in_timing(grid) -> bool:
    """ Reduction never grows with worse timing at any fixed acceptance """
    by_acceptance: Dict[float, List] = {}
    for r in grid:
        by_acceptance.setdefault(r.target_acceptance, []).append(r)
    for rows in by_acceptance.values():
        rows = sorted(rows, key=lambda r: r.timing_fwhm)
        if any(b.reduction_pct > a.reduction_pct for a, b in zip(rows, rows[1:])):
            return False
    return True


class SpectrumExperiment(Experiment):
    """ Energy spectrum reconstruction

    Photopeak X-rays of every nuclide scintillate; the SiPM current runs through
    the energy channel integrator and its comparator, the ToT of each event is
    calibrated against the known energies and inverted back to energy.
    """

    name = ExperimentKind.SPECTRUM.value

    @classmethod
    def load(cls, scenario: Scenario) -> "SpectrumExperiment":
        return cls(scenario)

    @property
    def event_spacing(self) -> float:
        return 20.0 * self.scenario.spectrum.integrator_tau

    def source_tots(self, energy: float, seed: np.random.Generator) -> np.ndarray:
        """ Energy channel ToT in s of every event of one nuclide, NaN where no hit """
        sc, cfg = self.scenario, self.scenario.spectrum
        n = cfg.events_per_source
        starts = (np.arange(n) + 0.5) * self.event_spacing
        events = TofEvents(starts, np.full(n, energy), np.zeros(n, dtype=bool))
        times, _ = scintillation_photons(events, sc.scintillator, seed)
        incident = PhotonEventList(np.sort(times), PhotonOrigin.SCINTILLATION)
        fires = detect_photons(sc.sipm, incident, seed)

        frontend = EasyFrontend(sc.sipm, sc.preamp, sc.comparator)
        comparator = sc.comparator.model_copy(update={"threshold": cfg.threshold})
        hits = frontend.energy_hits(
            avalanche_current(sc.sipm, fires),
            cfg.integrator_tau,
            cfg.gain,
            comparator,
            cfg.sample_period,
            span=n * self.event_spacing,
            seed=seed,
        )
        first = np.searchsorted(hits.leading_edge, starts, side="left")
        tots = np.full(n, np.nan)
        idx = np.flatnonzero(first < len(hits))
        idx = idx[hits.leading_edge[first[idx]] < starts[idx] + self.event_spacing / 2]
        tots[idx] = hits.tot[first[idx]]
        return tots

    def run(self, output_dir: Path) -> Dict[str, Any]:
        sc, cfg = self.scenario, self.scenario.spectrum
        rng = make_rng(sc.seed, Stream.SPECTRUM)
        energies, tots, labels = [], [], []
        for label in cfg.sources:
            energy = sc.calibration.source_energy(label)
            t = self.source_tots(energy, rng)
            t = t[np.isfinite(t)]
            logger.info(f"{label}: {t.size} of {cfg.events_per_source} events above threshold")
            energies.append(np.full(t.size, energy))
            tots.append(t / NANOSECOND)
            labels.extend([label] * t.size)

        ds = CalibrationDataset(np.concatenate(energies), np.concatenate(tots), labels)
        self.artifacts.append(ds.to_csv(output_dir / "spectrum_points.csv"))
        calibrator = EasyCalibrator(initial_d=sc.calibration.initial_d)
        model = calibrator.fit(ds)
        reconstructed = calibrator.energy(ds.tots, model, errors="nan", extrapolate=True)

        top = max(sc.calibration.source_energy(label) for label in cfg.sources)
        n_bins = int(math.ceil(1.5 * top / cfg.energy_bin_width))
        h = Histogram.uniform(0.0, cfg.energy_bin_width, n_bins)
        h.fill(reconstructed[np.isfinite(reconstructed)], clamp=True)
        self.artifacts.append(h.to_csv(output_dir / "energy_spectrum.csv"))

        sources = []
        for label in cfg.sources:
            mask = np.array([s == label for s in ds.sources], dtype=bool)
            e = reconstructed[mask]
            e = e[np.isfinite(e)]
            median = float(np.median(e)) if e.size else None
            sources.append(
                {
                    "source": label,
                    "energy_keV": sc.calibration.source_energy(label),
                    "n_events": int(mask.sum()),
                    "mean_tot_ns": float(ds.tots[mask].mean()) if mask.any() else None,
                    "reconstructed_keV": median,
                    "resolution_pct": (
                        FWHM_PER_SIGMA * float(np.std(e)) / median * 100.0
                        if e.size > 1 and median
                        else None
                    ),
                }
            )
        return {"model": model.to_record(), "sources": sources, "n_events": len(ds)}


EXPERIMENTS: Dict[ExperimentKind, Type[Experiment]] = {
    ExperimentKind.SPTR: SptrExperiment,
    ExperimentKind.DARKCOUNT: DarkCountExperiment,
    ExperimentKind.CALIBRATE: CalibrateExperiment,
    ExperimentKind.IMPEDANCE: ImpedanceExperiment,
    ExperimentKind.TOFCT: TofCtExperiment,
    ExperimentKind.SPECTRUM: SpectrumExperiment,
}


class EasyScenarioRunner:
    """ Scenario runner

    Usage:
    ```python
    >>> runner = EasyScenarioRunner()
    >>> record = runner.run(load_scenario("tests/data/sptr.yaml", experiment="sptr"))
    ```

    Writes `result.json` and `manifest.txt` plus the experiment's CSV artifacts into
    the scenario's output directory.
    """

    def __init__(self):
        self.experiments: Dict[ExperimentKind, Experiment] = {}

    def run(self, scenario: Scenario, output_dir: Optional[Path] = None) -> Dict[str, Any]:
        """ Run the scenario's experiment

        * **scenario** - Validated `Scenario`
        * **output_dir** - Overrides `scenario.output_dir`
        **return** - The result record written to `result.json`
        """
        from . import __version__

        output_dir = Path(output_dir or scenario.output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        experiment = EXPERIMENTS[scenario.experiment].load(scenario)
        self.experiments[scenario.experiment] = experiment
        logger.info(f"Running {experiment.name} with seed {scenario.seed} into {output_dir}")
        try:
            record = experiment.run(output_dir)
        except SipmTwinError as err:
            raise ExperimentError(experiment.name, err) from err

        record = {"experiment": experiment.name, "seed": scenario.seed, **record}
        write_json(record, output_dir / "result.json")
        write_manifest(
            output_dir / "manifest.txt",
            {
                "experiment": experiment.name,
                "config_hash": scenario.config_hash(),
                "seed": scenario.seed,
                "sipmtwin_version": __version__,
                "numpy_version": np.__version__,
                "scipy_version": scipy.__version__,
                "artifacts": len(experiment.artifacts),
                **experiment.manifest,
            },
        )
        logger.info(f"Wrote {len(experiment.artifacts) + 2} files to {output_dir}")
        return record
