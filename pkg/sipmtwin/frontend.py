"""
Small-signal model of the current-mode readout channel.

The timing path is a transimpedance gain followed by one low-pass pole (the
slower of the SiPM input pole and the amplifier bandwidth) and the high-pass of
the baseline bypass; the energy path is an amplifier with a leaky integrator.
Both are linear time-invariant and are evaluated with `scipy.signal.lfilter`
on uniformly sampled currents. The comparator turns a waveform into
`DigitalHit`s with a noise/slope timing jitter.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Union

import numpy as np
from scipy.signal import lfilter

from .config import ComparatorConfig, PreampConfig, SipmConfig
from .errors import InvalidArgumentError
from .file_utils import Tqdm, write_csv
from .photodetector import CurrentPulseTrain, PhotonEventList, avalanche_current
from .rng import SeedLike, Stream, make_rng

logger = logging.getLogger(__name__)


def input_impedance(cfg: PreampConfig) -> float:
    """ Input resistance of the regulated input stage, 1 / (gm1 gm2 R_B1 (1 + gmf R_f)) """
    return 1.0 / (cfg.gm1 * cfg.gm2 * cfg.r_b1 * (1.0 + cfg.gmf * cfg.r_f))


def transimpedance_gain(cfg: PreampConfig) -> float:
    """ DC gain v_out / i_in = N R_L in Ω """
    return cfg.mirror_ratio_n * cfg.r_load


def input_pole_frequency(cfg: PreampConfig, c_sipm: float) -> float:
    """ Pole formed by the SiPM capacitance against the preamplifier input resistance """
    if c_sipm <= 0:
        raise InvalidArgumentError(f"c_sipm must be positive, got {c_sipm}")
    return 1.0 / (2.0 * math.pi * input_impedance(cfg) * c_sipm)


def voltage_mode_pole_frequency(r_parallel: float, c_sipm: float) -> float:
    """ Pole of a voltage-mode readout sensing the SiPM across `r_parallel` """
    if r_parallel <= 0 or c_sipm <= 0:
        raise InvalidArgumentError("r_parallel and c_sipm must be positive")
    return 1.0 / (2.0 * math.pi * r_parallel * c_sipm)


def pole_shift_factor(cfg: PreampConfig, c_sipm: float, r_parallel: float = 50.0) -> float:
    """ How far the current-mode input pole sits above the voltage-mode pole """
    return input_pole_frequency(cfg, c_sipm) / voltage_mode_pole_frequency(
        r_parallel, c_sipm
    )


@dataclass
class AnalogWaveform:
    """ Uniformly sampled voltage trace starting at `t0` """

    t0: float
    sample_period: float
    samples: np.ndarray

    def __len__(self) -> int:
        return self.samples.size

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.samples.size) * self.sample_period

    @property
    def duration(self) -> float:
        return self.samples.size * self.sample_period


@dataclass(frozen=True)
class DigitalHit:
    leading_edge: float
    tot: float
    slope: float = 0.0

    def __post_init__(self):
        if self.tot <= 0:
            raise InvalidArgumentError(f"tot must be positive, got {self.tot}")


@dataclass
class DigitalHits:
    """ Comparator hits as parallel arrays (leading edge, ToT and leading-edge slope) """

    leading_edge: np.ndarray
    tot: np.ndarray
    slope: np.ndarray

    @classmethod
    def empty(cls) -> "DigitalHits":
        return cls(np.empty(0), np.empty(0), np.empty(0))

    @classmethod
    def concatenate(cls, parts: List["DigitalHits"]) -> "DigitalHits":
        if not parts:
            return cls.empty()
        hits = cls(
            np.concatenate([p.leading_edge for p in parts]),
            np.concatenate([p.tot for p in parts]),
            np.concatenate([p.slope for p in parts]),
        )
        order = np.argsort(hits.leading_edge, kind="stable")
        return hits.select(order)

    def __len__(self) -> int:
        return self.leading_edge.size

    def __iter__(self) -> Iterator[DigitalHit]:
        for t, w, s in zip(self.leading_edge, self.tot, self.slope):
            yield DigitalHit(float(t), float(w), float(s))

    def select(self, index) -> "DigitalHits":
        return DigitalHits(self.leading_edge[index], self.tot[index], self.slope[index])


@dataclass(frozen=True)
class PulseResponse:
    """ Noiseless comparator response to one isolated fire, relative to the fire time """

    n_cells: int
    peak: float
    delay: float
    tot: float
    slope_up: float
    slope_down: float


def _check_sampling(cfg: PreampConfig, sample_period: float, span: float) -> int:
    if sample_period <= 0 or span <= 0:
        raise InvalidArgumentError("sample_period and span must be positive")
    if sample_period > (1.0 + 1e-9) / (10.0 * cfg.bandwidth_limit):
        raise InvalidArgumentError(
            f"sample_period {sample_period} s undersamples bandwidth_limit {cfg.bandwidth_limit} Hz"
        )
    return int(round(span / sample_period))


def _pole_factor(corner: float, sample_period: float) -> float:
    return math.exp(-2.0 * math.pi * corner * sample_period)


def _shape_current(
    current: np.ndarray, cfg: PreampConfig, c_sipm: float, sample_period: float
) -> np.ndarray:
    """ Gain, low-pass and bypass high-pass along the last axis """
    lp_corner = min(input_pole_frequency(cfg, c_sipm), cfg.bandwidth_limit)
    a_lp = _pole_factor(lp_corner, sample_period)
    a_hp = _pole_factor(cfg.bypass_corner, sample_period)
    v = lfilter([1.0 - a_lp], [1.0, -a_lp], transimpedance_gain(cfg) * current, axis=-1)
    return lfilter([a_hp, -a_hp], [1.0, -a_hp], v, axis=-1)


def shape_pulse(
    train: CurrentPulseTrain,
    cfg: PreampConfig,
    sample_period: float,
    span: float,
    t0: float = 0.0,
) -> AnalogWaveform:
    """ Timing-path output voltage for a current pulse train

    * **train** - Avalanche current
    * **cfg** - Preamplifier parameters
    * **sample_period** - Sample period in s, at most 1 / (10 `bandwidth_limit`)
    * **span** - Length of the simulated window in s
    * **t0** - Window start
    **return** - `AnalogWaveform`
    """
    n = _check_sampling(cfg, sample_period, span)
    current = train.sample(t0, sample_period, n)
    samples = _shape_current(current, cfg, train.source_capacitance, sample_period)
    return AnalogWaveform(t0, sample_period, samples)


def energy_channel_shape(
    train: CurrentPulseTrain,
    integrator_tau: float,
    sample_period: float,
    span: float,
    gain: float = 1.0,
    t0: float = 0.0,
) -> AnalogWaveform:
    """ Amplifier and leaky integrator of the energy path

    The output obeys ``tau dv/dt = -v + gain * i``, so a pulse much shorter than
    `integrator_tau` peaks at about ``gain * charge / tau``.

    * **integrator_tau** - Integrator time constant in s
    * **gain** - Amplifier gain in V/A
    """
    if integrator_tau <= train.rise_time:
        raise InvalidArgumentError("integrator_tau must be much longer than the pulse rise time")
    if sample_period <= 0 or span <= 0:
        raise InvalidArgumentError("sample_period and span must be positive")
    n = int(round(span / sample_period))
    a = math.exp(-sample_period / integrator_tau)
    current = train.sample(t0, sample_period, n)
    samples = lfilter([1.0 - a], [1.0, -a], gain * current)
    return AnalogWaveform(t0, sample_period, samples)


class Crossings(NamedTuple):
    """ Paired threshold crossings of a noiseless waveform """

    leading: np.ndarray
    trailing: np.ndarray
    slope_up: np.ndarray
    slope_down: np.ndarray


def find_crossings(
    samples: np.ndarray, threshold: float, t0: float, sample_period: float
) -> Crossings:
    """ Noiseless threshold crossings, linearly interpolated between samples

    A pulse already above threshold at the first sample has no leading edge and
    is skipped; a pulse still above threshold at the last sample never closes
    and is dropped.
    """
    above = samples >= threshold
    step = np.diff(above.astype(np.int8))
    up = np.flatnonzero(step == 1) + 1
    down = np.flatnonzero(step == -1) + 1
    if above.size and above[0]:
        down = down[1:]
    n = min(up.size, down.size)
    if up.size > n:
        logger.debug(f"Dropped {up.size - n} hit(s) still above threshold at window end")
    up, down = up[:n], down[:n]

    rise = samples[up] - samples[up - 1]
    fall = samples[down - 1] - samples[down]
    return Crossings(
        leading=t0 + (up - 1 + (threshold - samples[up - 1]) / rise) * sample_period,
        trailing=t0 + (down - 1 + (samples[down - 1] - threshold) / fall) * sample_period,
        slope_up=rise / sample_period,
        slope_down=-fall / sample_period,
    )


def _apply_jitter(
    edges: Crossings, cfg: ComparatorConfig, rng: np.random.Generator
) -> DigitalHits:
    leading, trailing = edges.leading, edges.trailing
    if cfg.noise_rms > 0 and leading.size:
        leading = leading + rng.standard_normal(leading.size) * cfg.noise_rms / edges.slope_up
        trailing = trailing + rng.standard_normal(trailing.size) * cfg.noise_rms / np.abs(
            edges.slope_down
        )
    tot = trailing - leading
    keep = (tot > 0) & (tot >= cfg.min_pulse_width)
    return DigitalHits(leading[keep], tot[keep], edges.slope_up[keep])


def discriminate_hits(
    wave: AnalogWaveform, cfg: ComparatorConfig, seed: SeedLike
) -> DigitalHits:
    """ Array form of `discriminate` """
    edges = find_crossings(wave.samples, cfg.threshold, wave.t0, wave.sample_period)
    return _apply_jitter(edges, cfg, make_rng(seed, Stream.COMPARATOR))


def discriminate(
    wave: AnalogWaveform, cfg: ComparatorConfig, seed: SeedLike
) -> List[DigitalHit]:
    """ Leading-edge comparator

    Each upward crossing gets a gaussian timing jitter of σ = noise_rms / slope,
    the trailing edge likewise with its own slope. Hits shorter than
    `min_pulse_width` are dropped.

    * **wave** - Input waveform
    * **cfg** - Comparator parameters
    * **seed** - Seed of the comparator noise stream
    **return** - List of `DigitalHit` in time order
    """
    return list(discriminate_hits(wave, cfg, seed))


def dump_waveform_csv(wave: AnalogWaveform, path: Union[str, Path]) -> Path:
    return write_csv(path, ["time_s", "volts"], zip(wave.times, wave.samples))


class EasyFrontend:
    """ Readout chain facade: SiPM current to comparator hits

    Isolated fires reuse a cached noiseless response per cell count (the chain is
    linear and time invariant, so it only shifts in time); fires closer than
    `pileup_gap` are simulated together as one waveform.

    Usage:
    ```python
    >>> frontend = EasyFrontend(SipmConfig(), PreampConfig(), ComparatorConfig())
    >>> hits = frontend.readout(fires, seed=3)
    ```

    **Parameters:**

    * **sipm** - `SipmConfig`
    * **preamp** - `PreampConfig`
    * **comparator** - `ComparatorConfig`
    * **sample_period** - Waveform sample period in s
    * **pileup_gap** - Fires closer than this share a waveform; defaults to two pulse decay times
    """

    def __init__(
        self,
        sipm: SipmConfig,
        preamp: PreampConfig,
        comparator: ComparatorConfig,
        sample_period: float = 10e-12,
        pileup_gap: Optional[float] = None,
    ):
        self.sipm = sipm
        self.preamp = preamp
        self.comparator = comparator
        self.sample_period = sample_period
        self.pileup_gap = pileup_gap or 2.0 * sipm.pulse_decay_time
        self._responses: Dict[int, Optional[PulseResponse]] = {}
        _check_sampling(preamp, sample_period, sample_period)

    @property
    def lead(self) -> float:
        """ Quiet time simulated ahead of the first fire of a waveform """
        return 200 * self.sample_period

    @property
    def settle_time(self) -> float:
        """ Time for an isolated pulse to relax well below any threshold """
        tau_hp = 1.0 / (2.0 * math.pi * self.preamp.bypass_corner)
        return 8.0 * self.sipm.pulse_decay_time + 2.0 * tau_hp

    def shape(self, train: CurrentPulseTrain, span: float, t0: float = 0.0) -> AnalogWaveform:
        return shape_pulse(train, self.preamp, self.sample_period, span, t0=t0)

    def _single_fire_wave(self, n_cells: int) -> AnalogWaveform:
        fires = PhotonEventList([self.lead], n_cells=[n_cells])
        train = avalanche_current(self.sipm, fires)
        return self.shape(train, self.lead + self.settle_time)

    def single_photon_amplitude(self) -> float:
        """ Peak of the shaped waveform for one fired cell, V """
        return float(self._single_fire_wave(1).samples.max())

    def response(self, n_cells: int) -> Optional[PulseResponse]:
        """ Cached noiseless response to `n_cells` fired at once, `None` below threshold """
        if n_cells not in self._responses:
            wave = self._single_fire_wave(n_cells)
            edges = find_crossings(wave.samples, self.comparator.threshold, 0.0, self.sample_period)
            if edges.leading.size == 0:
                self._responses[n_cells] = None
            else:
                self._responses[n_cells] = PulseResponse(
                    n_cells=n_cells,
                    peak=float(wave.samples.max()),
                    delay=float(edges.leading[0] - self.lead),
                    tot=float(edges.trailing[0] - edges.leading[0]),
                    slope_up=float(edges.slope_up[0]),
                    slope_down=float(edges.slope_down[0]),
                )
            logger.debug(f"Pulse response for {n_cells} cell(s): {self._responses[n_cells]}")
        return self._responses[n_cells]

    def _tail(self, n_cells: int) -> float:
        resp = self.response(n_cells)
        if resp is None:
            return 3.0 * self.sipm.pulse_decay_time
        return resp.delay + resp.tot + 0.5 * self.sipm.pulse_decay_time

    def readout(self, fires: PhotonEventList, seed: SeedLike = 0) -> DigitalHits:
        """ Comparator hits for a list of fires

        * **fires** - Detected fires (laser, dark or scintillation)
        * **seed** - Seed of the comparator noise stream
        **return** - `DigitalHits` in time order
        """
        if len(fires) == 0:
            return DigitalHits.empty()
        if not fires.is_sorted():
            fires = fires.sorted()
        rng = make_rng(seed, Stream.COMPARATOR)
        times, cells = fires.time, fires.n_cells
        cluster_id = np.concatenate([[0], np.cumsum(np.diff(times) > self.pileup_gap)])
        sizes = np.bincount(cluster_id)
        isolated = sizes[cluster_id] == 1

        parts = []
        for n in np.unique(cells[isolated]):
            resp = self.response(int(n))
            if resp is None:
                continue
            t_fire = times[isolated & (cells == n)]
            template = Crossings(
                leading=t_fire + resp.delay,
                trailing=t_fire + resp.delay + resp.tot,
                slope_up=np.full(t_fire.size, resp.slope_up),
                slope_down=np.full(t_fire.size, resp.slope_down),
            )
            parts.append(_apply_jitter(template, self.comparator, rng))

        piled = np.flatnonzero(sizes > 1)
        if piled.size:
            logger.debug(f"Simulating {piled.size} piled-up waveform(s)")
        bounds = zip(
            np.searchsorted(cluster_id, piled, side="left"),
            np.searchsorted(cluster_id, piled, side="right"),
        )
        for lo, hi in Tqdm.tqdm(
            list(bounds), desc="Pile-up waveforms", disable=Tqdm.disable or piled.size < 100
        ):
            group = fires[lo:hi]
            t0 = group.time[0] - self.lead
            span = group.time[-1] - t0 + self._tail(int(group.n_cells.sum()))
            wave = self.shape(avalanche_current(self.sipm, group), span, t0=t0)
            edges = find_crossings(wave.samples, self.comparator.threshold, wave.t0, wave.sample_period)
            parts.append(_apply_jitter(edges, self.comparator, rng))
        return DigitalHits.concatenate(parts)

    def energy_hits(
        self,
        train: CurrentPulseTrain,
        integrator_tau: float,
        gain: float,
        comparator: ComparatorConfig,
        sample_period: float,
        span: float,
        t0: float = 0.0,
        seed: SeedLike = 0,
    ) -> DigitalHits:
        """ ToT of the energy channel: integrator output through its own comparator """
        wave = energy_channel_shape(train, integrator_tau, sample_period, span, gain=gain, t0=t0)
        return discriminate_hits(wave, comparator, seed)
