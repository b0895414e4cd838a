"""
SPAD firing events and the avalanche current they produce.

Event lists are kept as parallel numpy arrays (`PhotonEventList`) so that
millions of dark counts stay vectorized; iterating one yields `PhotonEvent`
records.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.signal import fftconvolve

from .config import LaserConfig, SipmConfig
from .errors import InvalidArgumentError
from .rng import SeedLike, Stream, make_rng
from .units import fwhm_to_sigma

logger = logging.getLogger(__name__)


class PhotonOrigin(str, Enum):
    LASER_PULSE = "laser"
    DARK_COUNT = "dark"
    SCINTILLATION = "scintillation"


_ORIGINS = list(PhotonOrigin)


@dataclass(frozen=True)
class PhotonEvent:
    time: float
    origin: PhotonOrigin
    n_cells_fired: int = 1

    def __post_init__(self):
        if self.time < 0:
            raise InvalidArgumentError(f"event time must be >= 0, got {self.time}")
        if self.n_cells_fired < 1:
            raise InvalidArgumentError("n_cells_fired must be >= 1")


class PhotonEventList:
    """ Time-ordered SPAD fire records stored as parallel arrays

    Usage:
    ```python
    >>> events = PhotonEventList.from_events([PhotonEvent(1e-9, PhotonOrigin.DARK_COUNT)])
    >>> [e.time for e in events]
    [1e-09]
    ```

    **Parameters:**

    * **time** - Fire times in s
    * **origin** - Origin codes (index into `PhotonOrigin`) or a single `PhotonOrigin` for all
    * **n_cells** - Cells fired per event, defaults to 1
    """

    def __init__(
        self,
        time: Sequence[float],
        origin: Union[PhotonOrigin, Sequence[int]] = PhotonOrigin.DARK_COUNT,
        n_cells: Optional[Sequence[int]] = None,
    ):
        self.time = np.asarray(time, dtype=np.float64).reshape(-1)
        if isinstance(origin, PhotonOrigin):
            self.origin = np.full(self.time.size, _ORIGINS.index(origin), dtype=np.int8)
        else:
            self.origin = np.asarray(origin, dtype=np.int8).reshape(-1)
        if n_cells is None:
            self.n_cells = np.ones(self.time.size, dtype=np.int64)
        else:
            self.n_cells = np.asarray(n_cells, dtype=np.int64).reshape(-1)
        if not (self.time.size == self.origin.size == self.n_cells.size):
            raise InvalidArgumentError("time, origin and n_cells must have equal length")
        if self.time.size and (self.time.min() < 0 or self.n_cells.min() < 1):
            raise InvalidArgumentError("events need time >= 0 and n_cells >= 1")

    @classmethod
    def empty(cls) -> "PhotonEventList":
        return cls(np.empty(0))

    @classmethod
    def from_events(cls, events: Sequence[PhotonEvent]) -> "PhotonEventList":
        return cls(
            [e.time for e in events],
            [_ORIGINS.index(PhotonOrigin(e.origin)) for e in events],
            [e.n_cells_fired for e in events],
        )

    def __len__(self) -> int:
        return self.time.size

    def __iter__(self) -> Iterator[PhotonEvent]:
        for t, o, n in zip(self.time, self.origin, self.n_cells):
            yield PhotonEvent(float(t), _ORIGINS[o], int(n))

    def __getitem__(self, item):
        if isinstance(item, (int, np.integer)):
            return PhotonEvent(
                float(self.time[item]), _ORIGINS[self.origin[item]], int(self.n_cells[item])
            )
        return PhotonEventList(self.time[item], self.origin[item], self.n_cells[item])

    def __eq__(self, other) -> bool:
        if not isinstance(other, PhotonEventList):
            return NotImplemented
        return (
            np.array_equal(self.time, other.time)
            and np.array_equal(self.origin, other.origin)
            and np.array_equal(self.n_cells, other.n_cells)
        )

    def __repr__(self) -> str:
        return f"PhotonEventList(n={len(self)})"

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.time) >= 0))

    def of_origin(self, origin: PhotonOrigin) -> "PhotonEventList":
        return self[self.origin == _ORIGINS.index(origin)]

    def sorted(self) -> "PhotonEventList":
        order = np.argsort(self.time, kind="stable")
        return self[order]

    def shifted(self, offset: float) -> "PhotonEventList":
        return PhotonEventList(self.time + offset, self.origin, self.n_cells)


def expected_dark_count(config: SipmConfig, duration: float) -> float:
    """ Mean dark count of an acquisition, rate density × area × duration """
    if duration <= 0:
        raise InvalidArgumentError(f"duration must be positive, got {duration}")
    return config.dark_rate_density * config.active_area * duration


def generate_dark_events(
    config: SipmConfig, duration: float, seed: SeedLike, t0: float = 0.0
) -> PhotonEventList:
    """ Homogeneous Poisson dark counts on ``[t0, t0 + duration)``

    * **config** - SiPM parameters, the rate is `dark_rate_density` × `active_area`
    * **duration** - Acquisition time in s
    * **seed** - Seed of the dark count stream
    * **t0** - Acquisition start time
    **return** - Time-sorted `PhotonEventList` of single-cell dark fires
    """
    mean = expected_dark_count(config, duration)
    rng = make_rng(seed, Stream.DARK)
    n = rng.poisson(mean)
    times = t0 + np.sort(rng.uniform(0.0, duration, size=n))
    logger.debug(f"Generated {n} dark counts (expected {mean:.1f}) over {duration} s")
    return PhotonEventList(times, PhotonOrigin.DARK_COUNT)


def detect_photons(
    config: SipmConfig, incident: PhotonEventList, seed: SeedLike
) -> PhotonEventList:
    """ Keep each incident photon independently with probability `pde` """
    rng = make_rng(seed, Stream.PDE)
    keep = rng.random(len(incident)) < config.pde
    return incident[keep]


def generate_laser_events(
    laser: LaserConfig, n_pulses: int, seed: SeedLike, t0: float = 0.0
) -> Tuple[np.ndarray, PhotonEventList]:
    """ Attenuated laser pulses on the repetition grid

    Pulse ``k`` is synchronized at ``t0 + (k + 0.5) / rep_rate``. Its photons all
    arrive at the sync time plus one gaussian pulse jitter draw shared by the
    pulse; the photon count is Poisson with mean `mean_photons_per_pulse`.

    * **laser** - Laser parameters
    * **n_pulses** - Number of pulses
    * **seed** - Seed of the laser stream
    **return** - Tuple of (sync times, incident photons before PDE thinning)
    """
    if n_pulses < 0:
        raise InvalidArgumentError("n_pulses must be >= 0")
    rng = make_rng(seed, Stream.LASER)
    sync = t0 + (np.arange(n_pulses) + 0.5) / laser.rep_rate
    jitter = rng.normal(0.0, fwhm_to_sigma(laser.jitter_fwhm), size=n_pulses)
    counts = rng.poisson(laser.mean_photons_per_pulse, size=n_pulses)
    times = np.repeat(sync + jitter, counts)
    return sync, PhotonEventList(times, PhotonOrigin.LASER_PULSE)


def apply_transit_jitter(
    config: SipmConfig, events: PhotonEventList, seed: SeedLike
) -> PhotonEventList:
    """ Add the SiPM single-photon transit time spread and re-sort """
    sigma = fwhm_to_sigma(config.intrinsic_transit_jitter_fwhm)
    if sigma == 0 or len(events) == 0:
        return events
    rng = make_rng(seed, Stream.TRANSIT)
    time = np.maximum(events.time + rng.normal(0.0, sigma, size=len(events)), 0.0)
    return PhotonEventList(time, events.origin, events.n_cells).sorted()


def merge_events(a: PhotonEventList, b: PhotonEventList) -> PhotonEventList:
    """ Stable time-ordered merge of two event lists """
    merged = PhotonEventList(
        np.concatenate([a.time, b.time]),
        np.concatenate([a.origin, b.origin]),
        np.concatenate([a.n_cells, b.n_cells]),
    )
    return merged.sorted()


def pulse_peak_time(rise_time: float, decay_time: float) -> float:
    """ Time of the maximum of exp(-t/decay) - exp(-t/rise) """
    return rise_time * decay_time / (decay_time - rise_time) * math.log(decay_time / rise_time)


def unit_pulse(t: np.ndarray, rise_time: float, decay_time: float) -> np.ndarray:
    """ Difference of exponentials normalized to a peak of 1, zero before t = 0 """
    t = np.asarray(t, dtype=np.float64)
    tp = pulse_peak_time(rise_time, decay_time)
    norm = math.exp(-tp / decay_time) - math.exp(-tp / rise_time)
    tc = np.clip(t, 0.0, None)
    shape = (np.exp(-tc / decay_time) - np.exp(-tc / rise_time)) / norm
    return np.where(t > 0, shape, 0.0)


@dataclass
class CurrentPulseTrain:
    """ Summed avalanche current: one difference-of-exponentials pulse per fire

    * **fire_times** - Pulse start times in s (sorted on construction)
    * **peak_currents** - Pulse peak currents in A
    * **rise_time**, **decay_time** - Shared pulse time constants
    * **source_capacitance** - Terminal capacitance of the SiPM driving the front end
    """

    fire_times: np.ndarray
    peak_currents: np.ndarray
    rise_time: float
    decay_time: float
    source_capacitance: float
    _kernels: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.fire_times = np.asarray(self.fire_times, dtype=np.float64).reshape(-1)
        self.peak_currents = np.asarray(self.peak_currents, dtype=np.float64).reshape(-1)
        if self.fire_times.size != self.peak_currents.size:
            raise InvalidArgumentError("fire_times and peak_currents differ in length")
        if self.peak_currents.size and self.peak_currents.min() <= 0:
            raise InvalidArgumentError("peak currents must be positive")
        if not 0 < self.rise_time < self.decay_time:
            raise InvalidArgumentError("need 0 < rise_time < decay_time")
        order = np.argsort(self.fire_times, kind="stable")
        self.fire_times = self.fire_times[order]
        self.peak_currents = self.peak_currents[order]

    def __len__(self) -> int:
        return self.fire_times.size

    @property
    def pulse_charge_per_amp(self) -> float:
        """ Integral of the unit pulse in s """
        tp = pulse_peak_time(self.rise_time, self.decay_time)
        norm = math.exp(-tp / self.decay_time) - math.exp(-tp / self.rise_time)
        return (self.decay_time - self.rise_time) / norm

    @property
    def charge(self) -> float:
        """ Total charge of the train in C """
        return float(self.peak_currents.sum() * self.pulse_charge_per_amp)

    def scaled(self, factor: float) -> "CurrentPulseTrain":
        return CurrentPulseTrain(
            self.fire_times,
            self.peak_currents * factor,
            self.rise_time,
            self.decay_time,
            self.source_capacitance,
        )

    def window(self, t_lo: float, t_hi: float) -> "CurrentPulseTrain":
        keep = (self.fire_times >= t_lo) & (self.fire_times < t_hi)
        return CurrentPulseTrain(
            self.fire_times[keep],
            self.peak_currents[keep],
            self.rise_time,
            self.decay_time,
            self.source_capacitance,
        )

    def _kernel(self, sample_period: float, n: int) -> np.ndarray:
        key = (sample_period, n)
        if key not in self._kernels:
            self._kernels[key] = unit_pulse(
                np.arange(n) * sample_period, self.rise_time, self.decay_time
            )
        return self._kernels[key]

    def sample(self, t0: float, sample_period: float, n: int) -> np.ndarray:
        """ Current on the grid ``t0 + k * sample_period``, ``k < n``

        Fires inside the grid are deposited onto their two neighbouring samples
        (linear split) and convolved with the sampled unit pulse; fires before
        ``t0`` are evaluated directly.
        """
        current = np.zeros(n)
        if len(self) == 0 or n == 0:
            return current
        pos = (self.fire_times - t0) / sample_period
        early = pos < 0
        if early.any():
            grid = t0 + np.arange(n) * sample_period
            for t_fire, peak in zip(self.fire_times[early], self.peak_currents[early]):
                current += peak * unit_pulse(grid - t_fire, self.rise_time, self.decay_time)
        inside = ~early & (pos < n - 1)
        if inside.any():
            k = np.floor(pos[inside]).astype(np.int64)
            frac = pos[inside] - k
            peaks = self.peak_currents[inside]
            deposit = np.zeros(n)
            np.add.at(deposit, k, peaks * (1.0 - frac))
            np.add.at(deposit, k + 1, peaks * frac)
            current += fftconvolve(deposit, self._kernel(sample_period, n))[:n]
        return current


def avalanche_current(
    config: SipmConfig, fires: Union[PhotonEventList, Sequence[PhotonEvent]]
) -> CurrentPulseTrain:
    """ Convert SPAD fires into the summed avalanche current

    The peak current of a fire is n_cells_fired × single_cell_charge_gain ×
    overvoltage × cell_current_per_volt.

    * **config** - SiPM parameters
    * **fires** - Detected fires
    **return** - `CurrentPulseTrain`
    """
    if config.bias_voltage < config.breakdown_voltage:
        raise InvalidArgumentError(
            f"bias {config.bias_voltage} V is below breakdown {config.breakdown_voltage} V"
        )
    if not isinstance(fires, PhotonEventList):
        fires = PhotonEventList.from_events(list(fires))
    per_cell = (
        config.single_cell_charge_gain
        * config.overvoltage
        * config.cell_current_per_volt
    )
    if len(fires) and per_cell <= 0:
        raise InvalidArgumentError("zero overvoltage produces no avalanche current")
    return CurrentPulseTrain(
        fires.time,
        fires.n_cells * per_cell,
        config.pulse_rise_time,
        config.pulse_decay_time,
        config.terminal_capacitance,
    )


class EasySipm:
    """ SiPM event generation facade

    Usage:
    ```python
    >>> sipm = EasySipm(SipmConfig(), seed=1)
    >>> dark = sipm.dark_counts(duration=1e-3)
    >>> train = sipm.to_current(dark)
    ```

    **Parameters:**

    * **config** - `SipmConfig`
    * **seed** - Scenario seed; every stage draws from its own stream of it
    """

    def __init__(self, config: SipmConfig, seed: SeedLike = 0):
        self.config = config
        self.seed = seed

    def expected_dark_count(self, duration: float) -> float:
        return expected_dark_count(self.config, duration)

    def dark_counts(self, duration: float, t0: float = 0.0) -> PhotonEventList:
        return generate_dark_events(self.config, duration, self.seed, t0=t0)

    def laser_fires(
        self, laser: LaserConfig, n_pulses: int
    ) -> Tuple[np.ndarray, PhotonEventList]:
        """ Sync times and detected, transit-jittered laser photons

        * **laser** - Laser parameters
        * **n_pulses** - Number of laser pulses
        """
        sync, incident = generate_laser_events(laser, n_pulses, self.seed)
        detected = detect_photons(self.config, incident, self.seed)
        fires = apply_transit_jitter(self.config, detected, self.seed)
        logger.info(
            f"{len(incident)} laser photons over {n_pulses} pulses, {len(fires)} detected"
        )
        return sync, fires

    def to_current(self, fires: PhotonEventList) -> CurrentPulseTrain:
        return avalanche_current(self.config, fires)


def poisson_counts(
    config: SipmConfig, duration: float, n_trials: int, seed: int
) -> List[int]:
    """ Dark count totals of `n_trials` independent acquisitions """
    counts = []
    for trial in range(n_trials):
        ss = np.random.SeedSequence(int(seed), spawn_key=(int(Stream.DARK), trial))
        counts.append(len(generate_dark_events(config, duration, np.random.default_rng(ss))))
    return counts
