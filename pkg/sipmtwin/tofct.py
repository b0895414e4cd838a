"""
Toy Monte Carlo of pulsed X-ray time-of-flight CT.

A Bremsstrahlung source emits short X-ray pulses through a phantom. A detected
X-ray either flies straight to the detector or scatters once, travelling an
extra path and losing energy. A time window on the measured arrival rejects the
late, scattered X-rays and lowers the scattered-to-primary ratio (SPR).

All times are relative to the sync of the pulse that produced the event.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import (
    ExtraPathDistribution,
    GeometryConfig,
    ScintillatorConfig,
    SipmConfig,
    TofCtConfig,
    TofCtMode,
    XraySourceConfig,
)
from .errors import InvalidArgumentError, UndefinedRatioError
from .photodetector import PhotonEventList, PhotonOrigin
from .rng import SeedLike, Stream, make_rng
from .units import PICOSECOND, SPEED_OF_LIGHT, fwhm_to_sigma

logger = logging.getLogger(__name__)


def bremsstrahlung_density(
    energy: Union[float, np.ndarray], cfg: XraySourceConfig
) -> Union[float, np.ndarray]:
    """ Normalized Kramers spectrum ∝ (kvp - E) / E on ``[e_min, kvp]``, 0 outside """
    e = np.asarray(energy, dtype=np.float64)
    norm = cfg.kvp * math.log(cfg.kvp / cfg.e_min) - (cfg.kvp - cfg.e_min)
    inside = (e >= cfg.e_min) & (e <= cfg.kvp)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(inside, (cfg.kvp - e) / e / norm, 0.0)
    return float(p) if p.ndim == 0 else p


def sample_bremsstrahlung(
    cfg: XraySourceConfig, seed: SeedLike, n: Optional[int] = None
) -> Union[float, np.ndarray]:
    """ Draw X-ray energies in keV from the Kramers spectrum

    Rejection sampling from a log-uniform proposal on ``[e_min, kvp]``: its
    density ∝ 1/E leaves an acceptance ∝ (kvp - E).

    * **cfg** - Source parameters
    * **seed** - Seed or generator
    * **n** - Number of draws; `None` returns a single float
    **return** - Energies in keV
    """
    rng = make_rng(seed, Stream.XRAY)
    size = 1 if n is None else int(n)
    out = np.empty(size)
    filled = 0
    log_span = math.log(cfg.kvp / cfg.e_min)
    while filled < size:
        batch = max(2 * (size - filled), 16)
        e = cfg.e_min * np.exp(log_span * rng.random(batch))
        accept = rng.random(batch) * (cfg.kvp - cfg.e_min) < (cfg.kvp - e)
        take = e[accept][: size - filled]
        out[filled : filled + take.size] = take
        filled += take.size
    return float(out[0]) if n is None else out


@dataclass(frozen=True)
class TofEvent:
    """ One detected X-ray

    * **arrival_time** - Arrival at the detector after the pulse sync, s
    * **energy** - Energy at the detector, keV
    * **scattered** - Whether the X-ray scattered in the phantom
    * **measured_time** - Arrival as timestamped by the readout, s
    """

    arrival_time: float
    energy: float
    scattered: bool
    measured_time: float


@dataclass
class TofEvents:
    """ Struct-of-arrays list of `TofEvent`; `measured_time` starts equal to the arrival """

    arrival_time: np.ndarray
    energy: np.ndarray
    scattered: np.ndarray
    measured_time: Optional[np.ndarray] = None

    def __post_init__(self):
        self.arrival_time = np.asarray(self.arrival_time, dtype=np.float64).reshape(-1)
        self.energy = np.asarray(self.energy, dtype=np.float64).reshape(-1)
        self.scattered = np.asarray(self.scattered, dtype=bool).reshape(-1)
        if self.measured_time is None:
            self.measured_time = self.arrival_time.copy()
        self.measured_time = np.asarray(self.measured_time, dtype=np.float64).reshape(-1)
        n = self.arrival_time.size
        if not self.energy.size == self.scattered.size == self.measured_time.size == n:
            raise InvalidArgumentError("event arrays differ in length")

    @classmethod
    def from_events(cls, events: Sequence[TofEvent]) -> "TofEvents":
        return cls(
            [e.arrival_time for e in events],
            [e.energy for e in events],
            [e.scattered for e in events],
            [e.measured_time for e in events],
        )

    def __len__(self) -> int:
        return self.arrival_time.size

    def __getitem__(self, item) -> Union[TofEvent, "TofEvents"]:
        if isinstance(item, (int, np.integer)):
            return TofEvent(
                float(self.arrival_time[item]),
                float(self.energy[item]),
                bool(self.scattered[item]),
                float(self.measured_time[item]),
            )
        return TofEvents(
            self.arrival_time[item],
            self.energy[item],
            self.scattered[item],
            self.measured_time[item],
        )

    def with_measured(self, measured_time: np.ndarray) -> "TofEvents":
        return TofEvents(self.arrival_time, self.energy, self.scattered, measured_time)

    @property
    def n_scattered(self) -> int:
        return int(np.count_nonzero(self.scattered))

    @property
    def n_primary(self) -> int:
        return len(self) - self.n_scattered


def flight_time(distance: float) -> float:
    return distance / SPEED_OF_LIGHT


def _extra_path(g: GeometryConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    if g.extra_path_distribution == ExtraPathDistribution.EXPONENTIAL:
        if g.extra_path_mean == 0:
            return np.zeros(n)
        return rng.exponential(g.extra_path_mean, size=n)
    if g.extra_path_distribution == ExtraPathDistribution.UNIFORM:
        lo = max(g.extra_path_mean - g.extra_path_spread / 2.0, 0.0)
        return rng.uniform(lo, g.extra_path_mean + g.extra_path_spread / 2.0, size=n)
    return np.abs(rng.normal(g.extra_path_mean, g.extra_path_spread, size=n))


def simulate_events(
    g: GeometryConfig, src: XraySourceConfig, n: int, seed: SeedLike
) -> TofEvents:
    """ Detected X-rays of `n` source pulses

    Energies and source jitter come from the X-ray stream; scatter decisions,
    extra paths and Compton factors from the scatter stream, so changing the
    phantom leaves the source draws untouched.

    * **g** - Phantom geometry
    * **src** - Source parameters
    * **n** - Number of events
    * **seed** - Seed
    **return** - `TofEvents` with ``measured_time == arrival_time``
    """
    if n < 0:
        raise InvalidArgumentError("n must be >= 0")
    source_rng = make_rng(seed, Stream.XRAY)
    scatter_rng = make_rng(seed, Stream.SCATTER)

    energy = sample_bremsstrahlung(src, source_rng, n)
    jitter = source_rng.normal(0.0, fwhm_to_sigma(src.pulse_fwhm), size=n)

    scattered = scatter_rng.random(n) < g.scatter_fraction
    extra = np.where(scattered, _extra_path(g, scatter_rng, n), 0.0)
    lo, hi = g.compton_factor_range
    energy = np.where(scattered, energy * scatter_rng.uniform(lo, hi, size=n), energy)

    arrival = (g.source_detector_distance + extra) / SPEED_OF_LIGHT + jitter
    logger.debug(f"Simulated {n} X-rays, {int(scattered.sum())} scattered")
    return TofEvents(arrival, energy, scattered)


def simulate_event(g: GeometryConfig, src: XraySourceConfig, seed: SeedLike) -> TofEvent:
    return simulate_events(g, src, 1, seed)[0]


def scintillation_photons(
    events: TofEvents, s: ScintillatorConfig, seed: SeedLike
) -> Tuple[np.ndarray, np.ndarray]:
    """ Optical photons of every absorbed X-ray

    The count of an event is Poisson with mean light_yield × energy ×
    collection_efficiency; each emission delay is the sum of a rise and a decay
    exponential.

    **return** - Tuple of (photon times, index of the emitting event), grouped by event
    """
    if np.any(events.energy <= 0):
        raise InvalidArgumentError("energy must be positive")
    rng = make_rng(seed, Stream.SCINTILLATION)
    counts = rng.poisson(s.light_yield * events.energy * s.collection_efficiency)
    owner = np.repeat(np.arange(len(events)), counts)
    times = (
        events.arrival_time[owner]
        + rng.exponential(s.decay_time, size=owner.size)
        + rng.exponential(s.rise_time, size=owner.size)
    )
    return times, owner


def scintillate(event: TofEvent, s: ScintillatorConfig, seed: SeedLike) -> PhotonEventList:
    """ Time-sorted photons incident on the SiPM for one absorbed X-ray """
    if event.energy <= 0:
        raise InvalidArgumentError(f"energy must be positive, got {event.energy}")
    times, _ = scintillation_photons(TofEvents.from_events([event]), s, seed)
    return PhotonEventList(np.sort(times), PhotonOrigin.SCINTILLATION)


def first_photon_times(
    events: TofEvents, s: ScintillatorConfig, sipm: SipmConfig, seed: SeedLike
) -> np.ndarray:
    """ Earliest detected scintillation photon of every event

    Photons are thinned by the SiPM PDE and spread by its transit jitter.

    **return** - Times in s, ``inf`` where no photon was detected
    """
    rng = make_rng(seed, Stream.SCINTILLATION)
    times, owner = scintillation_photons(events, s, rng)
    keep = rng.random(owner.size) < sipm.pde
    transit = fwhm_to_sigma(sipm.intrinsic_transit_jitter_fwhm)
    times = times + rng.normal(0.0, transit, size=owner.size)
    first = np.full(len(events), math.inf)
    np.minimum.at(first, owner[keep], times[keep])
    return first


def first_photon_time(
    event: TofEvent, s: ScintillatorConfig, sipm: SipmConfig, seed: SeedLike
) -> Optional[float]:
    """ SiPM-chain timestamp of one event, `None` if no photon is detected """
    t = first_photon_times(TofEvents.from_events([event]), s, sipm, seed)[0]
    return None if math.isinf(t) else float(t)


def measure_times(events: TofEvents, timing_fwhm: float, seed: SeedLike) -> TofEvents:
    """ Add gaussian system timing jitter of `timing_fwhm` to the measured times """
    if timing_fwhm < 0:
        raise InvalidArgumentError("timing_fwhm must be >= 0")
    rng = make_rng(seed, Stream.TIMING)
    noise = rng.standard_normal(len(events)) * fwhm_to_sigma(timing_fwhm)
    return events.with_measured(events.measured_time + noise)


def tof_filter(events: TofEvents, window: Tuple[float, float]) -> TofEvents:
    """ Keep the events whose measured time lies in ``[t_lo, t_hi]`` """
    t_lo, t_hi = window
    if not t_lo < t_hi:
        raise InvalidArgumentError(f"window must satisfy t_lo < t_hi, got {window}")
    keep = (events.measured_time >= t_lo) & (events.measured_time <= t_hi)
    return events[keep]


def window_for_acceptance(events: TofEvents, acceptance: float) -> Tuple[float, float]:
    """ Narrowest late edge keeping at least `acceptance` of the primaries

    The early edge sits at the earliest measured time so nothing is cut early.
    """
    if not 0 < acceptance <= 1:
        raise InvalidArgumentError("acceptance must lie in (0, 1]")
    primaries = events.measured_time[~events.scattered]
    if primaries.size == 0:
        raise UndefinedRatioError("no primary events to place the window on")
    t_hi = float(np.quantile(primaries, acceptance, method="higher"))
    t_lo = float(events.measured_time.min())
    if t_lo >= t_hi:
        t_lo = t_hi - PICOSECOND
    return t_lo, t_hi


def spr(events: TofEvents) -> float:
    """ Scattered-to-primary ratio """
    if events.n_primary == 0:
        raise UndefinedRatioError("no primary events")
    return events.n_scattered / events.n_primary


def spr_reduction(
    before: Union[TofEvents, float], after: Union[TofEvents, float]
) -> float:
    """ Relative SPR reduction in percent, ``(1 - spr_after / spr_before) × 100`` """
    spr_before = before if isinstance(before, (int, float)) else spr(before)
    spr_after = after if isinstance(after, (int, float)) else spr(after)
    if spr_before == 0:
        raise UndefinedRatioError("no scatter before filtering")
    return (1.0 - spr_after / spr_before) * 100.0


@dataclass(frozen=True)
class RejectionResult:
    spr_before: float
    spr_after: float
    reduction_pct: float
    primary_acceptance: float
    target_acceptance: float
    window: Tuple[float, float]
    timing_fwhm: float
    n_events: int

    def to_record(self) -> Dict:
        return {
            "spr_before": self.spr_before,
            "spr_after": self.spr_after,
            "reduction_pct": self.reduction_pct,
            "primary_acceptance": self.primary_acceptance,
            "target_acceptance": self.target_acceptance,
            "window_ps": [w / PICOSECOND for w in self.window],
            "timing_fwhm_ps": self.timing_fwhm / PICOSECOND,
            "n_events": self.n_events,
        }


class EasyTofCt:
    """ ToF-CT scatter rejection facade

    Usage:
    ```python
    >>> tofct = EasyTofCt(XraySourceConfig(), GeometryConfig(), TofCtConfig(), seed=7)
    >>> events = tofct.simulate(100_000)
    >>> tofct.reject(events).reduction_pct
    ```

    **Parameters:**

    * **source** - `XraySourceConfig`
    * **geometry** - `GeometryConfig`
    * **config** - `TofCtConfig`
    * **scintillator** - `ScintillatorConfig`, used in chain mode
    * **sipm** - `SipmConfig`, used in chain mode
    * **seed** - Scenario seed
    """

    def __init__(
        self,
        source: XraySourceConfig,
        geometry: GeometryConfig,
        config: TofCtConfig = TofCtConfig(),
        scintillator: ScintillatorConfig = ScintillatorConfig(),
        sipm: SipmConfig = SipmConfig(),
        seed: SeedLike = 0,
    ):
        self.source = source
        self.geometry = geometry
        self.config = config
        self.scintillator = scintillator
        self.sipm = sipm
        self.seed = seed

    def simulate(self, n_events: int) -> TofEvents:
        """ True events; in chain mode the measured time is the first detected photon
        and events without one are dropped """
        events = simulate_events(self.geometry, self.source, n_events, self.seed)
        if self.config.mode == TofCtMode.CHAIN:
            first = first_photon_times(events, self.scintillator, self.sipm, self.seed)
            events = events.with_measured(first)[np.isfinite(first)]
            logger.info(f"{len(events)} of {n_events} X-rays produced a detected photon")
        return events

    def measure(self, events: TofEvents, timing_fwhm: Optional[float] = None) -> TofEvents:
        fwhm = self.config.timing_fwhm if timing_fwhm is None else timing_fwhm
        return measure_times(events, fwhm, self.seed)

    def reject(
        self,
        events: TofEvents,
        timing_fwhm: Optional[float] = None,
        acceptance: Optional[float] = None,
    ) -> RejectionResult:
        """ Measure, place the window for the target primary acceptance and filter

        * **events** - Output of `simulate`
        * **timing_fwhm** - System timing FWHM, defaults to the configured one
        * **acceptance** - Target primary acceptance, defaults to the configured one
        """
        fwhm = self.config.timing_fwhm if timing_fwhm is None else timing_fwhm
        target = self.config.primary_acceptance if acceptance is None else acceptance
        measured = self.measure(events, fwhm)
        window = window_for_acceptance(measured, target)
        kept = tof_filter(measured, window)
        before, after = spr(measured), spr(kept)
        result = RejectionResult(
            spr_before=before,
            spr_after=after,
            reduction_pct=spr_reduction(before, after),
            primary_acceptance=kept.n_primary / measured.n_primary,
            target_acceptance=target,
            window=window,
            timing_fwhm=fwhm,
            n_events=len(measured),
        )
        logger.info(
            f"Timing {fwhm / PICOSECOND:.0f} ps: SPR {before:.4f} -> {after:.4f} "
            f"({result.reduction_pct:.1f} % reduction)"
        )
        return result

    def grid(self, events: TofEvents) -> List[RejectionResult]:
        """ `reject` over every (timing_fwhm, acceptance) pair of the configured grids """
        timings = self.config.timing_grid or [self.config.timing_fwhm]
        acceptances = self.config.acceptance_grid or [self.config.primary_acceptance]
        return [self.reject(events, t, a) for t in timings for a in acceptances]
