"""
Measurement procedures over TDC histograms: peak finding, single-photon ToT,
FWHM extraction, dark-rate verification and the threshold/bias scans.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np
from scipy import signal
from scipy.optimize import curve_fit

from .config import AnalysisConfig, FwhmMethod, SipmConfig
from .errors import (
    EmptyInputError,
    FitFailedError,
    InvalidArgumentError,
    NotFoundError,
    UnboundedPeakError,
    UndefinedRatioError,
)
from .photodetector import expected_dark_count
from .tdc import Histogram
from .units import FWHM_PER_SIGMA, PICOSECOND

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Peak:
    center: float
    height: int
    prominence: float


@dataclass
class PeakSet:
    peaks: List[Peak] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.peaks)

    def __iter__(self) -> Iterator[Peak]:
        return iter(self.peaks)

    def __getitem__(self, item) -> Peak:
        return self.peaks[item]

    @property
    def centers(self) -> List[float]:
        return [p.center for p in self.peaks]


@dataclass(frozen=True)
class SptrResult:
    fwhm: float
    peak_center: float
    method: FwhmMethod
    n_events: int

    def to_record(self) -> Dict:
        return {
            "fwhm_ps": self.fwhm / PICOSECOND,
            "peak_center_ps": self.peak_center / PICOSECOND,
            "n_events": self.n_events,
            "method": self.method.value,
        }


def find_peaks(h: Histogram, min_prominence: float = 0.05) -> PeakSet:
    """ Local maxima whose prominence reaches `min_prominence` × the largest count

    The histogram is padded with an empty bin on both sides so that a maximum
    sitting on the first or last bin still counts.

    * **h** - Histogram to search
    * **min_prominence** - Prominence threshold as a fraction of the maximum count
    **return** - `PeakSet`, left to right
    """
    if h.n_bins == 0 or h.total == 0:
        raise EmptyInputError("cannot find peaks in an empty histogram")
    counts = h.counts.astype(np.float64)
    padded = np.concatenate([[0.0], counts, [0.0]])
    idx, props = signal.find_peaks(padded, prominence=min_prominence * counts.max())
    idx = idx - 1
    centers = h.centers
    return PeakSet(
        [
            Peak(float(centers[i]), int(h.counts[i]), float(p))
            for i, p in zip(idx, props["prominences"])
        ]
    )


def single_photon_tot(h: Histogram, min_prominence: float = 0.05) -> float:
    """ Center of the first (lowest ToT) peak, the ToT of a single fired cell """
    try:
        peaks = find_peaks(h, min_prominence)
    except EmptyInputError as err:
        raise NotFoundError("no single-photon peak in an empty ToT histogram") from err
    if not len(peaks):
        raise NotFoundError("no peak in the ToT histogram")
    return peaks[0].center


def _half_max_crossing(centers: np.ndarray, counts: np.ndarray, mode: int, step: int) -> float:
    half = counts[mode] / 2.0
    j = mode
    while 0 <= j + step < counts.size:
        if counts[j + step] < half:
            lo, hi = j + step, j
            frac = (half - counts[lo]) / (counts[hi] - counts[lo])
            return centers[lo] + frac * (centers[hi] - centers[lo])
        j += step
    side = "left" if step < 0 else "right"
    raise UnboundedPeakError(f"{side} flank never falls below half maximum")


def _gaussian(x, amplitude, mean, sigma):
    return amplitude * np.exp(-0.5 * ((x - mean) / sigma) ** 2)


def fwhm(h: Histogram, method: FwhmMethod = FwhmMethod.INTERPOLATED) -> SptrResult:
    """ Full width at half maximum around the global mode

    * **h** - ΔT histogram
    * **method** - `INTERPOLATED` (linear half-max crossings between bin centers) or
      `GAUSSIAN_FIT` (least-squares gaussian over ±1.5 FWHM of the mode)
    **return** - `SptrResult`
    """
    if h.total == 0:
        raise EmptyInputError("cannot take the FWHM of an empty histogram")
    method = FwhmMethod(method)
    counts = h.counts.astype(np.float64)
    centers = h.centers
    mode = int(np.argmax(counts))
    left = _half_max_crossing(centers, counts, mode, -1)
    right = _half_max_crossing(centers, counts, mode, +1)
    width, center = right - left, float(centers[mode])

    if method == FwhmMethod.GAUSSIAN_FIT:
        sel = np.abs(centers - center) <= 1.5 * width
        p0 = (counts[mode], center, width / FWHM_PER_SIGMA)
        try:
            popt, _ = curve_fit(
                _gaussian,
                centers[sel],
                counts[sel],
                p0=p0,
                sigma=np.sqrt(np.maximum(counts[sel], 1.0)),
                maxfev=5000,
            )
        except (RuntimeError, ValueError) as err:
            raise FitFailedError(f"gaussian fit did not converge: {err}") from err
        width, center = FWHM_PER_SIGMA * abs(popt[2]), float(popt[1])

    if width <= 0:
        raise UnboundedPeakError("peak has no measurable width")
    return SptrResult(fwhm=width, peak_center=center, method=method, n_events=h.total)


def verify_dark_rate(observed_count: int, cfg: SipmConfig, duration: float) -> float:
    """ z-score of an observed dark count against the Poisson expectation """
    expected = expected_dark_count(cfg, duration)
    if expected == 0:
        raise UndefinedRatioError("expected dark count is zero")
    return (observed_count - expected) / math.sqrt(expected)


def quadrature_sum(*fwhms: float) -> float:
    """ Combined width of independent gaussian contributions """
    return math.sqrt(sum(f * f for f in fwhms))


@dataclass
class ScanStep:
    value: float
    total: int
    first_peak: Optional[float]
    present: bool


@dataclass
class ScanResult:
    best: Optional[float]
    steps: List[ScanStep] = field(default_factory=list)
    reference: Optional[float] = None

    def to_record(self) -> Dict:
        return {
            "best": self.best,
            "reference": self.reference,
            "steps": [
                {
                    "value": s.value,
                    "total": s.total,
                    "first_peak": s.first_peak,
                    "present": s.present,
                }
                for s in self.steps
            ],
        }


def _scan(
    harness: Callable[[float], Histogram],
    values: Sequence[float],
    reference_tot: Optional[float],
    tolerance_bins: int,
    min_prominence: float,
    drop_fraction: float,
) -> ScanResult:
    """
    Walk `values` in order while the single-photon peak persists. The peak is
    present when a peak exists, the first one lies within `tolerance_bins` of
    the reference ToT, and the counts have not dropped below `drop_fraction` of
    the previous step. The reference stays fixed for the whole walk; without
    `reference_tot` it is the first peak of the first step.
    """
    result = ScanResult(best=None)
    reference, previous_total = reference_tot, None
    for value in values:
        h = harness(value)
        first = None
        present = h.total > 0
        if present:
            peaks = find_peaks(h, min_prominence)
            present = len(peaks) > 0
            if present:
                first = peaks[0].center
                if reference is None:
                    reference = first
                elif abs(first - reference) / float(h.widths[0]) > tolerance_bins + 1e-6:
                    present = False
        if present and previous_total is not None:
            present = h.total >= drop_fraction * previous_total
        result.steps.append(ScanStep(float(value), h.total, first, present))
        logger.debug(f"Scan step {value}: total={h.total} first_peak={first} present={present}")
        if not present:
            break
        result.best, previous_total = float(value), h.total
    result.reference = reference
    return result


def scan_thresholds(
    harness: Callable[[float], Histogram],
    thresholds: Sequence[float],
    reference_tot: Optional[float] = None,
    tolerance_bins: int = 2,
    min_prominence: float = 0.05,
    drop_fraction: float = 0.5,
) -> ScanResult:
    """ `threshold_scan` returning every step """
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise InvalidArgumentError("thresholds must be ascending")
    return _scan(harness, thresholds, reference_tot, tolerance_bins, min_prominence, drop_fraction)


def threshold_scan(
    harness: Callable[[float], Histogram],
    thresholds: Sequence[float],
    reference_tot: Optional[float] = None,
    tolerance_bins: int = 2,
    min_prominence: float = 0.05,
    drop_fraction: float = 0.5,
) -> float:
    """ Largest threshold whose ToT spectrum still shows the single-photon peak

    Raising the threshold first shifts the single-photon peak to lower ToT,
    then the peak disappears with a sudden drop of counts.

    * **harness** - Returns the ToT histogram simulated at a given threshold
    * **thresholds** - Ascending thresholds in V
    * **reference_tot** - Single-photon ToT at the lowest threshold; `None` trusts the first step
    * **tolerance_bins** - Allowed distance of the first peak from the reference, in ToT bins
    * **min_prominence** - Peak prominence as a fraction of the maximum count
    * **drop_fraction** - A step keeping less than this share of the previous counts ends the scan
    **return** - The threshold in V
    """
    result = scan_thresholds(
        harness, thresholds, reference_tot, tolerance_bins, min_prominence, drop_fraction
    )
    if result.best is None:
        raise NotFoundError("no threshold shows the single-photon peak")
    return result.best


def bias_scan(
    harness: Callable[[float], Histogram],
    biases: Sequence[float],
    tolerance_bins: int = 2,
    min_prominence: float = 0.05,
    drop_fraction: float = 0.5,
) -> ScanResult:
    """ Lowest bias whose ToT spectrum still shows the single-photon peak

    Walks the biases from the highest down; lowering the bias shrinks the
    single-photon pulse the same way raising the threshold does.

    * **harness** - Returns the ToT histogram simulated at a given bias voltage
    * **biases** - Bias voltages in V
    """
    ordered = sorted(biases, reverse=True)
    result = _scan(harness, ordered, None, tolerance_bins, min_prominence, drop_fraction)
    if result.best is None:
        raise NotFoundError("no bias shows the single-photon peak")
    return result


class EasySptrAnalysis:
    """ Histogram analysis facade

    Usage:
    ```python
    >>> analysis = EasySptrAnalysis(AnalysisConfig())
    >>> tot_peak = analysis.single_photon_tot(histograms.tot)
    >>> result = analysis.sptr(histograms.delta_t_per_bin[0])
    ```

    **Parameters:**

    * **config** - `AnalysisConfig`
    """

    def __init__(self, config: AnalysisConfig = AnalysisConfig()):
        self.config = config

    def find_peaks(self, h: Histogram) -> PeakSet:
        return find_peaks(h, self.config.min_prominence)

    def single_photon_tot(self, h: Histogram) -> float:
        return single_photon_tot(h, self.config.min_prominence)

    def sptr(self, h: Histogram, rebin: Optional[int] = None) -> SptrResult:
        """ FWHM of a ΔT histogram after merging `rebin` bins (configured default) """
        factor = self.config.rebin if rebin is None else rebin
        result = fwhm(h.rebin(factor), self.config.fwhm_method)
        logger.info(
            f"SPTR {result.fwhm / PICOSECOND:.1f} ps FWHM from {result.n_events} events"
        )
        return result

    def threshold_scan(
        self,
        harness: Callable[[float], Histogram],
        thresholds: Sequence[float],
        reference_tot: Optional[float] = None,
    ) -> ScanResult:
        return scan_thresholds(
            harness,
            thresholds,
            reference_tot,
            self.config.tolerance_bins,
            self.config.min_prominence,
            self.config.drop_fraction,
        )

    def bias_scan(
        self, harness: Callable[[float], Histogram], biases: Sequence[float]
    ) -> ScanResult:
        return bias_scan(
            harness,
            biases,
            self.config.tolerance_bins,
            self.config.min_prominence,
            self.config.drop_fraction,
        )
