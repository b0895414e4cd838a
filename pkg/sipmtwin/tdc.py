"""
FPGA time-to-digital converter: ΔT quantization inside a fixed window, ToT
quantization, energy-bin classification and histogram accumulation.

Codes are the floor of the interval over the LSB, corrected so that
``code * lsb <= interval < (code + 1) * lsb`` holds exactly in float arithmetic
and the quantization error stays in [0, lsb).
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import N_ENERGY_BINS, TdcConfig
from .errors import EmptyInputError, InvalidArgumentError
from .file_utils import read_csv, write_csv
from .frontend import DigitalHits
from .units import to_picoseconds

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TdcRecord:
    delta_t_code: int
    tot_code: int
    energy_bin: int


class Histogram:
    """ Counts over ascending bin edges

    Usage:
    ```python
    >>> h = Histogram.uniform(0.0, 1e-9, 256)
    >>> h.fill(np.array([3.2e-9, 3.7e-9]))
    >>> int(h.counts[3])
    2
    ```

    **Parameters:**

    * **bin_edges** - Ascending edges, one more than there are bins
    * **counts** - Non-negative integer counts, zeros when omitted
    """

    def __init__(self, bin_edges: Sequence[float], counts: Optional[Sequence[int]] = None):
        self.bin_edges = np.asarray(bin_edges, dtype=np.float64)
        if self.bin_edges.ndim != 1 or self.bin_edges.size < 2:
            raise InvalidArgumentError("a histogram needs at least two bin edges")
        if np.any(np.diff(self.bin_edges) <= 0):
            raise InvalidArgumentError("bin edges must be strictly ascending")
        if counts is None:
            self.counts = np.zeros(self.bin_edges.size - 1, dtype=np.int64)
        else:
            self.counts = np.asarray(counts, dtype=np.int64).copy()
        if self.counts.size != self.bin_edges.size - 1:
            raise InvalidArgumentError("len(counts) must equal len(bin_edges) - 1")
        if self.counts.size and self.counts.min() < 0:
            raise InvalidArgumentError("counts must be non-negative")

    @classmethod
    def uniform(cls, low: float, width: float, n_bins: int) -> "Histogram":
        return cls(low + width * np.arange(n_bins + 1))

    @property
    def n_bins(self) -> int:
        return self.counts.size

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.bin_edges)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Histogram):
            return NotImplemented
        return np.array_equal(self.bin_edges, other.bin_edges) and np.array_equal(
            self.counts, other.counts
        )

    def __repr__(self) -> str:
        return f"Histogram(bins={self.n_bins}, total={self.total})"

    def copy(self) -> "Histogram":
        return Histogram(self.bin_edges, self.counts)

    def fill(self, values: np.ndarray, clamp: bool = False) -> None:
        """ Add `values` in place; with `clamp` out-of-range values land in the end bins """
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        idx = np.searchsorted(self.bin_edges, values, side="right") - 1
        if clamp:
            idx = np.clip(idx, 0, self.n_bins - 1)
        else:
            idx = idx[(idx >= 0) & (idx < self.n_bins)]
        self.counts += np.bincount(idx, minlength=self.n_bins)

    def merge(self, other: "Histogram") -> "Histogram":
        """ Bin-wise sum of two histograms over identical edges """
        if not np.array_equal(self.bin_edges, other.bin_edges):
            raise InvalidArgumentError("cannot merge histograms with different bin edges")
        return Histogram(self.bin_edges, self.counts + other.counts)

    __add__ = merge

    def rebin(self, factor: int) -> "Histogram":
        """ Merge groups of `factor` adjacent bins; a short trailing group is kept """
        if factor < 1:
            raise InvalidArgumentError("rebin factor must be >= 1")
        if factor == 1:
            return self.copy()
        starts = np.arange(0, self.n_bins, factor)
        edges = np.append(self.bin_edges[starts], self.bin_edges[-1])
        return Histogram(edges, np.add.reduceat(self.counts, starts))

    def to_csv(self, path: Union[str, Path]) -> Path:
        rows = zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts)
        return write_csv(path, ["bin_low", "bin_high", "count"], rows)

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "Histogram":
        rows = read_csv(path, required=("bin_low", "bin_high", "count"))
        if not rows:
            raise EmptyInputError(f"{path}: histogram has no bins")
        edges = [float(r["bin_low"]) for r in rows] + [float(rows[-1]["bin_high"])]
        return cls(edges, [int(r["count"]) for r in rows])


@dataclass
class TdcRecords:
    """ Digitized events as parallel integer arrays """

    delta_t_code: np.ndarray
    tot_code: np.ndarray
    energy_bin: np.ndarray

    def __post_init__(self):
        self.delta_t_code = np.asarray(self.delta_t_code, dtype=np.int64).reshape(-1)
        self.tot_code = np.asarray(self.tot_code, dtype=np.int64).reshape(-1)
        self.energy_bin = np.asarray(self.energy_bin, dtype=np.int64).reshape(-1)

    @classmethod
    def from_records(cls, records: Iterable[TdcRecord]) -> "TdcRecords":
        records = list(records)
        return cls(
            [r.delta_t_code for r in records],
            [r.tot_code for r in records],
            [r.energy_bin for r in records],
        )

    def __len__(self) -> int:
        return self.delta_t_code.size

    def select(self, mask: np.ndarray) -> "TdcRecords":
        mask = np.asarray(mask, dtype=bool)
        return TdcRecords(self.delta_t_code[mask], self.tot_code[mask], self.energy_bin[mask])

    def __iter__(self) -> Iterator[TdcRecord]:
        for d, t, e in zip(self.delta_t_code, self.tot_code, self.energy_bin):
            yield TdcRecord(int(d), int(t), int(e))


@dataclass
class TdcHistograms:
    """ Global ΔT histogram, one ΔT histogram per energy bin and the ToT histogram """

    delta_t: Histogram
    delta_t_per_bin: List[Histogram]
    tot: Histogram
    out_of_window: int = 0

    def merge(self, other: "TdcHistograms") -> "TdcHistograms":
        return TdcHistograms(
            self.delta_t.merge(other.delta_t),
            [a.merge(b) for a, b in zip(self.delta_t_per_bin, other.delta_t_per_bin)],
            self.tot.merge(other.tot),
            self.out_of_window + other.out_of_window,
        )

    def write_csv(self, output_dir: Union[str, Path]) -> List[Path]:
        output_dir = Path(output_dir)
        paths = [
            self.delta_t.to_csv(output_dir / "delta_t.csv"),
            self.tot.to_csv(output_dir / "tot.csv"),
        ]
        for k, h in enumerate(self.delta_t_per_bin):
            paths.append(h.to_csv(output_dir / f"delta_t_energy_bin_{k}.csv"))
        return paths


def _window_ps(cfg: TdcConfig) -> Tuple[int, int]:
    return to_picoseconds(cfg.delta_t_window), to_picoseconds(cfg.delta_t_lsb)


def floor_codes(interval: Union[float, np.ndarray], step: float) -> np.ndarray:
    """ ``floor(interval / step)`` with ``code * step <= interval < (code + 1) * step`` exact """
    interval = np.asarray(interval, dtype=np.float64)
    codes = np.floor(interval / step)
    codes = np.where(codes * step > interval, codes - 1.0, codes)
    codes = np.where((codes + 1.0) * step <= interval, codes + 1.0, codes)
    return codes.astype(np.int64)


def n_delta_t_codes(cfg: TdcConfig) -> int:
    window_ps, lsb_ps = _window_ps(cfg)
    return -(-window_ps // lsb_ps)


def n_tot_codes(cfg: TdcConfig) -> int:
    return int(round(cfg.tot_range / cfg.tot_bin_width))


def measure_delta_t(start: float, stop: float, cfg: TdcConfig) -> Optional[int]:
    """ Floor-quantized ΔT code, or `None` when ``stop - start`` is outside the window

    * **start** - Start (sync) time in s
    * **stop** - Stop (comparator) time in s
    * **cfg** - TDC parameters
    """
    delta = float(stop) - float(start)
    if 0.0 <= delta < cfg.delta_t_window:
        return min(int(floor_codes(delta, cfg.delta_t_lsb)), n_delta_t_codes(cfg) - 1)
    return None


def tot_code(tot: Union[float, np.ndarray], cfg: TdcConfig) -> Union[int, np.ndarray]:
    """ Floor-quantized ToT code """
    codes = floor_codes(tot, cfg.tot_bin_width)
    return int(codes) if np.ndim(codes) == 0 else codes


def _edges(cfg: TdcConfig, edges: Optional[Sequence[float]]) -> np.ndarray:
    edges = cfg.energy_bin_edges if edges is None else edges
    if edges is None:
        raise InvalidArgumentError(
            "no energy bin edges configured; pass edges or use default_energy_edges"
        )
    return np.asarray(edges, dtype=np.float64)


def classify_energy(
    tot: Union[float, np.ndarray], cfg: TdcConfig, edges: Optional[Sequence[float]] = None
) -> Union[int, np.ndarray]:
    """ Energy bin 0..7 of a ToT; a ToT equal to an edge belongs to the upper bin

    * **tot** - ToT in s (scalar or array)
    * **cfg** - TDC parameters holding `energy_bin_edges`
    * **edges** - Optional edges overriding the configured ones
    """
    idx = np.searchsorted(_edges(cfg, edges), tot, side="right")
    return int(idx) if np.ndim(idx) == 0 else idx.astype(np.int64)


def default_energy_edges(tot_values: np.ndarray) -> List[float]:
    """ Seven edges splitting the observed ToT range into eight equal bins """
    tot_values = np.asarray(tot_values, dtype=np.float64)
    if tot_values.size == 0:
        raise EmptyInputError("no ToT values to derive energy bin edges from")
    lo, hi = float(tot_values.min()), float(tot_values.max())
    if hi <= lo:
        hi = lo + N_ENERGY_BINS * max(abs(lo), 1e-12) * 1e-3
    return list(np.linspace(lo, hi, N_ENERGY_BINS + 1)[1:-1])


def digitize(
    starts: np.ndarray,
    hits: DigitalHits,
    cfg: TdcConfig,
    edges: Optional[Sequence[float]] = None,
) -> Tuple[TdcRecords, int]:
    """ First stop after every start, quantized

    * **starts** - Start (sync) times in s
    * **hits** - Comparator hits sorted by leading edge
    * **cfg** - TDC parameters
    * **edges** - Energy bin edges, the configured ones when omitted
    **return** - Tuple of (`TdcRecords`, number of starts without a stop inside the window)
    """
    starts = np.asarray(starts, dtype=np.float64).reshape(-1)
    edges = _edges(cfg, edges)
    idx = np.searchsorted(hits.leading_edge, starts, side="left")
    has_stop = idx < len(hits)
    idx = idx[has_stop]
    delta = hits.leading_edge[idx] - starts[has_stop]
    inside = (delta >= 0.0) & (delta < cfg.delta_t_window)
    idx, delta = idx[inside], delta[inside]
    tot = hits.tot[idx]
    records = TdcRecords(
        np.minimum(floor_codes(delta, cfg.delta_t_lsb), n_delta_t_codes(cfg) - 1),
        floor_codes(tot, cfg.tot_bin_width),
        np.searchsorted(edges, tot, side="right"),
    )
    out_of_window = starts.size - len(records)
    logger.debug(f"Digitized {len(records)} of {starts.size} starts")
    return records, out_of_window


def tot_window(records: TdcRecords, low: float, high: float, cfg: TdcConfig) -> TdcRecords:
    """ Records whose ToT bin center lies in ``[low, high)``

    * **records** - Digitized events
    * **low**, **high** - ToT window in s
    * **cfg** - TDC parameters
    """
    if high <= low:
        raise InvalidArgumentError("ToT window needs low < high")
    centers = (records.tot_code + 0.5) * cfg.tot_bin_width
    return records.select((centers >= low) & (centers < high))


def empty_histograms(
cfg: TdcConfig) -> TdcHistograms:
    n_dt = n_delta_t_codes(cfg)
    return TdcHistograms(
        Histogram.uniform(0.0, cfg.delta_t_lsb, n_dt),
        [Histogram.uniform(0.0, cfg.delta_t_lsb, n_dt) for _ in range(N_ENERGY_BINS)],
        Histogram.uniform(0.0, cfg.tot_bin_width, n_tot_codes(cfg)),
    )


def accumulate(
    records: Union[TdcRecords, Iterable[TdcRecord]], cfg: TdcConfig
) -> TdcHistograms:
    """ Fill the global ΔT, per-energy-bin ΔT and ToT histograms

    The per-bin ΔT histograms partition the global one. ToT codes past the
    histogram range are counted in its last bin.
    """
    if not isinstance(records, TdcRecords):
        records = TdcRecords.from_records(records)
    hists = empty_histograms(cfg)
    n_dt = hists.delta_t.n_bins
    if records.delta_t_code.size and (
        records.delta_t_code.min() < 0 or records.delta_t_code.max() >= n_dt
    ):
        raise InvalidArgumentError("delta_t_code outside the TDC window")
    if records.energy_bin.size and (
        records.energy_bin.min() < 0 or records.energy_bin.max() >= N_ENERGY_BINS
    ):
        raise InvalidArgumentError("energy_bin outside 0..7")
    for k, h in enumerate(hists.delta_t_per_bin):
        h.counts += np.bincount(
            records.delta_t_code[records.energy_bin == k], minlength=n_dt
        )
    hists.delta_t.counts = np.sum([h.counts for h in hists.delta_t_per_bin], axis=0)
    n_tot = hists.tot.n_bins
    hists.tot.counts += np.bincount(
        np.clip(records.tot_code, 0, n_tot - 1), minlength=n_tot
    )
    return hists


@dataclass
class EasyTdc:
    """ TDC facade keeping the out-of-window diagnostics tally and the records of
    the last acquisition

    Usage:
    ```python
    >>> tdc = EasyTdc(TdcConfig())
    >>> histograms = tdc.acquire(sync_times, hits)
    >>> tdc.out_of_window
    ```

    **Parameters:**

    * **config** - `TdcConfig`
    """

    config: TdcConfig
    out_of_window: int = 0
    edges: Optional[List[float]] = field(default=None)
    records: Optional[TdcRecords] = field(default=None, repr=False)

    def measure(self, start: float, stop: float) -> Optional[int]:
        code = measure_delta_t(start, stop, self.config)
        if code is None:
            self.out_of_window += 1
        return code

    def resolve_edges(self, tot_values: np.ndarray) -> List[float]:
        """ Configured edges, or uniform ones over `tot_values` """
        if self.config.energy_bin_edges is not None:
            self.edges = list(self.config.energy_bin_edges)
        else:
            self.edges = default_energy_edges(tot_values)
        return self.edges

    def acquire(
        self, starts: np.ndarray, hits: DigitalHits, edges: Optional[Sequence[float]] = None
    ) -> TdcHistograms:
        """ Digitize and histogram one acquisition

        * **starts** - Sync times in s
        * **hits** - Comparator hits
        * **edges** - Energy bin edges; configured or derived from the hits when omitted
        """
        if edges is None:
            edges = self.edges or self.resolve_edges(hits.tot)
        records, missed = digitize(starts, hits, self.config, edges=edges)
        self.records = records
        self.out_of_window += missed
        hists = accumulate(records, self.config)
        hists.out_of_window = missed
        logger.info(
            f"TDC recorded {len(records)} events, {missed} starts without a stop in the window"
        )
        return hists
