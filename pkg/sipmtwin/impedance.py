"""
One-port reflection processing: open/short/load error correction, S11 to
impedance conversion and the "impedance stays below a limit up to f" summary.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import skrf as rf

from .config import PreampConfig
from .errors import EmptyInputError, IllConditionedError, InvalidArgumentError
from .file_utils import get_file_extension, read_csv, write_csv
from .frontend import input_impedance

logger = logging.getLogger(__name__)

MAX_FREQUENCY = 5e9
# Ideal reflection of the open, short and load standards
GAMMA_OPEN, GAMMA_SHORT, GAMMA_LOAD = 1.0, -1.0, 0.0
# Relative distance below which two raw standards are considered equal
DEGENERACY_TOLERANCE = 1e-12


@dataclass
class ReflectionSweep:
    """ S11 against frequency

    * **frequencies** - Strictly ascending frequencies in (0, 5 GHz]
    * **s11** - Complex reflection coefficients
    * **reference_impedance** - Z0 in Ω
    """

    frequencies: np.ndarray
    s11: np.ndarray
    reference_impedance: float = 50.0

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=np.float64).reshape(-1)
        self.s11 = np.asarray(self.s11, dtype=np.complex128).reshape(-1)
        if self.frequencies.size != self.s11.size:
            raise InvalidArgumentError("frequencies and s11 differ in length")
        if self.frequencies.size:
            if np.any(np.diff(self.frequencies) <= 0):
                raise InvalidArgumentError("frequencies must be strictly ascending")
            if self.frequencies[0] <= 0 or self.frequencies[-1] > MAX_FREQUENCY:
                raise InvalidArgumentError("frequencies must lie in (0, 5 GHz]")
        if self.reference_impedance <= 0:
            raise InvalidArgumentError("reference_impedance must be positive")

    def __len__(self) -> int:
        return self.frequencies.size

    def same_grid(self, other: "ReflectionSweep") -> bool:
        return np.array_equal(self.frequencies, other.frequencies)


@dataclass
class ImpedanceSpectrum:
    """ Complex impedance against frequency

    Open-circuit points carry ``z = inf``; `flagged` marks frequencies whose
    correction was ill-conditioned, which summaries skip.
    """

    frequencies: np.ndarray
    z: np.ndarray
    flagged: np.ndarray = field(default=None)

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=np.float64).reshape(-1)
        self.z = np.asarray(self.z, dtype=np.complex128).reshape(-1)
        if self.flagged is None:
            self.flagged = np.zeros(self.frequencies.size, dtype=bool)
        if not self.frequencies.size == self.z.size == np.size(self.flagged):
            raise InvalidArgumentError("frequencies, z and flags differ in length")

    def __len__(self) -> int:
        return self.frequencies.size

    @property
    def open_circuit(self) -> np.ndarray:
        return np.isinf(self.z.real)


def apply_error_box(
    gamma: np.ndarray, e00: complex, e11: complex, e10e01: complex
) -> np.ndarray:
    """ Raw reflection seen through a 3-term one-port error box """
    gamma = np.asarray(gamma, dtype=np.complex128)
    return e00 + e10e01 * gamma / (1.0 - e11 * gamma)


def _check_grids(*sweeps: ReflectionSweep) -> None:
    first = sweeps[0]
    for other in sweeps[1:]:
        if not first.same_grid(other):
            raise InvalidArgumentError("all sweeps must share the same frequency grid")


def error_terms(
    open_m: ReflectionSweep, short_m: ReflectionSweep, load_m: ReflectionSweep
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """ Directivity, source match and tracking per frequency

    Solves ``m = a Γ + b + c Γ m`` for the three standards, giving e00 = b,
    e11 = c and e10e01 = a + b c.

    **return** - Tuple of (e00, e11, e10e01, ill-conditioned mask)
    """
    _check_grids(open_m, short_m, load_m)
    ideal = np.array([GAMMA_OPEN, GAMMA_SHORT, GAMMA_LOAD], dtype=np.complex128)
    m = np.stack([open_m.s11, short_m.s11, load_m.s11], axis=-1)
    Q = np.stack([np.broadcast_to(ideal, m.shape), np.ones_like(m), ideal * m], axis=-1)

    scale = np.maximum(1.0, np.abs(m).max(axis=-1))
    gaps = np.stack(
        [np.abs(m[:, 0] - m[:, 1]), np.abs(m[:, 0] - m[:, 2]), np.abs(m[:, 1] - m[:, 2])],
        axis=-1,
    ).min(axis=-1)
    ill = ~np.all(np.isfinite(m), axis=-1) | (gaps <= DEGENERACY_TOLERANCE * scale)

    abc = np.full(m.shape, np.nan, dtype=np.complex128)
    ok = ~ill
    if ok.any():
        abc[ok] = np.linalg.solve(Q[ok], m[ok][..., None])[..., 0]
    a, b, c = abc[:, 0], abc[:, 1], abc[:, 2]
    e10e01 = a + b * c
    ill |= ~np.isfinite(e10e01) | (np.abs(e10e01) <= DEGENERACY_TOLERANCE)
    return b, c, e10e01, ill


def osl_correct(
    dut: ReflectionSweep,
    open_m: ReflectionSweep,
    short_m: ReflectionSweep,
    load_m: ReflectionSweep,
    flag_ill_conditioned: bool = False,
) -> Union[ReflectionSweep, Tuple[ReflectionSweep, np.ndarray]]:
    """ Open/short/load corrected reflection of the device under test

    * **dut** - Raw DUT sweep
    * **open_m**, **short_m**, **load_m** - Raw sweeps of the standards on the same grid
    * **flag_ill_conditioned** - Return ``(sweep, mask)`` with NaN at degenerate
      frequencies instead of raising `IllConditionedError`
    **return** - Corrected `ReflectionSweep`
    """
    _check_grids(dut, open_m, short_m, load_m)
    e00, e11, e10e01, ill = error_terms(open_m, short_m, load_m)
    if ill.any():
        idx = np.flatnonzero(ill)
        if not flag_ill_conditioned:
            raise IllConditionedError(
                f"degenerate standards at {idx.size} frequency point(s)",
                idx.tolist(),
                dut.frequencies[idx].tolist(),
            )
        logger.warning(f"Open/short/load correction ill-conditioned at {idx.size} point(s)")
    with np.errstate(invalid="ignore", divide="ignore"):
        delta = dut.s11 - e00
        gamma = delta / (e10e01 + e11 * delta)
    gamma = np.where(ill, np.nan, gamma)
    corrected = ReflectionSweep(dut.frequencies, gamma, dut.reference_impedance)
    if flag_ill_conditioned:
        return corrected, ill
    return corrected


def s11_to_impedance(sweep: ReflectionSweep) -> ImpedanceSpectrum:
    """ Z = Z0 (1 + Γ) / (1 - Γ); Γ = 1 gives an infinite (open circuit) impedance """
    gamma = sweep.s11
    is_open = gamma == 1.0
    with np.errstate(invalid="ignore", divide="ignore"):
        z = sweep.reference_impedance * (1.0 + gamma) / (1.0 - gamma)
    z = np.where(is_open, complex(math.inf, 0.0), z)
    flagged = ~np.isfinite(gamma)
    return ImpedanceSpectrum(sweep.frequencies, z, flagged)


def impedance_to_s11(
    spectrum: ImpedanceSpectrum, reference_impedance: float = 50.0
) -> ReflectionSweep:
    """ Γ = (Z - Z0) / (Z + Z0), the inverse of `s11_to_impedance` """
    z = spectrum.z
    with np.errstate(invalid="ignore"):
        gamma = (z - reference_impedance) / (z + reference_impedance)
    gamma = np.where(np.isinf(z.real), 1.0 + 0j, gamma)
    return ReflectionSweep(spectrum.frequencies, gamma, reference_impedance)


def summarize_below(spectrum: ImpedanceSpectrum, limit: float = 50.0) -> float:
    """ Highest frequency up to which every unflagged point has ``|Z| < limit``

    **return** - Frequency in Hz, 0 when the first point already violates the limit
    """
    usable = ~spectrum.flagged
    freqs = spectrum.frequencies[usable]
    if freqs.size == 0:
        raise EmptyInputError("no usable impedance points")
    violates = ~(np.abs(spectrum.z[usable]) < limit)
    if not violates.any():
        return float(freqs[-1])
    first = int(np.argmax(violates))
    return 0.0 if first == 0 else float(freqs[first - 1])


def synthesize_input_impedance(
    cfg: PreampConfig, series_inductance: float, frequencies: np.ndarray
) -> ImpedanceSpectrum:
    """ Model input impedance: the regulated input resistance, rising past the
    amplifier bandwidth, in series with the input bond inductance """
    f = np.asarray(frequencies, dtype=np.float64)
    r_in = input_impedance(cfg)
    z = r_in * (1.0 + 1j * f / cfg.bandwidth_limit) + 2j * math.pi * f * series_inductance
    return ImpedanceSpectrum(f, z)


def read_reflection(path: Union[str, Path], reference_impedance: float = 50.0) -> ReflectionSweep:
    """ Read a one-port sweep from Touchstone (`.s1p`) or CSV (`freq_hz,re_s11,im_s11`) """
    if get_file_extension(path) == ".s1p":
        network = rf.Network(str(path))
        return ReflectionSweep(
            network.f, network.s[:, 0, 0], float(np.real(network.z0[0, 0]))
        )
    rows = read_csv(path, required=("freq_hz", "re_s11", "im_s11"))
    return ReflectionSweep(
        [float(r["freq_hz"]) for r in rows],
        [complex(float(r["re_s11"]), float(r["im_s11"])) for r in rows],
        reference_impedance,
    )


def write_reflection(sweep: ReflectionSweep, path: Union[str, Path]) -> Path:
    """ Write a one-port sweep as Touchstone (`.s1p`) or CSV """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if get_file_extension(path) == ".s1p":
        frequency = rf.Frequency.from_f(sweep.frequencies, unit="hz")
        network = rf.Network(
            frequency=frequency,
            s=sweep.s11.reshape(-1, 1, 1),
            z0=sweep.reference_impedance,
            name=path.stem,
        )
        network.write_touchstone(filename=path.stem, dir=str(path.parent))
        return path
    rows = zip(sweep.frequencies, sweep.s11.real, sweep.s11.imag)
    return write_csv(path, ["freq_hz", "re_s11", "im_s11"], rows)


def write_impedance_csv(spectrum: ImpedanceSpectrum, path: Union[str, Path]) -> Path:
    rows = zip(spectrum.frequencies, spectrum.z.real, spectrum.z.imag, np.abs(spectrum.z))
    return write_csv(path, ["freq_hz", "re_z", "im_z", "abs_z"], rows)


class EasyImpedance:
    """ Impedance processing facade

    Usage:
    ```python
    >>> impedance = EasyImpedance(limit=50.0)
    >>> spectrum = impedance.measure("dut.s1p", "open.s1p", "short.s1p", "load.s1p")
    >>> impedance.bandwidth_below_limit(spectrum)
    ```

    **Parameters:**

    * **reference_impedance** - Z0 in Ω
    * **limit** - Impedance limit for the summary in Ω
    """

    def __init__(self, reference_impedance: float = 50.0, limit: float = 50.0):
        self.reference_impedance = reference_impedance
        self.limit = limit

    def correct(
        self,
        dut: ReflectionSweep,
        open_m: ReflectionSweep,
        short_m: ReflectionSweep,
        load_m: ReflectionSweep,
    ) -> ImpedanceSpectrum:
        """ Error-corrected impedance; degenerate frequencies are flagged, not fatal """
        corrected, ill = osl_correct(dut, open_m, short_m, load_m, flag_ill_conditioned=True)
        spectrum = s11_to_impedance(corrected)
        spectrum.flagged |= ill
        return spectrum

    def measure(
        self,
        dut: Union[str, Path],
        open_path: Union[str, Path],
        short_path: Union[str, Path],
        load_path: Union[str, Path],
    ) -> ImpedanceSpectrum:
        sweeps = [
            read_reflection(p, self.reference_impedance)
            for p in (dut, open_path, short_path, load_path)
        ]
        return self.correct(*sweeps)

    def bandwidth_below_limit(self, spectrum: ImpedanceSpectrum) -> float:
        f_star = summarize_below(spectrum, self.limit)
        logger.info(f"|Z| < {self.limit} Ω up to {f_star / 1e9:.3f} GHz")
        return f_star


def synthetic_measurement(
    z_dut: ImpedanceSpectrum,
    error_box: Tuple[complex, complex, complex],
    reference_impedance: float = 50.0,
    noise_rms: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[ReflectionSweep, ReflectionSweep, ReflectionSweep, ReflectionSweep]:
    """ Raw DUT, open, short and load sweeps seen through `error_box`

    * **z_dut** - True DUT impedance
    * **error_box** - (e00, e11, e10e01)
    * **noise_rms** - Complex gaussian noise added to every raw point
    **return** - Tuple of raw (dut, open, short, load) sweeps
    """
    f = z_dut.frequencies
    gamma_dut = impedance_to_s11(z_dut, reference_impedance).s11
    standards = [np.full(f.size, g) for g in (GAMMA_OPEN, GAMMA_SHORT, GAMMA_LOAD)]
    sweeps = []
    for gamma in [gamma_dut] + standards:
        raw = apply_error_box(gamma, *error_box)
        if noise_rms > 0 and rng is not None:
            noise = rng.standard_normal(f.size) + 1j * rng.standard_normal(f.size)
            raw = raw + noise_rms * noise
        sweeps.append(ReflectionSweep(f, raw, reference_impedance))
    return tuple(sweeps)
