"""
Physical constants and unit conversions shared across the readout chain.

Timestamps travel between modules in seconds; window sizes and result records
are expressed in integer picoseconds.
"""
import math
from typing import Union

import numpy as np

SPEED_OF_LIGHT = 2.99792458e8  # m/s
PICOSECOND = 1e-12
NANOSECOND = 1e-9

# FWHM of a gaussian in units of its standard deviation, 2*sqrt(2*ln 2)
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))

ArrayLike = Union[float, np.ndarray]


def to_picoseconds(seconds: ArrayLike) -> Union[int, np.ndarray]:
    """ Convert seconds to integer picoseconds (round half to even) """
    ps = np.rint(np.asarray(seconds, dtype=np.float64) / PICOSECOND).astype(np.int64)
    return int(ps) if ps.ndim == 0 else ps


def to_seconds(picoseconds: Union[int, np.ndarray]) -> ArrayLike:
    """ Convert integer picoseconds back to seconds """
    s = np.asarray(picoseconds, dtype=np.float64) * PICOSECOND
    return float(s) if s.ndim == 0 else s


def fwhm_to_sigma(fwhm: ArrayLike) -> ArrayLike:
    return fwhm / FWHM_PER_SIGMA


def sigma_to_fwhm(sigma: ArrayLike) -> ArrayLike:
    return sigma * FWHM_PER_SIGMA
