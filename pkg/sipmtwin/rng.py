"""
Seeded random streams.

Every stochastic stage draws from its own stream keyed by ``(seed, stream_id)``
so a result depends on the scenario seed alone, never on call order or on how
work was split between workers.
"""
from enum import IntEnum
from typing import Optional, Union

import numpy as np

SeedLike = Union[int, np.random.Generator, None]


class Stream(IntEnum):
    """ Stream ids of the stochastic stages """

    DARK = 1
    LASER = 2
    PDE = 3
    TRANSIT = 4
    COMPARATOR = 5
    XRAY = 6
    SCATTER = 7
    SCINTILLATION = 8
    TIMING = 9
    CALIBRATION = 10
    SPECTRUM = 11
    IMPEDANCE = 12


def make_rng(seed: SeedLike, stream_id: Optional[int] = None) -> np.random.Generator:
    """ Build the generator for ``(seed, stream_id)``

    * **seed** - Integer seed, an existing `Generator` (returned untouched) or `None` for OS entropy
    * **stream_id** - Optional sub-stream key, usually one of `Stream`
    **return** - A numpy `Generator`
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        return np.random.default_rng()
    spawn_key = () if stream_id is None else (int(stream_id),)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=spawn_key))
