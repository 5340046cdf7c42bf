"""Counter-based random streams keyed by (seed, replication, object).

Each random object of a replication gets its own Philox4x64-10 stream with
key ``(seed, rep * 2**16 + object_id)`` and counter starting at zero, so draws
do not depend on evaluation order or on the number of worker threads.

Uniforms take the top 53 bits of each raw 64-bit word, ``u = (k + 0.5) / 2**53``,
which lies strictly inside (0, 1). Normals are ``ndtri(u)``, the inverse
standard normal CDF (Cephes rational approximation), one uniform per variate.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

MAX_OBJECTS = 1 << 16
_MASK64 = (1 << 64) - 1

# Substream ids for the simulation objects.
LOADINGS = 1
LOADING_MASK = 2
SIGMA_E = 3
NOISE = 4
FACTORS = 5
RHO = 6
ALPHA_G = 7
EPS_G = 8
ETA = 9
ALPHA_Z = 10
EPS_Z = 11
PROBES = 12
INSTANCE = 13
PROBES_RIGHT = 14


class Stream:
    """One deterministic stream of uniforms and normals."""

    def __init__(self, seed: int, rep: int, object_id: int):
        if not 0 <= object_id < MAX_OBJECTS:
            raise ValueError(f"object_id must lie in [0, {MAX_OBJECTS})")
        if rep < 0:
            raise ValueError("rep must be non-negative")
        key = np.array([int(seed) & _MASK64, (int(rep) * MAX_OBJECTS + object_id) & _MASK64],
                       dtype=np.uint64)
        self._bitgen = np.random.Philox(counter=0, key=key)

    def uniform(self, size) -> np.ndarray:
        n = int(np.prod(size))
        raw = np.asarray(self._bitgen.random_raw(n), dtype=np.uint64)
        u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        return u.reshape(size)

    def normal(self, size) -> np.ndarray:
        return ndtri(self.uniform(size))

    def uniform_range(self, low: float, high: float, size) -> np.ndarray:
        return low + (high - low) * self.uniform(size)


def stream(seed: int, rep: int, object_id: int) -> Stream:
    return Stream(seed, rep, object_id)
