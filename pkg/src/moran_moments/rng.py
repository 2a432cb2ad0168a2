"""Deterministic random streams for the simulator.

Every replicate draws from its own xoshiro256** stream whose state is derived
from (master seed, replicate index) by a fixed splitmix64 rule, so runs are
bit-reproducible across processes and machines and replicates are independent
of scheduling order.  The numba kernel implements the identical algorithm.
"""

from __future__ import annotations

import math

_MASK = (1 << 64) - 1


def _splitmix_next(state: int) -> tuple:
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    z = z ^ (z >> 31)
    return state, z


def stream_state(master_seed: int, replicate: int) -> tuple:
    """Initial xoshiro256** state for one replicate (the fixed splitting rule)."""
    st = master_seed & _MASK
    st, z = _splitmix_next(st)
    st = (z + (replicate & _MASK)) & _MASK
    out = []
    for _ in range(4):
        st, z = _splitmix_next(st)
        out.append(z)
    return tuple(out)


class RandomStream:
    """xoshiro256** stream with the uniform/exponential draws the simulator uses."""

    __slots__ = ("s0", "s1", "s2", "s3")

    def __init__(self, master_seed: int, replicate: int = 0):
        self.s0, self.s1, self.s2, self.s3 = stream_state(master_seed, replicate)

    def next_raw(self) -> int:
        s0, s1, s2, s3 = self.s0, self.s1, self.s2, self.s3
        tmp = (s1 * 5) & _MASK
        result = (((tmp << 7) | (tmp >> 57)) & _MASK) * 9 & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK
        self.s0, self.s1, self.s2, self.s3 = s0, s1, s2, s3
        return result

    def uniform(self) -> float:
        """Uniform in [0, 1) with 53 random bits."""
        return (self.next_raw() >> 11) * (1.0 / 9007199254740992.0)

    def exponential(self, rate: float) -> float:
        return -math.log(1.0 - self.uniform()) / rate
