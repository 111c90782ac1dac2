"""Wraparound bound for RFC 6056 Algorithm 5 (random increments).

With a mean advance of (N+1)/2 per connection and ``r`` connections per
second, the global counter must not cover the port range ``R`` within
2 * MSL seconds: 2 * MSL * (N+1)/2 * r < R.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class Alg5Bound:
    msl: float
    rate: float
    port_range: int
    max_n: int

    @property
    def range_bits(self) -> float:
        return math.log2(self.port_range)

    @property
    def bits(self) -> float:
        return math.log2(self.max_n) if self.max_n >= 1 else 0.0

    @property
    def bits_lost(self) -> float:
        return self.range_bits - self.bits


def alg5_bound(msl: float, rate: float, port_range: int) -> Alg5Bound:
    """Largest increment bound N keeping the counter from wrapping within 2*MSL."""
    if msl <= 0 or rate <= 0 or port_range <= 0:
        raise ValueError("MSL, rate and range must be positive")
    # MSL * (N + 1) * r < R  <=>  N < R / (MSL * r) - 1
    limit = port_range / (msl * rate) - 1
    n = math.ceil(limit) - 1
    while msl * (n + 2) * rate < port_range:
        n += 1
    while n >= 0 and not msl * (n + 1) * rate < port_range:
        n -= 1
    return Alg5Bound(msl, rate, port_range, n)
