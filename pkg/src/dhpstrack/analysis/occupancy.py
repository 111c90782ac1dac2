"""Balls-into-bins distributions.

``occupancy_pmf`` evaluates the classical alternating-sum formula for the
number of empty bins with exact integer arithmetic (the sum cancels
catastrophically in floating point for T in the hundreds). ``OccupancyDP``
tracks the joint distribution of (#bins with 0 balls, ..., #bins with r balls)
and yields every marginal mu_0..mu_r.
"""

from __future__ import annotations

from functools import lru_cache
from math import comb

import numpy as np

from dhpstrack.errors import StateTooLarge

DEFAULT_STATE_CAP = 5_000_000


def occupancy_pmf(T: int, l: int) -> np.ndarray:
    """P(exactly k empty bins), k = 0..T, after ``l`` balls into ``T`` bins."""
    if T < 1 or l < 0:
        raise ValueError("need T >= 1 and l >= 0")
    total = T**l
    out = np.zeros(T + 1)
    for k in range(T + 1):
        m = T - k  # occupied bins
        # surjections of l balls onto m bins
        s = sum((-1) ** i * comb(m, i) * (m - i) ** l for i in range(m + 1))
        out[k] = comb(T, k) * s / total
    return out


@lru_cache(maxsize=64)
def _compositions(T: int, r: int) -> np.ndarray:
    """All (i_0..i_r) with non-negative entries summing to at most T."""
    if r == 0:
        return np.arange(T + 1, dtype=np.int64).reshape(-1, 1)
    rows = []
    for first in range(T + 1):
        rest = _compositions(T - first, r - 1)
        rows.append(np.hstack([np.full((len(rest), 1), first, dtype=np.int64), rest]))
    return np.vstack(rows)


def state_count(T: int, r: int) -> int:
    return comb(T + r + 1, r + 1)


class OccupancyDP:
    """Exact distribution of bin-multiplicity counts, advanced one ball at a time.

    State vector entries are probabilities of (i_0, ..., i_r), where ``i_s``
    is the number of bins holding exactly ``s`` balls. Balls landing in a bin
    that already holds ``r`` balls move it out of the tracked range.
    """

    def __init__(self, T: int, r: int, state_cap: int = DEFAULT_STATE_CAP):
        if T < 1 or r < 0:
            raise ValueError("need T >= 1 and r >= 0")
        size = state_count(T, r)
        if size > state_cap:
            raise StateTooLarge(f"{size} states for T={T}, r={r} exceeds cap {state_cap}")
        self.T, self.r = T, r
        self.states = _compositions(T, r)
        assert len(self.states) == size
        self._build_transitions()
        self.prob = np.zeros(size)
        start = np.zeros(r + 1, dtype=np.int64)
        start[0] = T
        self.prob[self._lookup(start[None, :])[0]] = 1.0
        self.l = 0
        self.operations = 0

    def _lookup(self, rows: np.ndarray) -> np.ndarray:
        keys = rows @ self._radix
        return self._key_to_index[keys]

    def _build_transitions(self):
        T, r, st = self.T, self.r, self.states
        self._radix = (T + 1) ** np.arange(r, -1, -1, dtype=np.int64)
        keys = st @ self._radix
        self._key_to_index = np.full(int(keys.max()) + 1, -1, dtype=np.int64)
        self._key_to_index[keys] = np.arange(len(st))

        self._stay = (T - st.sum(axis=1)) / T
        self._moves = []
        for s in range(r + 1):
            src = np.nonzero(st[:, s] > 0)[0]
            dst_rows = st[src].copy()
            dst_rows[:, s] -= 1
            if s < r:
                dst_rows[:, s + 1] += 1
            self._moves.append((src, self._lookup(dst_rows), st[src, s] / T))

    def step(self, balls: int = 1) -> "OccupancyDP":
        for _ in range(balls):
            new = self.prob * self._stay
            for src, dst, w in self._moves:
                new += np.bincount(dst, weights=self.prob[src] * w, minlength=len(new))
            self.prob = new
            self.l += 1
            self.operations += (self.r + 2) * len(self.prob)
        return self

    def marginal(self, s: int) -> np.ndarray:
        """P(mu_s = k), k = 0..T, for any tracked multiplicity s <= r."""
        if not 0 <= s <= self.r:
            raise ValueError(f"multiplicity {s} not tracked (r={self.r})")
        return np.bincount(self.states[:, s], weights=self.prob, minlength=self.T + 1)


def mu_r_pmf(T: int, l: int, r: int, state_cap: int = DEFAULT_STATE_CAP) -> np.ndarray:
    """P(mu_r(l) = k): number of bins with exactly ``r`` balls after ``l`` throws."""
    return OccupancyDP(T, r, state_cap).step(l).marginal(r)


def empty_bins_table(T: int, l_max: int) -> np.ndarray:
    """Row ``l`` holds P(mu_0(l) = k) for l = 0..l_max (the r = 0 recurrence)."""
    out = np.zeros((l_max + 1, T + 1))
    dist = np.zeros(T + 1)
    dist[T] = 1.0
    out[0] = dist
    k = np.arange(T + 1)
    for l in range(1, l_max + 1):
        nxt = dist * (T - k) / T  # ball lands in an occupied bin
        nxt[:-1] += dist[1:] * k[1:] / T  # ball fills an empty bin
        dist = nxt
        out[l] = dist
    return out
