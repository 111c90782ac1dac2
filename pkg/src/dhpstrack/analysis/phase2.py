"""Termination tables and stop-time distribution for loopback mapping.

A device ID after ``l`` loopbacks with ``n`` independent collisions is matched
by a random device with probability

    P_D^l(n) = prod_{i < l-n} (1 - i/T) / T^n

and the attacker stops at the first ``l`` where ``P_D^l(n) <= p*``. All
threshold comparisons use exact rationals so table boundaries never depend on
rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from dhpstrack.analysis.occupancy import empty_bins_table
from dhpstrack.errors import NoSolution

INF = math.inf


def pstar_for_population(N: int, c_star: float = 1.0) -> float:
    """Acceptance threshold c* / C(N, 2)."""
    if N < 2:
        raise ValueError("population must have at least two devices")
    return float(pstar_exact(N, c_star))


def pstar_exact(N: int, c_star: float | Fraction = 1) -> Fraction:
    return Fraction(c_star) / math.comb(N, 2)


@lru_cache(maxsize=100_000)
def pld_exact(T: int, l: int, n: int) -> Fraction:
    if l < 1 or n < max(0, l - T) or n > l - 1:
        return Fraction(0)
    num = 1
    for i in range(l - n):
        num *= T - i
    return Fraction(num, T ** (l - n) * T**n)


def pld(T: int, l: int, n: int) -> float:
    """Probability a random device reproduces an ID with ``n`` pairs after ``l`` loopbacks."""
    return float(pld_exact(T, l, n))


def n_upper_bound(T: int, p_star: Fraction) -> int:
    """Smallest n with T^-n <= p*."""
    n = 0
    while Fraction(1, T**n) > p_star:
        n += 1
    return n


def l_min_for(T: int, p_star: Fraction) -> int:
    """Smallest l for which even l-1 pairs (the best case) meet the threshold."""
    return n_upper_bound(T, p_star) + 1


def l_star(T: int) -> int:
    return math.floor(T - math.sqrt(T)) + 1


@dataclass
class Phase2Tables:
    T: int
    p_star: float
    l_min: int
    l_max: int
    nstar: dict[int, float]  # l -> minimal n; INF below l_min
    p_star_exact: Fraction = field(repr=False, default=Fraction(0))
    stop_dist: np.ndarray | None = field(repr=False, default=None)
    joint: dict[tuple[int, int], float] | None = field(repr=False, default=None)
    expected_l: float | None = None
    c: float | None = None
    N: int | None = None
    c_star: float | None = None

    def threshold(self, l: int) -> float:
        if l < self.l_min:
            return INF
        if l >= self.l_max:
            return 0
        return self.nstar[l]

    def rows(self):
        """(l, n*_l) for l_min <= l <= l_max."""
        return [(l, int(self.nstar[l])) for l in range(self.l_min, self.l_max + 1)]

    @property
    def c_over_cstar(self) -> float | None:
        if self.c is None:
            return None
        return self.c / (self.c_star if self.c_star else 1.0)


def low_T_check(T: int, p_star: float) -> tuple[bool, int]:
    """Whether ``T`` satisfies T - (1 + ln T / 2) sqrt T - ln T / 4 >= -ln p*.

    Returns the verdict together with the smallest table size that passes.
    """
    target = -math.log(p_star)

    def margin(t: int) -> float:
        return t - (1 + 0.5 * math.log(t)) * math.sqrt(t) - 0.25 * math.log(t)

    minimal = 2
    while margin(minimal) < target:
        minimal += 1
    return margin(T) >= target, minimal


def low_T_special_case(p_star: float) -> int:
    """Loopbacks needed when T = 2: each one after the first gives one bit."""
    if not 0 < p_star < 1:
        raise ValueError("p* must lie in (0, 1)")
    p = Fraction(p_star)
    bits = 0
    while Fraction(1, 2**bits) > p:
        bits += 1
    return bits + 1


def nstar_table(T: int, p_star: float | Fraction, N: int | None = None, c_star: float | None = None) -> Phase2Tables:
    """Minimal collision counts n*_l for every l up to l_max."""
    ps = p_star if isinstance(p_star, Fraction) else Fraction(p_star)
    if pld_exact(T, l_star(T), 0) > ps:
        raise NoSolution(
            f"no termination table for T={T} at p*={float(ps):.3e}: "
            f"P_D^l(0) is still above p* at l*={l_star(T)}, the largest l the analysis covers"
        )
    # smallest l with P^l(0) <= p*; P^l(0) decreases on 1..T, so l_max <= l*
    lo, hi = 1, l_star(T)
    while lo < hi:
        mid = (lo + hi) // 2
        if pld_exact(T, mid, 0) <= ps:
            hi = mid
        else:
            lo = mid + 1
    l_max = lo
    n_ub = n_upper_bound(T, ps)
    nstar: dict[int, float] = {}
    for l in range(1, l_max + 1):
        lo, hi = 0, min(n_ub, l - 1)
        if pld_exact(T, l, hi) > ps:
            nstar[l] = INF
            continue
        while lo < hi:
            mid = (lo + hi) // 2
            if pld_exact(T, l, mid) <= ps:
                hi = mid
            else:
                lo = mid + 1
        nstar[l] = lo
    l_min = min(l for l, v in nstar.items() if v != INF)
    tables = Phase2Tables(T, float(ps), l_min, l_max, nstar, ps, N=N, c_star=c_star)
    _check_corollaries(tables)
    return tables


def _check_corollaries(t: Phase2Tables) -> None:
    assert t.nstar[t.l_min] == t.l_min - 1
    assert t.nstar[t.l_max] == 0
    for l in range(t.l_min + 1, t.l_max + 1):
        assert t.nstar[l - 1] - t.nstar[l] in (0, 1), (l, t.nstar[l - 1], t.nstar[l])


def tables_for_population(T: int, N: int, c_star: float = 1.0) -> Phase2Tables:
    return nstar_table(T, pstar_exact(N, c_star), N=N, c_star=c_star)


def phase2_stop_distribution(T: int, tables: Phase2Tables) -> Phase2Tables:
    """Fill in p'(l), p'(l, n), E(l) and the population collision count c."""
    l_min, l_max, ns = tables.l_min, tables.l_max, tables.nstar
    occ = empty_bins_table(T, l_max)

    def p_l(l: int, n: float) -> float:
        # P(n independent collisions after l loopbacks) = P(mu_0(l) = T + n - l)
        if n < 0 or n > l - 1 or n == INF:
            return 0.0
        k = T + int(n) - l
        if not 0 <= k <= T:
            return 0.0
        return occ[l, k]

    stop = np.zeros(l_max + 1)
    joint: dict[tuple[int, int], float] = {}
    for l in range(l_min, l_max + 1):
        if l == l_min:
            val = p_l(l - 1, l - 2) / T
            joint[(l, l - 1)] = val
        else:
            prev, cur = ns[l - 1], ns[l]
            hit_a = ((l - 1) - (prev - 1)) / T
            if cur == prev:
                val = p_l(l - 1, prev - 1) * hit_a
                joint[(l, int(cur))] = val
            else:
                hit_b = ((l - 1) - (prev - 2)) / T
                stay = p_l(l - 1, prev - 1)
                up = p_l(l - 1, prev - 2) * hit_b
                val = stay + up
                joint[(l, int(cur) + 1)] = stay * hit_a
                joint[(l, int(cur))] = stay * (1 - hit_a) + up
        stop[l] = val
    tables.stop_dist = stop
    tables.joint = joint
    tables.expected_l = float(np.dot(np.arange(l_max + 1), stop))
    if tables.N is not None:
        pairs = math.comb(tables.N, 2)
        pbar = sum(p * pld(T, l, n) for (l, n), p in joint.items())
        tables.c = pairs * pbar
    return tables


def analyse_population(N: int, T: int = 256, c_star: float = 1.0) -> Phase2Tables:
    return phase2_stop_distribution(T, tables_for_population(T, N, c_star))


def simulate_population_ids(
    tables: Phase2Tables,
    population: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, int]:
    """Simulate one population of devices running loopback mapping.

    Every device throws loopbacks into ``T`` cells in a fixed order and stops
    at the first ``l`` with ``n >= n*_l``. Returns each device's stop time and
    the number of device pairs whose IDs (stop time plus collision structure)
    coincide.
    """
    T, l_max = tables.T, tables.l_max
    thresholds = np.array([tables.threshold(l) for l in range(l_max + 1)], dtype=float)
    cells = rng.integers(0, T, size=(population, l_max), dtype=np.int64)
    rows = np.arange(population)
    labels = np.full((population, T), -1, dtype=np.int64)
    distinct = np.zeros(population, dtype=np.int64)
    canon = np.empty((population, l_max), dtype=np.int64)
    stop = np.zeros(population, dtype=np.int64)
    for j in range(l_max):
        d = cells[:, j]
        lab = labels[rows, d]
        new = lab < 0
        lab = np.where(new, distinct, lab)
        labels[rows[new], d[new]] = distinct[new]
        distinct += new
        canon[:, j] = lab
        l = j + 1
        n = l - distinct
        hit = (stop == 0) & (n >= thresholds[l])
        stop[hit] = l
    assert (stop > 0).all()
    canon[np.arange(l_max)[None, :] >= stop[:, None]] = -1
    key = np.hstack([stop[:, None], canon])
    _, counts = np.unique(key, axis=0, return_counts=True)
    collisions = int((counts * (counts - 1) // 2).sum())
    return stop, collisions
