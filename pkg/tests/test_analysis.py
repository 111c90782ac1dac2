import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dhpstrack.analysis import (
    OccupancyDP,
    alg5_bound,
    empty_bins_table,
    expected_new_unique,
    low_T_check,
    low_T_special_case,
    mu_r_pmf,
    nstar_table,
    occupancy_pmf,
    optimal_batch_size,
    phase1_stop_distribution,
    phase2_stop_distribution,
    pld,
    pstar_for_population,
    simulate_phase1_iterations,
    simulate_population_ids,
    tables_for_population,
)
from dhpstrack.analysis.phase2 import pstar_exact
from dhpstrack.errors import NoSolution, StateTooLarge

# -- brute-force oracles ----------------------------------------------------------


def brute_phase1_expectation(T: int, q: Fraction = Fraction(1)) -> Fraction:
    """E(iterations) of the covering process, by enumerating every throw.

    States are covered-cell bitmasks; each singleton is kept with prob. q.
    Solved by value iteration over the (finite, acyclic-up-to-self-loop)
    chain in order of decreasing coverage.
    """
    full = (1 << T) - 1
    k = T - 1
    trans: dict[int, dict[int, Fraction]] = {}
    for mask in range(full):
        out: dict[int, Fraction] = {}
        for throw in itertools.product(range(T), repeat=k):
            counts = [throw.count(c) for c in range(T)]
            fresh = [c for c in range(T) if counts[c] == 1 and not mask >> c & 1]
            for keep in itertools.product((0, 1), repeat=len(fresh)):
                p = Fraction(1, T**k)
                new = mask
                for c, kp in zip(fresh, keep):
                    p *= q if kp else 1 - q
                    if kp:
                        new |= 1 << c
                out[new] = out.get(new, 0) + p
        trans[mask] = out
    E = {full: Fraction(0)}
    for mask in sorted(range(full), key=lambda m: -bin(m).count("1")):
        stay = trans[mask].get(mask, Fraction(0))
        rest = sum(p * E[m] for m, p in trans[mask].items() if m != mask)
        E[mask] = (1 + rest) / (1 - stay)
    return E[0]


def brute_occupancy(T: int, l: int, r: int) -> list[Fraction]:
    out = [Fraction(0)] * (T + 1)
    for throw in itertools.product(range(T), repeat=l):
        out[sum(throw.count(c) == r for c in range(T))] += Fraction(1, T**l)
    return out


def brute_phase2(T: int, tables) -> tuple[dict[int, Fraction], Fraction]:
    """Exact stop distribution and the sum over IDs of P(ID)^2.

    Walks every collision structure (restricted growth string) until the
    termination rule fires; a new cell has probability (T - d)/T, each of
    the d cells already used 1/T.
    """
    stop: dict[int, Fraction] = {}
    sum_sq = Fraction(0)

    def walk(l: int, d: int, p: Fraction):
        nonlocal sum_sq
        if l and l - d >= tables.threshold(l):
            stop[l] = stop.get(l, 0) + p
            # one ID per path; its probability is p
            sum_sq += p * p
            return
        walk(l + 1, d + 1, p * Fraction(T - d, T))
        for _ in range(d):
            walk(l + 1, d, p * Fraction(1, T))

    walk(0, 0, Fraction(1))
    return stop, sum_sq


# -- phase 1 --------------------------------------------------------------------------


def test_phase1_T2_exact():
    d = phase1_stop_distribution(2)
    # [DERIVED] enumeration: one candidate per iteration, P(l) = 2^-(l-1) for l >= 2
    assert d.stop[1] == 0
    for l in range(2, 20):
        assert d.stop[l] == pytest.approx(2.0 ** -(l - 1), abs=1e-15)
    assert d.expected == pytest.approx(3.0, abs=1e-12)
    assert brute_phase1_expectation(2) == 3


@pytest.mark.parametrize("T", [3, 4])
def test_phase1_matches_enumeration(T):
    assert phase1_stop_distribution(T).expected == pytest.approx(float(brute_phase1_expectation(T)), abs=1e-9)


def test_phase1_thinning_matches_enumeration():
    q = Fraction(3, 4)
    exact = brute_phase1_expectation(3, q)
    assert phase1_stop_distribution(3, accept_prob=0.75).expected == pytest.approx(float(exact), abs=1e-9)


def test_phase1_distribution_normalised():
    d = phase1_stop_distribution(256)
    assert d.stop.sum() == pytest.approx(1.0, abs=1e-10)  # float round-off in the chain
    assert d.mode in (13, 14)
    # [DERIVED] exact chain with 15/16 acceptance (Linux 1/16 double increments)
    assert phase1_stop_distribution(256, accept_prob=15 / 16).expected == pytest.approx(14.9449078, abs=1e-6)


def test_phase1_simulation_small_T():
    it = simulate_phase1_iterations(2, 20_000, np.random.default_rng(0))
    assert abs(it.mean() - 3) < 4 * math.sqrt(2 / 20_000)
    thinned = simulate_phase1_iterations(16, 20_000, np.random.default_rng(1), reject_prob=0.25)
    exact = phase1_stop_distribution(16, accept_prob=0.75)
    sd = math.sqrt(float(((np.arange(len(exact.stop)) - exact.expected) ** 2) @ exact.stop))
    assert abs(thinned.mean() - exact.expected) < 4 * sd / math.sqrt(20_000)


def test_expected_new_unique_and_batch():
    assert expected_new_unique(256, 10, 256) == 0
    assert expected_new_unique(0, 1, 256) == 1
    assert expected_new_unique(0, 0, 256) == 0
    assert optimal_batch_size(256) == 255
    for T in (4, 16, 100):
        k = optimal_batch_size(T)
        assert all(expected_new_unique(0, k, T) >= expected_new_unique(0, j, T) - 1e-12 for j in range(1, 3 * T))
    with pytest.raises(ValueError):
        expected_new_unique(300, 1, 256)


# -- occupancy ------------------------------------------------------------------------


def test_occupancy_small_cases():
    assert occupancy_pmf(256, 0)[256] == 1
    assert list(occupancy_pmf(2, 2)) == [0.5, 0.5, 0.0]
    for T, l in [(3, 4), (4, 3), (5, 5)]:
        assert np.allclose(occupancy_pmf(T, l), [float(x) for x in brute_occupancy(T, l, 0)], atol=1e-15)


@pytest.mark.parametrize("T, l, r", [(3, 3, 1), (4, 5, 2), (3, 6, 2), (5, 4, 0)])
def test_mu_r_matches_enumeration(T, l, r):
    assert np.allclose(mu_r_pmf(T, l, r), [float(x) for x in brute_occupancy(T, l, r)], atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(T=st.integers(1, 64), data=st.data())
def test_dp_equals_closed_form(T, data):
    l = data.draw(st.integers(0, 2 * T))
    closed = occupancy_pmf(T, l)
    assert np.abs(mu_r_pmf(T, l, 0) - closed).max() < 1e-9
    assert np.abs(empty_bins_table(T, l)[l] - closed).max() < 1e-9


def test_dp_large_T_closed_form():
    for T, l in [(512, 1024), (256, 255)]:
        assert np.abs(empty_bins_table(T, l)[l] - occupancy_pmf(T, l)).max() < 1e-9


def test_state_cap():
    with pytest.raises(StateTooLarge):
        OccupancyDP(256, 4, state_cap=1000)


# -- phase 2 --------------------------------------------------------------------------


def test_pstar_values():
    assert pstar_for_population(2) == 1.0
    assert f"{pstar_for_population(10**3):.3e}" == "2.002e-06"  # [PAPER]
    assert f"{pstar_for_population(10**9):.3e}" == "2.000e-18"  # [PAPER]
    exact = Fraction(2, 10**6 * (10**6 - 1))
    assert abs(pstar_for_population(10**6) - float(exact)) <= 1e-12 * float(exact)
    with pytest.raises(ValueError):
        pstar_for_population(1)


def test_pld_formula():
    for T, l, n in [(256, 10, 2), (256, 60, 4), (16, 5, 0), (8, 9, 3)]:
        expected = Fraction(1)
        for i in range(l - n):
            expected *= Fraction(T - i, T)
        expected /= T**n
        assert pld(T, l, n) == pytest.approx(float(expected), rel=1e-15)
    assert pld(8, 3, 3) == 0  # n must stay below l


def test_termination_examples():
    t = tables_for_population(256, 10**6)
    assert t.l_min == 6 == math.ceil(1 - math.log(t.p_star, 256))
    assert t.threshold(60) == 4 and 4 >= t.threshold(60)  # [PAPER] 53 <= l <= 72 -> 4
    assert t.threshold(5) == math.inf
    assert t.threshold(109) == 0
    small = tables_for_population(256, 10**2)
    assert (small.l_min, small.l_max) == (3, 64)  # [PAPER]


def test_low_T():
    p12 = pstar_for_population(10**12)
    ok, minimal = low_T_check(256, p12)
    assert ok and minimal == 86  # [PAPER] T >= 86
    assert low_T_check(256, pstar_for_population(10**6))[0]
    assert not low_T_check(2, pstar_for_population(10**6))[0]
    assert low_T_special_case(pstar_for_population(10**6)) == 40  # [PAPER] L=40
    with pytest.raises(NoSolution):
        nstar_table(2, pstar_exact(10**6))
    # l* = 7 for T=10 and P^7(0) = 0.06048 > 1/50
    with pytest.raises(NoSolution, match="l\\*=7"):
        nstar_table(10, Fraction(1, 50))


@pytest.mark.parametrize("T, p_star", [(8, Fraction(1, 10)), (6, Fraction(3, 10)), (10, Fraction(1, 15))])
def test_phase2_matches_enumeration(T, p_star):
    t = phase2_stop_distribution(T, nstar_table(T, p_star, N=5, c_star=1.0))
    stop, sum_sq = brute_phase2(T, t)
    for l in range(t.l_max + 1):
        assert t.stop_dist[l] == pytest.approx(float(stop.get(l, 0)), abs=1e-12)
    assert t.expected_l == pytest.approx(float(sum(l * p for l, p in stop.items())), abs=1e-12)
    assert t.c == pytest.approx(math.comb(5, 2) * float(sum_sq), rel=1e-10)


def test_nstar_corollaries_hold_across_populations():
    for e in range(2, 13):
        t = tables_for_population(256, 10**e)
        assert t.nstar[t.l_min] == t.l_min - 1
        assert t.nstar[t.l_max] == 0
        steps = [t.nstar[l - 1] - t.nstar[l] for l in range(t.l_min + 1, t.l_max + 1)]
        assert set(steps) <= {0, 1}


def test_population_simulation_shape():
    t = phase2_stop_distribution(256, tables_for_population(256, 100, 1.0))
    stop, coll = simulate_population_ids(t, 100, np.random.default_rng(0))
    assert stop.shape == (100,)
    assert t.l_min <= stop.min() and stop.max() <= t.l_max
    assert coll >= 0


# -- Algorithm 5 ----------------------------------------------------------------------


def test_alg5_bound_inequality():
    for msl, rate, R in [(30, 11.4, 28232), (120, 11.4, 28232), (60, 11.4, 28232), (30, 100, 16384)]:
        b = alg5_bound(msl, rate, R)
        assert msl * (b.max_n + 1) * rate < R
        assert not msl * (b.max_n + 2) * rate < R
    assert alg5_bound(60, 11.4, 28232).max_n == 40
    assert alg5_bound(30, 11.4, 28232).bits_lost == pytest.approx(math.log2(28232 / 81))
    with pytest.raises(ValueError):
        alg5_bound(0, 1, 1)
