"""Iteration count of the unique-cell discovery phase.

Each iteration throws ``k = T - 1`` fresh attacker destinations into the
``T`` cells; destinations alone in their cell whose cell is not yet covered
join the covered set. The number of covered cells is a Markov chain whose
transition matrix is built from P(k singletons) and a hypergeometric-like
term ``p_ijk``; the iteration count distribution is read off the absorbing
coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln
from scipy.stats import binom

from dhpstrack.analysis.occupancy import OccupancyDP


def expected_new_unique(n: int, k: int, T: int) -> float:
    """E[cells newly covered] with ``n`` cells covered and ``k`` new candidates."""
    if not 0 <= n <= T:
        raise ValueError("need 0 <= n <= T")
    if k == 0:
        return 0.0
    return (T - n) / T * k * (1 - 1 / T) ** (k - 1)


def optimal_batch_size(T: int) -> int:
    """Integer batch size maximising the expected gain; ties go to the smaller k."""
    if T < 2:
        raise ValueError("need T >= 2")
    k_real = -1 / math.log1p(-1 / T)
    lo, hi = max(1, math.floor(k_real)), max(1, math.ceil(k_real))
    g_lo, g_hi = expected_new_unique(0, lo, T), expected_new_unique(0, hi, T)
    # floor/ceil values tie analytically near T-1/T; prefer fewer packets
    return lo if g_lo >= g_hi * (1 - 1e-12) else hi


def _log_falling(a, m):
    """log(a (a-1) ... (a-m+1)) elementwise; -inf when the product is zero."""
    a = np.asarray(a, dtype=float)
    m = np.asarray(m, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = gammaln(a + 1) - gammaln(np.maximum(a - m + 1, 1e-300))
    return np.where(a - m + 1 <= 0, np.where(m == 0, 0.0, -np.inf), out)


def singleton_pmf(T: int, balls: int | None = None, accept_prob: float = 1.0) -> np.ndarray:
    """P(k bins hold a single ball) after ``balls`` throws.

    With ``accept_prob`` < 1 every singleton is kept independently with that
    probability (binomial thinning), which models measurement noise that
    spoils an otherwise clean difference.
    """
    balls = T - 1 if balls is None else balls
    pmf = OccupancyDP(T, 1).step(balls).marginal(1)
    if accept_prob >= 1.0:
        return pmf
    ks = np.arange(T + 1)
    kernel = binom.pmf(ks[:, None], ks[None, :], accept_prob)  # [kept, singles]
    return kernel @ pmf


def transition_matrix(T: int, singles: np.ndarray) -> np.ndarray:
    """A[i, j] = P(i covered after the iteration | j covered before), j < T."""
    size = T + 1
    A = np.zeros((size, size))
    i = np.arange(size)[:, None]
    k = np.arange(size)[None, :]
    log_binom_cache = gammaln(np.arange(size + 1) + 1)
    for j in range(T):  # j = T is absorbing and intentionally dropped
        valid = (i >= j) & (k >= i - j) & (k <= i) & (singles[None, :] > 0)
        d = np.clip(i - j, 0, size)
        kd = np.clip(k - d, 0, size)
        log_binom = log_binom_cache[k] - log_binom_cache[d] - log_binom_cache[kd]
        log_p = (
            log_binom
            + _log_falling(T - j, d)
            + _log_falling(j, kd)
            - _log_falling(T, k)
        )
        with np.errstate(divide="ignore"):
            term = np.where(valid, np.exp(log_p) * singles[None, :], 0.0)
        A[:, j] = term.sum(axis=1)
    return A


@dataclass
class Phase1Distribution:
    T: int
    stop: np.ndarray  # stop[l] = P(terminate at iteration l), index 0 unused
    expected: float
    survival: np.ndarray

    @property
    def mode(self) -> int:
        return int(np.argmax(self.stop))


def phase1_stop_distribution(
    T: int, tol: float = 1e-16, max_iter: int = 10_000, accept_prob: float = 1.0
) -> Phase1Distribution:
    """Exact distribution of phase-1 iterations for table size ``T``."""
    if T < 2:
        raise ValueError("need T >= 2")
    if not 0.0 < accept_prob <= 1.0:
        raise ValueError("accept_prob must lie in (0, 1]")
    singles = singleton_pmf(T, accept_prob=accept_prob)
    A = transition_matrix(T, singles)
    p = singles.copy()
    stop = [0.0]
    survival = [1.0]
    for _ in range(max_iter):
        stop.append(p[T])
        p = p.copy()
        p[T] = 0.0
        alive = p.sum()
        survival.append(alive)
        if alive < tol:
            break
        p = A @ p
    stop_arr = np.array(stop)
    expected = float(np.dot(np.arange(len(stop_arr)), stop_arr))
    return Phase1Distribution(T, stop_arr, expected, np.array(survival))


def simulate_phase1_iterations(
    T: int,
    trials: int,
    rng: np.random.Generator,
    batch: int | None = None,
    reject_prob: float = 0.0,
    chunk: int = 20_000,
    max_iter: int = 1000,
) -> np.ndarray:
    """Monte Carlo of the phase-1 process by throwing balls directly.

    ``reject_prob`` drops each otherwise-accepted singleton independently,
    modelling measurement noise that inflates a unique cell's difference.
    Returns the iteration count of every trial.
    """
    batch = T - 1 if batch is None else batch
    out = np.empty(trials, dtype=np.int64)
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        covered = np.zeros((m, T), dtype=bool)
        alive = np.arange(m)
        iters = np.zeros(m, dtype=np.int64)
        it = 0
        while alive.size:
            it += 1
            if it > max_iter:
                raise RuntimeError("phase-1 simulation did not terminate")
            n = alive.size
            cells = rng.integers(0, T, size=(n, batch), dtype=np.int64)
            flat = (np.arange(n)[:, None] * T + cells).ravel()
            counts = np.bincount(flat, minlength=n * T).reshape(n, T)
            gain = (counts == 1) & ~covered[alive]
            if reject_prob:
                gain &= rng.random(gain.shape) >= reject_prob
            covered[alive] |= gain
            finished = covered[alive].all(axis=1)
            iters[alive[finished]] = it
            alive = alive[~finished]
        out[done : done + m] = iters
        done += m
    return out
