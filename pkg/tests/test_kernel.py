import hashlib
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from dhpstrack.errors import PortExhausted
from dhpstrack.kernel import (
    ALG5_RFC_DEFAULT_N,
    Alg5State,
    KernelConfig,
    KernelState,
    NoiseMode,
    ThreeTuple,
    alg5_next_port,
    loopback_tuple,
    prf_index,
    prf_offset,
)

RHO = 28232


def rand_tuple(rng: random.Random) -> ThreeTuple:
    return ThreeTuple(rng.getrandbits(32).to_bytes(4, "big"), rng.getrandbits(32).to_bytes(4, "big"), rng.randrange(1, 65536))


# -- PRFs -------------------------------------------------------------------------


def test_prf_matches_keyed_blake2b():
    key = bytes(range(16))
    t = ThreeTuple("10.0.0.1", "203.0.113.5", 8080)
    packed = bytes([10, 0, 0, 1, 203, 0, 113, 5]) + (8080).to_bytes(2, "big")
    assert t.packed() == packed

    def h(label):
        return int.from_bytes(hashlib.blake2b(packed, digest_size=8, key=key, person=label).digest(), "big")

    assert prf_index(key, t, 256) == h(b"dhps-index") % 256
    assert prf_offset(key, t) == h(b"dhps-offset") & 0xFFFFFFFF


def test_prf_deterministic_and_in_range():
    rng = random.Random(1)
    key = rng.getrandbits(128).to_bytes(16, "big")
    for _ in range(200):
        t = rand_tuple(rng)
        assert prf_index(key, t) == prf_index(key, t)
        assert 0 <= prf_index(key, t) < 256
        assert 0 <= prf_offset(key, t) < 2**32


def test_prf_index_uniform_chi_square():
    rng = random.Random(2)
    key = rng.getrandbits(128).to_bytes(16, "big")
    counts = np.bincount([prf_index(key, rand_tuple(rng)) for _ in range(10**5)], minlength=256)
    assert chisquare(counts).pvalue > 0.001


def test_prf_offset_uniform_mod_range():
    rng = random.Random(3)
    key = rng.getrandbits(128).to_bytes(16, "big")
    vals = np.array([prf_offset(key, rand_tuple(rng)) % RHO for _ in range(10**5)])
    counts = np.bincount(vals * 200 // RHO, minlength=200)
    assert chisquare(counts).pvalue > 0.001


def test_prf_offset_consecutive_ports_uncorrelated():
    key = bytes(16)
    x = np.array([prf_offset(key, ThreeTuple("10.0.0.1", "10.0.0.2", p)) for p in range(1000, 1100)], dtype=float)
    r = np.corrcoef(x[:-1], x[1:])[0, 1]
    assert abs(r) < 0.3  # 3.0/sqrt(99) ~ 0.3
    assert len(set(np.diff(x))) == 99


def test_index_collision_rate_over_keys():
    rng = random.Random(4)
    t = ThreeTuple("10.0.0.1", "10.0.0.2", 443)
    hits = sum(
        prf_index(rng.getrandbits(128).to_bytes(16, "big"), t) == prf_index(rng.getrandbits(128).to_bytes(16, "big"), t)
        for _ in range(10**4)
    )
    # binomial(1e4, 1/256): mean 39, sd 6.2
    assert 39 - 4 * 6.3 < hits < 39 + 4 * 6.3


# -- port selection -----------------------------------------------------------------


def test_first_port_is_offset_and_counter_advances():
    k = KernelState(seed=7)
    t = ThreeTuple("10.0.0.1", "10.0.0.2", 80)
    offset = prf_offset(k.key_k1, t)
    p1, p2 = k.attempt(t), k.attempt(t)
    assert p1 == 32768 + offset % RHO
    assert p2 == 32768 + (p1 - 32768 + 1) % RHO
    assert k.table[prf_index(k.key_k2, t)] == 2


def test_default_range_containment():
    k = KernelState(KernelConfig(noise_mode=NoiseMode.LINUX), seed=1)
    rng = random.Random(0)
    for _ in range(2000):
        assert 32768 <= k.attempt(rand_tuple(rng)) <= 60999


def test_same_seed_same_ports():
    def run(seed):
        k = KernelState(KernelConfig(noise_mode=NoiseMode.PATCHED), seed=seed)
        rng = random.Random(5)
        return [k.attempt(rand_tuple(rng)) for _ in range(300)]

    assert run(11) == run(11)
    assert run(11) != run(12)


def test_linux_noise_gap_fraction():
    k = KernelState(KernelConfig(noise_mode=NoiseMode.LINUX), seed=3)
    t = ThreeTuple("10.0.0.1", "10.0.0.2", 80)
    ports = np.array([k.attempt(t) for _ in range(10**5)])
    gaps = np.diff(ports) % RHO
    assert set(np.unique(gaps)) <= {1, 2}
    assert abs((gaps == 2).mean() - 1 / 16) < 0.005


def test_patched_noise_uniform_1_to_8():
    k = KernelState(KernelConfig(noise_mode=NoiseMode.PATCHED), seed=3)
    t = ThreeTuple("10.0.0.1", "10.0.0.2", 80)
    gaps = np.diff([k.attempt(t) for _ in range(40_000)]) % RHO
    counts = np.bincount(gaps, minlength=9)[1:]
    assert counts.sum() == len(gaps)
    assert chisquare(counts).pvalue > 0.001


def test_in_use_skips_to_next_candidate():
    k = KernelState(seed=2)
    t = ThreeTuple("10.0.0.1", "10.0.0.2", 80)
    held = k.select_ephemeral_port(t)  # connection stays open
    assert not k.check_suitable_port(t, held)
    # force the next candidate to collide with the held port
    cell = k.index_of(t)
    k.table[cell] -= 1
    nxt = k.select_ephemeral_port(t)
    assert nxt == 32768 + (held - 32768 + 1) % RHO
    assert k.table[cell] == 2  # one step per candidate tried
    k.release(t, held)
    assert k.check_suitable_port(t, held)
    assert k.check_suitable_port(ThreeTuple("10.0.0.9", "10.0.0.2", 80), nxt)


def test_port_exhausted():
    k = KernelState(KernelConfig(min_ephemeral=1000, max_ephemeral=1003), seed=0)
    t = ThreeTuple("10.0.0.1", "10.0.0.2", 80)
    ports = {k.select_ephemeral_port(t) for _ in range(4)}
    assert ports == {1000, 1001, 1002, 1003}
    with pytest.raises(PortExhausted):
        k.select_ephemeral_port(t)


def test_increment_step_two():
    k = KernelState(KernelConfig(increment_step=2), seed=0)
    t = ThreeTuple("10.0.0.1", "10.0.0.2", 80)
    a, b = k.attempt(t), k.attempt(t)
    assert (b - a) % RHO == 2


@settings(max_examples=40, deadline=None)
@given(
    mode=st.sampled_from(list(NoiseMode)),
    seed=st.integers(0, 2**32),
    count=st.integers(0, 300),
    warm=st.integers(0, 20),
)
def test_attempt_many_matches_loop(mode, seed, count, warm):
    cfg = KernelConfig(noise_mode=mode)
    a, b = KernelState(cfg, seed), KernelState(cfg, seed)
    t = loopback_tuple(443)
    for k in (a, b):
        for _ in range(warm):
            k.attempt(t)
    last = None
    for _ in range(count):
        last = a.attempt(t)
    assert b.attempt_many(t, count) == last
    assert a.table == b.table
    assert a.connect_count == b.connect_count
    assert a.rng.random() == b.rng.random()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32), n=st.integers(2, 60))
def test_ports_strictly_increase_modulo_range(seed, n):
    k = KernelState(KernelConfig(noise_mode=NoiseMode.LINUX), seed=seed)
    t = ThreeTuple("10.0.0.1", "10.0.0.2", 80)
    ports = [k.attempt(t) for _ in range(n)]
    assert all(1 <= (b - a) % RHO <= 2 for a, b in zip(ports, ports[1:]))


# -- rekey --------------------------------------------------------------------------


def test_rekey_replaces_keys_keeps_counters():
    k = KernelState(seed=1)
    t = ThreeTuple("10.0.0.1", "10.0.0.2", 80)
    k.attempt(t)
    old = (k.key_k1, k.key_k2, list(k.table))
    k.rekey()
    assert (k.key_k1, k.key_k2) != old[:2]
    assert k.table == old[2]
    assert k.rekey_count == 1


def test_rekey_can_reset_table():
    k = KernelState(KernelConfig(rekey_resets_table=True), seed=1)
    k.attempt(ThreeTuple("10.0.0.1", "10.0.0.2", 80))
    k.rekey()
    assert sum(k.table) == 0


def test_rekey_interval():
    k = KernelState(KernelConfig(rekey_interval=10), seed=1)
    t = ThreeTuple("10.0.0.1", "10.0.0.2", 80)
    for _ in range(35):
        k.attempt(t)
    assert k.rekey_count == 3
    off = KernelState(KernelConfig(rekey_interval=0), seed=1)
    keys = (off.key_k1, off.key_k2)
    for _ in range(100):
        off.attempt(t)
    assert off.rekey_count == 0 and (off.key_k1, off.key_k2) == keys


def test_collision_survives_rekey_at_rate_one_over_T():
    k = KernelState(seed=9)
    x = loopback_tuple(443)
    y = next(loopback_tuple(p) for p in range(444, 5000) if k.index_of(loopback_tuple(p)) == k.index_of(x))
    hits = 0
    for _ in range(10**4):
        k.rekey()
        hits += k.index_of(x) == k.index_of(y)
    assert 39 - 4 * 6.3 < hits < 39 + 4 * 6.3


# -- Algorithm 5 --------------------------------------------------------------------


def test_alg5_n1_sequential():
    s = Alg5State(rng=random.Random(0))
    ports = [alg5_next_port(s, 1) for _ in range(50)]
    assert ports == [32769 + i for i in range(50)]


def test_alg5_mean_advance():
    s = Alg5State(rng=random.Random(1))
    n = 81
    for _ in range(10**5):
        alg5_next_port(s, n)
    assert abs(s.counter / 10**5 - (n + 1) / 2) < 0.01 * (n + 1) / 2
    assert ALG5_RFC_DEFAULT_N == 500
    with pytest.raises(ValueError):
        alg5_next_port(s, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        KernelConfig(table_size=1)
    with pytest.raises(ValueError):
        KernelConfig(min_ephemeral=61000, max_ephemeral=60000)
    with pytest.raises(ValueError):
        KernelConfig(key_k1=b"short")
    with pytest.raises(ValueError):
        ThreeTuple("10.0.0.1", "10.0.0.2", 70000)
