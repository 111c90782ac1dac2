"""Model of the victim kernel's double-hash TCP source port selection.

The allocator follows RFC 6056 Algorithm 4: a keyed hash ``G`` picks one of
``T`` perturbation-table counters, a second keyed hash ``F`` supplies a
per-destination offset, and the candidate port is ``min_ephemeral +
(offset + counter) mod num_ephemeral``. Linux quirks (double increments with
probability 1/16, step 2) and the patched kernel's 1..8 random increments are
selectable through :class:`KernelConfig`.
"""

from __future__ import annotations

import enum
import hashlib
import ipaddress
import random
from dataclasses import dataclass, field

from dhpstrack.errors import PortExhausted

KEY_BYTES = 16


def addr(value: str | bytes) -> bytes:
    """Pack an IPv4/IPv6 address into its 4- or 16-byte form."""
    if isinstance(value, bytes):
        if len(value) not in (4, 16):
            raise ValueError(f"address must be 4 or 16 bytes, got {len(value)}")
        return value
    return ipaddress.ip_address(value).packed


def addr_str(value: bytes) -> str:
    return str(ipaddress.ip_address(value))


LOOPBACK_SRC = addr("127.0.0.1")
LOOPBACK_DST = addr("127.1.2.3")


@dataclass(frozen=True, slots=True)
class ThreeTuple:
    """(source IP, destination IP, destination port): the DHPS hash input."""

    src_ip: bytes
    dst_ip: bytes
    dst_port: int

    def __post_init__(self):
        src, dst = addr(self.src_ip), addr(self.dst_ip)
        if len(src) != len(dst):
            raise ValueError("src_ip and dst_ip belong to different address families")
        if not 1 <= self.dst_port <= 65535:
            raise ValueError(f"dst_port {self.dst_port} outside [1, 65535]")
        object.__setattr__(self, "src_ip", src)
        object.__setattr__(self, "dst_ip", dst)

    def packed(self) -> bytes:
        return self.src_ip + self.dst_ip + self.dst_port.to_bytes(2, "big")

    @property
    def is_loopback(self) -> bool:
        return self.dst_ip == LOOPBACK_DST

    def __str__(self):
        return f"{addr_str(self.src_ip)}->{addr_str(self.dst_ip)}:{self.dst_port}"


def loopback_tuple(port: int) -> ThreeTuple:
    return ThreeTuple(LOOPBACK_SRC, LOOPBACK_DST, port)


class NoiseMode(str, enum.Enum):
    NONE = "none"
    LINUX = "linux_1_16"
    PATCHED = "patched_uniform_1_8"


@dataclass(frozen=True)
class KernelConfig:
    table_size: int = 256
    min_ephemeral: int = 32768
    max_ephemeral: int = 60999
    increment_step: int = 1
    noise_mode: NoiseMode = NoiseMode.NONE
    # Number of connect calls between re-keys; None or 0 disables re-keying.
    rekey_interval: int | None = None
    rekey_resets_table: bool = False
    key_k1: bytes | None = None
    key_k2: bytes | None = None

    def __post_init__(self):
        if self.table_size < 2:
            raise ValueError("table_size must be >= 2")
        if not 1 <= self.min_ephemeral <= self.max_ephemeral <= 65535:
            raise ValueError("invalid ephemeral range")
        if self.increment_step < 1:
            raise ValueError("increment_step must be positive")
        for key in (self.key_k1, self.key_k2):
            if key is not None and len(key) != KEY_BYTES:
                raise ValueError("keys are 128-bit")
        object.__setattr__(self, "noise_mode", NoiseMode(self.noise_mode))

    @property
    def num_ephemeral(self) -> int:
        return self.max_ephemeral - self.min_ephemeral + 1


def _prf(key: bytes, label: bytes, tup: ThreeTuple) -> int:
    digest = hashlib.blake2b(tup.packed(), digest_size=8, key=key, person=label).digest()
    return int.from_bytes(digest, "big")


def prf_index(key_k2: bytes, tup: ThreeTuple, table_size: int = 256) -> int:
    """Table cell for ``tup`` (the ``G`` hash)."""
    return _prf(key_k2, b"dhps-index", tup) % table_size


def prf_offset(key_k1: bytes, tup: ThreeTuple) -> int:
    """32-bit port offset for ``tup`` (the ``F`` hash)."""
    return _prf(key_k1, b"dhps-offset", tup) & 0xFFFFFFFF


class KernelState:
    """Seedable DHPS allocator state.

    Everything random (keys, noise draws) comes from one ``random.Random``
    seeded at construction, so a (seed, config, call sequence) triple always
    reproduces the same ports.
    """

    def __init__(self, config: KernelConfig | None = None, seed: int = 0):
        self.config = config or KernelConfig()
        self.seed = seed
        self.rng = random.Random(seed)
        self.key_k1 = self.config.key_k1 or self.rng.getrandbits(128).to_bytes(KEY_BYTES, "big")
        self.key_k2 = self.config.key_k2 or self.rng.getrandbits(128).to_bytes(KEY_BYTES, "big")
        self.table = [0] * self.config.table_size
        self.in_use: set[tuple[ThreeTuple, int]] = set()
        self.connect_count = 0
        self.rekey_count = 0
        self._hash_cache: dict[ThreeTuple, tuple[int, int]] = {}

    # -- hashing -----------------------------------------------------------

    def _hashes(self, tup: ThreeTuple, cache: bool = True) -> tuple[int, int]:
        hit = self._hash_cache.get(tup)
        if hit is None:
            hit = (prf_index(self.key_k2, tup, self.config.table_size), prf_offset(self.key_k1, tup))
            if cache:
                self._hash_cache[tup] = hit
        return hit

    def index_of(self, tup: ThreeTuple) -> int:
        """Oracle access to the cell of ``tup``; test harness only."""
        return self._hashes(tup)[0]

    # -- allocation ----------------------------------------------------------

    def check_suitable_port(self, tup: ThreeTuple, port: int) -> bool:
        return (tup, port) not in self.in_use

    def select_ephemeral_port(self, tup: ThreeTuple, cache: bool = True) -> int:
        cfg = self.config
        interval = cfg.rekey_interval
        if interval and self.connect_count and self.connect_count % interval == 0:
            self.rekey()
        self.connect_count += 1

        index, offset = self._hashes(tup, cache)
        table = self.table
        num = cfg.num_ephemeral
        step = cfg.increment_step
        for attempt in range(num):
            port = cfg.min_ephemeral + (offset + table[index]) % num
            table[index] += step
            if (tup, port) not in self.in_use:
                if attempt == 0:
                    table[index] += self._noise() * step
                self.in_use.add((tup, port))
                return port
        raise PortExhausted(f"no free source port for {tup}")

    def _noise(self) -> int:
        mode = self.config.noise_mode
        if mode is NoiseMode.NONE:
            return 0
        if mode is NoiseMode.LINUX:
            return 1 if self.rng.random() < 1 / 16 else 0
        return self.rng.randint(1, 8) - 1

    def release(self, tup: ThreeTuple, port: int) -> None:
        self.in_use.discard((tup, port))

    def attempt(self, tup: ThreeTuple, cache: bool = True) -> int:
        """Connect attempt answered by RST: allocate then free the 4-tuple.

        ``cache=False`` skips memoising the hashes, for one-off destinations.
        """
        port = self.select_ephemeral_port(tup, cache)
        self.in_use.discard((tup, port))
        return port

    def attempt_many(self, tup: ThreeTuple, count: int) -> int | None:
        """``count`` back-to-back attempts to one tuple; returns the last port.

        Same result and random stream as calling :meth:`attempt` in a loop.
        """
        if count <= 0:
            return None
        if self.config.rekey_interval or self.in_use:
            for _ in range(count):
                port = self.attempt(tup)
            return port
        cfg = self.config
        index, offset = self._hashes(tup)
        step = cfg.increment_step
        noise = [self._noise() for _ in range(count)]
        before_last = self.table[index] + step * (count - 1 + sum(noise[:-1]))
        self.table[index] = before_last + step * (1 + noise[-1])
        self.connect_count += count
        return cfg.min_ephemeral + (offset + before_last) % cfg.num_ephemeral

    def rekey(self) -> None:
        self.key_k1 = self.rng.getrandbits(128).to_bytes(KEY_BYTES, "big")
        self.key_k2 = self.rng.getrandbits(128).to_bytes(KEY_BYTES, "big")
        self._hash_cache.clear()
        self.in_use.clear()
        if self.config.rekey_resets_table:
            self.table = [0] * self.config.table_size
        self.rekey_count += 1


@dataclass
class Alg5State:
    """Global counter of RFC 6056 Algorithm 5 (random increments)."""

    min_ephemeral: int = 32768
    max_ephemeral: int = 60999
    counter: int = 0
    rng: random.Random = field(default_factory=random.Random)

    @property
    def num_ephemeral(self) -> int:
        return self.max_ephemeral - self.min_ephemeral + 1


def alg5_next_port(state: Alg5State, n: int) -> int:
    """Advance the global counter by a uniform draw in [1, n] and return the port."""
    if n < 1:
        raise ValueError("N must be >= 1")
    state.counter += state.rng.randint(1, n)
    return state.min_ephemeral + state.counter % state.num_ephemeral


ALG5_RFC_DEFAULT_N = 500
