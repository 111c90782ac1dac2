"""Tracking-server logic.

The server only ever sees SYN observations (client IP, source port,
destination port, arrival time). From those it orders measurements per
destination, turns consecutive source-port snapshots into counter
differences, decodes which loopback tuples share a cell with which attacker
destination, and assembles the canonical device ID.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np

from dhpstrack.errors import (
    AmbiguousOrder,
    DecodeConflict,
    InsufficientData,
    MissingHigh,
    PoolExhausted,
    UnknownDestination,
)

# Ports a browser refuses to connect to; the pool never hands these out.
BLOCKED_PORTS = frozenset({
    1, 7, 9, 11, 13, 15, 17, 19, 20, 21, 22, 23, 25, 37, 42, 43, 53, 69, 77, 79,
    87, 95, 101, 102, 103, 104, 109, 110, 111, 113, 115, 117, 119, 123, 135, 137,
    139, 143, 161, 179, 389, 427, 465, 512, 513, 514, 515, 526, 530, 531, 532,
    540, 548, 554, 556, 563, 587, 601, 636, 989, 990, 993, 995, 1719, 1720, 1723,
    2049, 3659, 4045, 5060, 5061, 6000, 6566, 6665, 6666, 6667, 6668, 6669, 6697,
    10080,
})
POOL_CAPACITY = 65535 - len(BLOCKED_PORTS)
MAX_RERUNS = 3


@dataclass(frozen=True, slots=True)
class SynObservation:
    client_ip: bytes
    src_port: int
    dst_port: int
    arrival_index: int
    tick: int = 0


# -- ordering and differences -------------------------------------------------


def separate_bursts(ports: Sequence[int], num_ephemeral: int) -> list[int]:
    """Recover send order of the source ports seen for one destination.

    Ports increase with send time except across a single wraparound, which
    shows up as a gap larger than half the ephemeral range.
    """
    ordered = sorted(ports)
    big = [i for i in range(1, len(ordered)) if ordered[i] - ordered[i - 1] > num_ephemeral / 2]
    if len(big) > 1:
        raise AmbiguousOrder(f"{len(big)} wraparound candidates in {ordered}")
    if big:
        cut = big[0]
        ordered = ordered[cut:] + ordered[:cut]
    return ordered


class DeltaMode(str, Enum):
    CONSECUTIVE_PAIR = "consecutive_pair"
    MAX_CONSECUTIVE = "max_consecutive"


def compute_delta(ports: Sequence[int], num_ephemeral: int, mode: DeltaMode | str = DeltaMode.CONSECUTIVE_PAIR) -> int:
    if len(ports) < 2:
        raise InsufficientData("need at least two measurements")
    mode = DeltaMode(mode)
    if mode is DeltaMode.CONSECUTIVE_PAIR:
        return (ports[-1] - ports[-2]) % num_ephemeral
    return max((b - a) % num_ephemeral for a, b in zip(ports, ports[1:]))


# -- segment decoding -----------------------------------------------------------


def segment_of(delta: int, beta: int) -> int:
    return (delta - 1) // beta


def decode_segments(
    deltas: Mapping, alpha: int, beta: int, allow_missing_high: bool = False, fill_high: bool = True
) -> dict[int, object]:
    """Map loopback index i (0..alpha-1) to the attacker tuple sharing its cell.

    The single tuple whose difference reaches 2^(alpha-1) * beta + 1 holds the
    largest loopback and is set aside; every other tuple's segment number is
    read in binary, and loopbacks nobody claimed go to the set-aside tuple.
    """
    high_threshold = (1 << (alpha - 1)) * beta + 1
    high = [w for w, d in deltas.items() if d >= high_threshold]
    if len(high) > 1:
        raise DecodeConflict(f"{len(high)} tuples above the set-aside threshold")
    if not high and not allow_missing_high:
        raise MissingHigh("no tuple carries the largest loopback")
    mapping: dict[int, object] = {}
    for w, d in deltas.items():
        if high and w == high[0]:
            continue
        k = segment_of(d, beta)
        for i in range(alpha - 1):
            if k >> i & 1:
                if i in mapping:
                    raise DecodeConflict(f"loopback {i} claimed twice")
                mapping[i] = w
    if high and fill_high:
        for i in range(alpha):
            mapping.setdefault(i, high[0])
    return mapping


def unassigned(mapping: Mapping[int, object], alpha: int) -> list[int]:
    return [i for i in range(alpha) if i not in mapping]


# -- device ID ------------------------------------------------------------------


@dataclass(frozen=True)
class DeviceId:
    """Independent loopback collision pairs plus the loopback count ``l``.

    Loopback tuples are named by destination port. Each pair is
    (first loopback seen in the cell, later loopback in the same cell).
    """

    pairs: frozenset
    l: int

    @property
    def n(self) -> int:
        return len(self.pairs)

    def digest(self) -> str:
        body = json.dumps({"l": self.l, "pairs": sorted(self.pairs)}, separators=(",", ":"))
        return hashlib.sha256(body.encode()).hexdigest()[:16]

    def to_json(self) -> dict:
        return {"l": self.l, "n": self.n, "pairs": [list(p) for p in sorted(self.pairs)], "digest": self.digest()}


@dataclass
class IdBuilder:
    """Running state of loopback-to-cell assignments."""

    cell_first: dict = field(default_factory=dict)
    pairs: list = field(default_factory=list)
    l: int = 0

    @property
    def n(self) -> int:
        return len(self.pairs)

    def freeze(self) -> DeviceId:
        return DeviceId(frozenset(self.pairs), self.l)


def update_device_id(builder: IdBuilder, loopback: int, cell) -> tuple[int, list]:
    """Record that ``loopback`` shares ``cell``; returns (n, pairs)."""
    builder.l += 1
    first = builder.cell_first.get(cell)
    if first is None:
        builder.cell_first[cell] = loopback
    else:
        builder.pairs.append((first, loopback))
    return builder.n, builder.pairs


def should_terminate(n: int, l: int, tables) -> bool:
    if l < 1:
        raise ValueError("l must be >= 1")
    return n >= tables.threshold(l)


# -- destination port pool ----------------------------------------------------


class PortPool:
    """Destination ports of one server IP, handed out per client IP.

    Clients behind the same public IP share that IP's 65455 usable ports;
    allocations are lowest-port-first and never overlap a live allocation.
    """

    def __init__(self, blocked: Iterable[int] = BLOCKED_PORTS):
        self._usable = np.ones(65536, dtype=bool)
        self._usable[0] = False
        self._usable[list(blocked)] = False
        self.capacity = int(self._usable.sum())
        self._live: dict[bytes, np.ndarray] = {}

    def _live_for(self, client_ip: bytes) -> np.ndarray:
        live = self._live.get(client_ip)
        if live is None:
            live = self._live[client_ip] = np.zeros(65536, dtype=bool)
        return live

    def remaining(self, client_ip: bytes) -> int:
        return self.capacity - int(self._live_for(client_ip).sum())

    def allocate(self, client_ip: bytes, count: int, exclude: np.ndarray | None = None) -> list[int]:
        live = self._live_for(client_ip)
        free = self._usable & ~live
        if exclude is not None:
            free &= ~exclude
        ports = np.flatnonzero(free)[:count]
        if len(ports) < count:
            raise PoolExhausted(f"client {client_ip.hex()} needs {count} ports, {len(ports)} free")
        live[ports] = True
        return ports.tolist()

    def release(self, client_ip: bytes, ports: Iterable[int]) -> None:
        ports = list(ports)
        live = self._live_for(client_ip)
        if ports and not live[ports].all():
            raise ValueError("releasing ports that were not allocated")
        live[ports] = False


def allocate_ports(pool: PortPool, client_ip: bytes, count: int) -> list[int]:
    return pool.allocate(client_ip, count)


def release_ports(pool: PortPool, client_ip: bytes, ports: Iterable[int]) -> None:
    pool.release(client_ip, ports)


def max_concurrent_clients(T: int, capacity: int = POOL_CAPACITY) -> int:
    """Clients behind one IP a server IP sustains at the 2(T-1) peak."""
    return capacity // (2 * (T - 1))


# -- traffic metering -----------------------------------------------------------


def traffic_count(before: Mapping, after: Mapping, num_ephemeral: int) -> int:
    """Connections made between two polls of all T unique destinations.

    Each poll itself advances every counter once, hence the -1.
    """
    return sum((after[w] - before[w] - 1) % num_ephemeral for w in before)


# -- phase-2 decoding with drop recovery ----------------------------------------


class Recovery(str, Enum):
    RECONSTRUCTED = "reconstructed"
    RERUN_GROUP = "rerun_group"


@dataclass
class GroupResult:
    index: int
    mapping: dict | None = None
    deltas: dict | None = None
    status: str = "ok"
    attempts: int = 0


@dataclass
class Phase2Layout:
    """What the server knows about the client's phase-2 schedule."""

    destinations: list[int]  # the T unique attacker destination ports
    alpha: int
    beta: int
    groups: int
    loopback_ports: list[list[int]]  # per group, L_0..L_{alpha-1}
    burst_windows: list[tuple[int, int]]  # (first tick, last tick) per burst
    max_delay: int = 0


def locate_missing(arrivals: Sequence[int], windows: Sequence[tuple[int, int]], max_delay: int) -> list[tuple[int, ...]]:
    """Burst indices that could be missing given per-observation arrival ticks.

    ``arrivals`` follow send order. An observation from burst b can arrive
    between the burst's first tick and its last tick plus ``max_delay``.
    Every consistent hypothesis is returned.
    """
    missing = len(windows) - len(arrivals)
    if missing <= 0 or missing > 2:
        return []
    found = []
    for gone in combinations(range(len(windows)), missing):
        kept = [w for b, w in enumerate(windows) if b not in gone]
        if all(lo <= a <= hi + max_delay for a, (lo, hi) in zip(arrivals, kept)):
            found.append(gone)
    return found


class ServerSession:
    """State the server keeps for one tracked client."""

    def __init__(self, client_ip: bytes, pool: PortPool, T: int, num_ephemeral: int, tables=None):
        self.client_ip = client_ip
        self.pool = pool
        self.T = T
        self.num_ephemeral = num_ephemeral
        self.tables = tables
        self._allocated: set[int] = set()
        self._ever_used = np.zeros(65536, dtype=bool)
        self._seen: set[tuple[bytes, int, int]] = set()
        self.log: list[SynObservation] = []
        self.exchange: list[SynObservation] = []
        self.duplicates = 0
        self.peak_allocation = 0
        self.groups: list[GroupResult] = []
        self.group_rows: list[dict] = []
        self.device_id: DeviceId | None = None
        self.out_of_order_flags = 0

    # -- pool ---------------------------------------------------------------

    def allocate(self, count: int) -> list[int]:
        ports = self.pool.allocate(self.client_ip, count, exclude=self._ever_used)
        self._ever_used[ports] = True
        self._allocated.update(ports)
        self.peak_allocation = max(self.peak_allocation, len(self._allocated))
        return ports

    def release(self, ports: Iterable[int]) -> None:
        ports = list(ports)
        self.pool.release(self.client_ip, ports)
        self._allocated.difference_update(ports)

    def close(self) -> None:
        self.release(sorted(self._allocated))

    # -- capture ------------------------------------------------------------

    def begin_exchange(self, reset_dedup: bool = False) -> None:
        """Start a new measurement; ``reset_dedup`` forgets earlier SYNs too."""
        self.exchange = []
        if reset_dedup:
            self._seen.clear()

    def record_syn(self, obs: SynObservation) -> None:
        if obs.dst_port not in self._allocated:
            raise UnknownDestination(f"port {obs.dst_port} not allocated to this session")
        key = (obs.client_ip, obs.src_port, obs.dst_port)
        if key in self._seen:
            self.duplicates += 1
            return
        self._seen.add(key)
        self.log.append(obs)
        self.exchange.append(obs)

    def exchange_ports(self, dst_ports: Iterable[int] | None = None) -> dict[int, list[SynObservation]]:
        """Observations of the current exchange grouped by destination, in send order."""
        wanted = None if dst_ports is None else set(dst_ports)
        by_dst: dict[int, list[SynObservation]] = {}
        for obs in self.exchange:
            if wanted is None or obs.dst_port in wanted:
                by_dst.setdefault(obs.dst_port, []).append(obs)
        out = {}
        for dst, items in by_dst.items():
            order = separate_bursts([o.src_port for o in items], self.num_ephemeral)
            rank = {p: i for i, p in enumerate(order)}
            out[dst] = sorted(items, key=lambda o: rank[o.src_port])
        if wanted is not None:
            for dst in wanted:
                out.setdefault(dst, [])
        return out

    def source_ports(self, dst_ports: Iterable[int]) -> dict[int, list[int]]:
        return {d: [o.src_port for o in obs] for d, obs in self.exchange_ports(dst_ports).items()}

    # -- phase 2 ------------------------------------------------------------

    def group_deltas(self, series: Mapping[int, list[int]], group: int) -> dict[int, int]:
        return {w: (ports[group + 1] - ports[group]) % self.num_ephemeral for w, ports in series.items()}

    def phase2_series(self, layout: Phase2Layout) -> tuple[dict[int, list[list]], set[int]]:
        """Candidate snapshot series per destination, ``None`` at dropped bursts.

        A destination with gaps gets one series per drop placement that fits
        the arrival ticks. Destinations whose gaps fit no placement are
        returned separately.
        """
        expected = layout.groups + 1
        series: dict[int, list[list]] = {}
        unlocated: set[int] = set()
        for w, items in self.exchange_ports(layout.destinations).items():
            ports = [o.src_port for o in items]
            if len(ports) == expected:
                series[w] = [ports]
                continue
            spots = locate_missing([o.tick for o in items], layout.burst_windows, layout.max_delay)
            if not spots:
                unlocated.add(w)
                continue
            options = []
            for gone in spots:
                filled = list(ports)
                for b in gone:
                    filled.insert(b, None)
                options.append(filled)
            series[w] = options
        return series, unlocated

    def decode_async(self, layout: Phase2Layout) -> tuple[list[GroupResult], dict[int, set[int]]]:
        """Decode every group of a single-exchange phase 2.

        A destination's difference in a group counts only when every drop
        placement consistent with its arrivals agrees on it. Returns
        per-group results and, for groups that still need a rerun, the
        destinations whose difference stayed unknown.
        """
        series, unlocated = self.phase2_series(layout)
        rho = self.num_ephemeral
        results: list[GroupResult] = []
        missing: dict[int, set[int]] = {}
        for g in range(layout.groups):
            deltas = {}
            lost = set(unlocated)
            for w, options in series.items():
                seen = set()
                for ports in options:
                    a, b = ports[g], ports[g + 1]
                    seen.add(None if a is None or b is None else (b - a) % rho)
                if len(seen) == 1 and None not in seen:
                    deltas[w] = seen.pop()
                else:
                    lost.add(w)
            res = GroupResult(g, deltas=deltas)
            if lost:
                res.status = "missing"
                missing[g] = lost
            else:
                try:
                    res.mapping = decode_segments(deltas, layout.alpha, layout.beta)
                except (DecodeConflict, MissingHigh) as exc:
                    res.status = type(exc).__name__
                    missing[g] = set()
            results.append(res)

        # single drops: one destination lacks burst b, so groups b-1 and b are
        # blind for it, but the difference across both is still known
        for w, options in series.items():
            if len(options) != 1:
                continue
            ports = options[0]
            gaps = [b for b, p in enumerate(ports) if p is None]
            if len(gaps) != 1:
                continue
            b = gaps[0]
            groups = [g for g in (b - 1, b) if 0 <= g < layout.groups]
            if any(missing.get(g) != {w} for g in groups):
                continue
            span = None
            if 0 < b < layout.groups:
                span = (ports[b + 1] - ports[b - 1]) % rho
            action, maps = recover_missing(
                [results[g].deltas for g in groups], w, span, layout.alpha, layout.beta
            )
            if action is Recovery.RECONSTRUCTED:
                for g, m in zip(groups, maps):
                    results[g].mapping = m
                    results[g].status = Recovery.RECONSTRUCTED.value
                    missing.pop(g)

        # whatever is left: let the other destinations speak for the lost ones
        for g, lost in list(missing.items()):
            if not lost:
                continue
            action, maps = recover_missing([results[g].deltas], lost, None, layout.alpha, layout.beta)
            if action is Recovery.RECONSTRUCTED:
                results[g].mapping = maps[0]
                results[g].status = Recovery.RECONSTRUCTED.value
                missing.pop(g)
        return results, missing

    def decode_sandwich(self, layout: Phase2Layout, group: int, mode: DeltaMode = DeltaMode.MAX_CONSECUTIVE) -> GroupResult:
        """Decode a group measured in its own exchange (burst, loopbacks, burst)."""
        obs = self.source_ports(layout.destinations)
        deltas, lost = {}, set()
        for w, ports in obs.items():
            if len(ports) < 2:
                lost.add(w)
            else:
                deltas[w] = compute_delta(ports, self.num_ephemeral, mode)
        res = GroupResult(group, deltas=deltas)
        if lost:
            action, maps = recover_missing([deltas], lost, None, layout.alpha, layout.beta)
            if action is Recovery.RECONSTRUCTED:
                res.mapping, res.status = maps[0], Recovery.RECONSTRUCTED.value
                return res
        if lost:
            res.status = "missing"
            return res
        try:
            res.mapping = decode_segments(deltas, layout.alpha, layout.beta)
        except (DecodeConflict, MissingHigh) as exc:
            res.status = type(exc).__name__
        return res


def recover_missing(group_deltas: Sequence[Mapping], lost, span: int | None, alpha: int, beta: int):
    """Try to explain groups in which the ``lost`` destinations have no difference.

    Other destinations are decoded by segment, the set-aside tuple
    included. Since S' covers every cell,
    loopbacks they leave unclaimed must belong to a lost destination; with a
    single lost destination that settles the group, with several it does
    only when nothing is left unclaimed. ``span`` (the difference across all
    listed groups, bridging a dropped burst of a single lost destination) is
    checked against the noiseless expectation.
    """
    lost_set = set(lost) if isinstance(lost, (set, frozenset)) else {lost}
    high_threshold = (1 << (alpha - 1)) * beta + 1
    maps = []
    expected = 0
    for deltas in group_deltas:
        others = {w: d for w, d in deltas.items() if w not in lost_set}
        try:
            m = decode_segments(others, alpha, beta, allow_missing_high=True, fill_high=False)
        except DecodeConflict:
            return Recovery.RERUN_GROUP, None
        # the set-aside tuple may not simply absorb the leftovers here: a
        # lost destination competes for them, so its segment is read too
        high = [w for w, d in others.items() if d >= high_threshold]
        if high:
            k = segment_of(others[high[0]], beta)
            if k >> alpha:
                return Recovery.RERUN_GROUP, None
            for i in range(alpha):
                if k >> i & 1:
                    if i in m:
                        return Recovery.RERUN_GROUP, None
                    m[i] = high[0]
        rest = unassigned(m, alpha)
        if rest and len(lost_set) != 1:
            return Recovery.RERUN_GROUP, None
        for i in rest:
            m[i] = next(iter(lost_set))
        expected += 1 + beta * sum(1 << i for i in rest)
        maps.append(m)
    if span is not None and (len(lost_set) != 1 or not 0 <= span - expected < beta):
        return Recovery.RERUN_GROUP, None
    return Recovery.RECONSTRUCTED, maps


# -- exports --------------------------------------------------------------------


def transcript_json(session: ServerSession) -> str:
    return json.dumps(
        {
            "client_ip": session.client_ip.hex(),
            "observations": [
                [o.src_port, o.dst_port, o.arrival_index, o.tick] for o in session.log
            ],
            "duplicates": session.duplicates,
            "groups": [
                {
                    "index": g.index,
                    "status": g.status,
                    "attempts": g.attempts,
                    "deltas": {str(k): v for k, v in (g.deltas or {}).items()},
                    "mapping": {str(k): v for k, v in (g.mapping or {}).items()},
                }
                for g in session.groups
            ],
            "device_id": session.device_id.to_json() if session.device_id else None,
        },
        sort_keys=True,
    )


def group_summary_csv(session: ServerSession) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["group", "pattern", "n", "terminated"])
    for row in session.group_rows:
        writer.writerow([row["group"], row["pattern"], row["n"], int(row["terminated"])])
    return buf.getvalue()


class Phase2Assembler:
    """Feeds decoded groups into the device ID until the termination rule fires."""

    def __init__(self, session: ServerSession, layout: Phase2Layout, tables):
        self.session = session
        self.layout = layout
        self.tables = tables
        self.builder = IdBuilder()
        self.terminated = False

    def feed(self, res: GroupResult) -> bool:
        layout, b = self.layout, self.builder
        session = self.session
        session.groups.append(res)
        pattern = []
        for i in range(layout.alpha):
            cell = res.mapping[i]
            pattern.append(cell)
            update_device_id(b, layout.loopback_ports[res.index][i], cell)
            if should_terminate(b.n, b.l, self.tables):
                self.terminated = True
                break
        session.group_rows.append(
            {"group": res.index, "pattern": "/".join(map(str, pattern)), "n": b.n, "terminated": self.terminated}
        )
        if self.terminated:
            session.device_id = b.freeze()
        return self.terminated
