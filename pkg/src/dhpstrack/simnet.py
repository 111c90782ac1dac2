"""Logical-time network between the victim kernel and the tracking server.

Time advances in ticks; by default every burst occupies one tick. Within a
tick the client's connection attempts run through the kernel in order,
interleaved with organic connections, and the resulting SYNs pass a NAT
stage, a per-tick throttle, random loss (with at most one retransmission a
tick later) and bounded reordering before reaching the server.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Sequence

import numpy as np

from dhpstrack.errors import AttackError, DhpsError
from dhpstrack.kernel import KernelConfig, KernelState, ThreeTuple, addr
from dhpstrack.server import SynObservation


class RewriteMode(str, Enum):
    PRESERVE = "preserve"
    REWRITE_ALL = "rewrite_all"  # sequential NAT port assignment
    REWRITE_RANDOM = "rewrite_random"


@dataclass(frozen=True)
class NetConfig:
    drop_prob: float = 0.0
    reorder_window: int = 0
    rewrite_mode: RewriteMode = RewriteMode.PRESERVE
    throttle: int | None = None  # max SYNs leaving per tick
    retransmit: bool = False

    def __post_init__(self):
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop_prob must lie in [0, 1]")
        if self.reorder_window < 0:
            raise ValueError("reorder_window must be non-negative")
        if self.throttle is not None and self.throttle < 1:
            raise ValueError("throttle must be positive")
        object.__setattr__(self, "rewrite_mode", RewriteMode(self.rewrite_mode))

    @property
    def max_delay(self) -> int:
        """Ticks a SYN may trail its send tick."""
        return 1 if self.retransmit else 0


@dataclass(frozen=True, slots=True)
class Packet:
    """A SYN leaving the client: kernel-chosen source port and send tick."""

    client_ip: bytes
    src_port: int
    dst_port: int
    tick: int


class Nat:
    """Source-port translation per flow; one instance per client network."""

    def __init__(self, mode: RewriteMode | str, rng: np.random.Generator):
        self.mode = RewriteMode(mode)
        self.rng = rng
        self._flows: dict[tuple[int, int], int] = {}
        self._next = int(rng.integers(1024, 65536)) if self.mode is RewriteMode.REWRITE_ALL else 0

    def translate(self, src_port: int, dst_port: int) -> int:
        if self.mode is RewriteMode.PRESERVE:
            return src_port
        key = (src_port, dst_port)
        port = self._flows.get(key)
        if port is None:
            if self.mode is RewriteMode.REWRITE_ALL:
                port = self._next
                self._next = 1024 + (self._next - 1024 + 1) % (65536 - 1024)
            else:
                port = int(self.rng.integers(1024, 65536))
            self._flows[key] = port
        return port


def deliver(
    events: Sequence[Packet],
    cfg: NetConfig,
    rng: np.random.Generator,
    nat: Nat | None = None,
    start_index: int = 0,
) -> list[SynObservation]:
    """Push SYNs through NAT, throttle, loss/retransmission and reordering."""
    nat = nat or Nat(cfg.rewrite_mode, rng)
    translated = [
        Packet(p.client_ip, nat.translate(p.src_port, p.dst_port), p.dst_port, p.tick) for p in events
    ]
    by_tick: dict[int, list[Packet]] = {}
    for p in translated:
        by_tick.setdefault(p.tick, []).append(p)

    out: list[SynObservation] = []
    index = start_index
    pending: list[Packet] = []
    ticks = sorted(by_tick)
    pos = 0
    tick = ticks[0] if ticks else 0
    while pos < len(ticks) or pending:
        if not pending:
            tick = ticks[pos]
        fresh = []
        if pos < len(ticks) and ticks[pos] == tick:
            fresh = by_tick[tick]
            pos += 1
        batch = [(p, True) for p in pending] + [(p, False) for p in fresh]
        pending = []
        lost = np.zeros(len(batch), dtype=bool)
        if cfg.throttle is not None:
            lost[cfg.throttle :] = True
        if cfg.drop_prob:
            lost |= rng.random(len(batch)) < cfg.drop_prob
        arrived = []
        for (p, is_retry), gone in zip(batch, lost):
            if not gone:
                arrived.append(p)
            elif cfg.retransmit and not is_retry:
                pending.append(p)
        if cfg.reorder_window and len(arrived) > 1:
            keys = np.arange(len(arrived)) + rng.uniform(0, cfg.reorder_window, len(arrived))
            arrived = [arrived[i] for i in np.argsort(keys, kind="stable")]
        for p in arrived:
            out.append(SynObservation(p.client_ip, p.src_port, p.dst_port, index, tick))
            index += 1
        tick += 1
    return out


def _random_external_tuple(src_ip: bytes, rng: np.random.Generator) -> ThreeTuple:
    ip = int(rng.integers(1 << 24, 0xE0000000))
    return ThreeTuple(src_ip, ip.to_bytes(4, "big"), int(rng.integers(1, 65536)))


def organic_connections(kernel: KernelState, count: int, rng: np.random.Generator, src_ip: bytes | str = "192.168.1.10") -> None:
    """Exactly ``count`` connections to random external destinations."""
    src = addr(src_ip)
    for _ in range(count):
        kernel.attempt(_random_external_tuple(src, rng), cache=False)


def organic_traffic(
    kernel: KernelState,
    rate: float,
    duration: int,
    rng: np.random.Generator,
    src_ip: bytes | str = "192.168.1.10",
) -> int:
    """Connections to random external destinations, Poisson(rate) per tick.

    Returns the number of connections made.
    """
    if rate < 0:
        raise ValueError("rate must be non-negative")
    if rate == 0 or duration <= 0:
        return 0
    total = int(rng.poisson(rate, duration).sum())
    organic_connections(kernel, total, rng, src_ip)
    return total


class SimNet:
    """Clock, NAT state and traffic sources of one client network."""

    def __init__(
        self,
        cfg: NetConfig | None = None,
        seed: int = 0,
        organic_rate: float = 0.0,
        rekey_every_ticks: int | None = None,
        reconnect_prob: float = 0.0,
        local_ip: bytes | str = "192.168.1.10",
    ):
        self.cfg = cfg or NetConfig()
        self.rng = np.random.default_rng(seed)
        self.nat = Nat(self.cfg.rewrite_mode, self.rng)
        self.organic_rate = organic_rate
        self.rekey_every_ticks = rekey_every_ticks
        self.reconnect_prob = reconnect_prob
        self.local_ip = addr(local_ip)
        self.tick = 0
        self.arrivals = 0
        self.syns_sent = 0
        self.organic_connects = 0
        self.rekeys = 0

    def _clock(self, kernel: KernelState) -> None:
        every = self.rekey_every_ticks
        if every and self.tick and self.tick % every == 0:
            kernel.rekey()
            self.rekeys += 1

    def _run_tick(self, kernel: KernelState, actions: list, client_ip: bytes, packets: list) -> None:
        self._clock(kernel)
        organic = int(self.rng.poisson(self.organic_rate)) if self.organic_rate else 0
        if organic:
            slots = np.sort(self.rng.integers(0, len(actions) + 1, organic))
        else:
            slots = ()
        k = 0
        for pos, (tup, count) in enumerate(actions):
            while k < len(slots) and slots[k] <= pos:
                kernel.attempt(_random_external_tuple(self.local_ip, self.rng), cache=False)
                k += 1
            if tup.is_loopback:
                kernel.attempt_many(tup, count)
                continue
            for _ in range(count):
                packets.append(Packet(client_ip, kernel.attempt(tup), tup.dst_port, self.tick))
                if self.reconnect_prob and self.rng.random() < self.reconnect_prob:
                    packets.append(Packet(client_ip, kernel.attempt(tup), tup.dst_port, self.tick))
        for _ in range(k, len(slots)):
            kernel.attempt(_random_external_tuple(self.local_ip, self.rng), cache=False)
        self.organic_connects += organic
        self.tick += 1

    def execute(self, kernel: KernelState, steps: Sequence, session, client_ip: bytes | str) -> list[tuple[int, int]]:
        """Run a client script as one exchange; returns each burst's tick window.

        Loopback steps never reach the wire; they are folded into the tick of
        the burst that follows them. Observations are handed to
        ``session.record_syn`` once the exchange (and any retransmission
        tick) is over, after which one more tick passes while the client
        waits for the server.
        """
        client_ip = addr(client_ip)
        packets: list[Packet] = []
        windows: list[tuple[int, int]] = []
        loops: list = []
        for step in steps:
            if step.kind == "loopback":
                loops.extend((t, step.repeat) for t in step.targets)
                continue
            targets = list(step.targets)
            parts = max(1, step.ticks)
            size = math.ceil(len(targets) / parts) if targets else 0
            first = self.tick
            for j in range(parts):
                chunk = [(t, step.repeat) for t in targets[j * size : (j + 1) * size]]
                self._run_tick(kernel, loops + chunk, client_ip, packets)
                loops = []
            windows.append((first, self.tick - 1))
        if loops:
            self._run_tick(kernel, loops, client_ip, packets)
        self.syns_sent += len(packets)
        obs = deliver(packets, self.cfg, self.rng, self.nat, self.arrivals)
        self.arrivals += len(obs)
        for o in obs:
            session.record_syn(o)
        last = obs[-1].tick if obs else self.tick - 1
        self.tick = max(self.tick, last + 1)
        self._run_tick(kernel, [], client_ip, packets)
        return windows


# -- scenarios ------------------------------------------------------------------


@dataclass
class Scenario:
    """Everything one experiment needs; seeds are mandatory."""

    scenario_id: str
    kernel_seed: int
    net_seed: int
    kernel: KernelConfig = field(default_factory=KernelConfig)
    net: NetConfig = field(default_factory=NetConfig)
    alpha: int = 4
    beta: int = 50
    max_groups: int = 64
    sync: bool = False
    burst_ticks: int = 1
    population: int = 1_000_000
    c_star: float = 1.0
    organic_rate: float = 0.0
    rekey_every_ticks: int | None = None
    reconnect_prob: float = 0.0
    syn_budget: int | None = None
    phase1_cap: int = 100
    repeats: int = 2
    client_ips: list[str] | None = None
    server_ips: list[str] | None = None

    def endpoints(self, run: int) -> tuple[str, str]:
        client = self.client_ips[run % len(self.client_ips)] if self.client_ips else f"198.51.100.{10 + run}"
        server = self.server_ips[run % len(self.server_ips)] if self.server_ips else f"203.0.113.{1 + run}"
        return client, server

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel"] = {
            k: (v.hex() if isinstance(v, bytes) else v.value if isinstance(v, Enum) else v)
            for k, v in d["kernel"].items()
        }
        d["net"] = {k: (v.value if isinstance(v, Enum) else v) for k, v in d["net"].items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        missing = [k for k in ("scenario_id", "kernel_seed", "net_seed") if k not in d]
        if missing:
            raise ValueError(f"scenario lacks mandatory fields: {', '.join(missing)}")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario fields: {', '.join(sorted(unknown))}")
        kern = dict(d.get("kernel") or {})
        for key in ("key_k1", "key_k2"):
            if isinstance(kern.get(key), str):
                kern[key] = bytes.fromhex(kern[key])
        d["kernel"] = KernelConfig(**kern)
        d["net"] = NetConfig(**(d.get("net") or {}))
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))


@dataclass
class RunRecord:
    run_id: int
    client_ip: str
    server_ip: str
    device_id: dict | None
    id_hash: str | None
    failure: str | None
    phase1_iterations: int | None
    groups_sent: int | None
    groups_used: int | None
    reruns: int
    burst_rounds: int | None
    syns_sent: int
    # S' members found sharing a cell via the kernel oracle (harness-side check)
    shared_cell_acceptances: int = 0


@dataclass
class ScenarioReport:
    scenario_id: str
    runs: list[RunRecord]

    @property
    def consistent(self) -> bool:
        hashes = [r.id_hash for r in self.runs]
        return bool(hashes) and None not in hashes and len(set(hashes)) == 1

    def to_json(self) -> str:
        body = {"scenario_id": self.scenario_id, "consistent": self.consistent, "runs": [asdict(r) for r in self.runs]}
        return json.dumps(body, sort_keys=True, indent=2)

    def csv_rows(self) -> list[list]:
        return [
            [self.scenario_id, r.run_id, r.id_hash or "", int(self.consistent),
             "" if r.phase1_iterations is None else r.phase1_iterations,
             "" if r.groups_used is None else r.groups_used, r.failure or ""]
            for r in self.runs
        ]


REPORT_CSV_HEADER = ["scenario_id", "run_id", "id_hash", "consistent", "phase1_iterations", "groups_used", "failure_mode"]


def reports_csv(reports: Sequence[ScenarioReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_CSV_HEADER)
    for rep in reports:
        w.writerows(rep.csv_rows())
    return buf.getvalue()


def run_scenario(s: Scenario, kernel: KernelState | None = None) -> ScenarioReport:
    """Attack the same device ``s.repeats`` times from different networks."""
    from dhpstrack.attacker import GroupPlan, run_attack
    from dhpstrack.server import PortPool, ServerSession

    kernel = kernel or KernelState(s.kernel, seed=s.kernel_seed)
    plan = GroupPlan(alpha=s.alpha, beta=s.beta, max_groups=s.max_groups, sync=s.sync, burst_ticks=s.burst_ticks)
    tables = None
    pools: dict[str, PortPool] = {}
    runs = []
    for run in range(s.repeats):
        client, server = s.endpoints(run)
        net = SimNet(
            s.net,
            seed=s.net_seed * 1009 + run,
            organic_rate=s.organic_rate,
            rekey_every_ticks=s.rekey_every_ticks,
            reconnect_prob=s.reconnect_prob,
        )
        pool = pools.setdefault(server, PortPool())
        if tables is None:
            tables = _LazyTables(lambda: cached_tables(s.kernel.table_size, s.population, s.c_star))
        session = ServerSession(addr(client), pool, s.kernel.table_size, s.kernel.num_ephemeral, tables)
        rec = RunRecord(run, client, server, None, None, None, None, None, None, 0, None, 0)
        try:
            res = run_attack(
                kernel, net, session, plan, client, server,
                syn_budget=s.syn_budget, phase1_cap=s.phase1_cap,
            )
            rec.device_id = res.device_id.to_json()
            rec.id_hash = res.device_id.digest()
            rec.groups_sent, rec.groups_used = res.groups_sent, res.groups_used
            rec.reruns, rec.burst_rounds = res.reruns, res.burst_rounds
            rec.phase1_iterations = res.phase1_iterations
            rec.shared_cell_acceptances = _shared_cells(kernel, res.S_prime)
        except (AttackError, DhpsError) as exc:
            rec.failure = f"{type(exc).__name__}: {exc}"
            rec.phase1_iterations = getattr(exc, "phase1_iterations", None)
        finally:
            session.close()
        rec.syns_sent = net.syns_sent
        runs.append(rec)
    return ScenarioReport(s.scenario_id, runs)


@lru_cache(maxsize=32)
def cached_tables(T: int, N: int, c_star: float = 1.0):
    from dhpstrack.analysis.phase2 import tables_for_population

    return tables_for_population(T, N, c_star)


def _shared_cells(kernel: KernelState, S_prime) -> int:
    cells = [kernel.index_of(t) for t in S_prime]
    return len(cells) - len(set(cells))


class _LazyTables:
    """Defers building the termination table until phase 2 needs it."""

    def __init__(self, build):
        self._build = build
        self._tables = None

    def __getattr__(self, name):
        if self._tables is None:
            self._tables = self._build()
        return getattr(self._tables, name)
