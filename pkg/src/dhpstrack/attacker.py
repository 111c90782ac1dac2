"""Client side of the attack.

The client only schedules connection attempts and reads back what the
server tells it; it never touches kernel internals. Phase 1 collects one
attacker destination per perturbation-table cell, phase 2 fires grouped
loopback connections between bursts to that set and lets the server decode
which cells the loopback tuples landed in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from dhpstrack.errors import DhpsError, IterationLimit, NoConvergence, PoolExhausted
from dhpstrack.kernel import KernelState, ThreeTuple, addr, loopback_tuple
from dhpstrack.server import (
    MAX_RERUNS,
    DeviceId,
    GroupResult,
    Phase2Assembler,
    Phase2Layout,
    ServerSession,
)

LOOPBACK_BASE_PORT = 443
PHASE1_CAP = 100


@dataclass(frozen=True)
class Step:
    """One scripted action: a burst of single attempts or repeated loopback attempts."""

    kind: str  # "burst" | "loopback"
    targets: tuple
    repeat: int = 1
    ticks: int = 1

    def __post_init__(self):
        if self.kind not in ("burst", "loopback"):
            raise ValueError(f"unknown step kind {self.kind!r}")
        object.__setattr__(self, "targets", tuple(self.targets))


def burst(targets: Sequence[ThreeTuple], ticks: int = 1) -> Step:
    return Step("burst", tuple(targets), 1, ticks)


@dataclass(frozen=True)
class GroupPlan:
    alpha: int = 4
    beta: int = 50
    max_groups: int = 64
    loopback_base: int = LOOPBACK_BASE_PORT
    sync: bool = False  # one exchange per group instead of a single script
    burst_ticks: int = 1  # spread each burst over this many ticks

    def __post_init__(self):
        if self.alpha < 1 or self.beta < 1 or self.max_groups < 1:
            raise ValueError("alpha, beta and max_groups must be positive")
        if self.loopback_base + self.alpha * self.max_groups - 1 > 65535:
            raise ValueError("loopback ports run past 65535")

    def loopback_port(self, group: int, i: int) -> int:
        return self.loopback_base + group * self.alpha + i

    def loopback_ports(self) -> list[list[int]]:
        return [[self.loopback_port(g, i) for i in range(self.alpha)] for g in range(self.max_groups)]

    def group_loopbacks(self, group: int) -> list[ThreeTuple]:
        return [loopback_tuple(self.loopback_port(group, i)) for i in range(self.alpha)]

    def connects(self, i: int) -> int:
        return self.beta << i

    @property
    def connects_per_group(self) -> int:
        return self.beta * ((1 << self.alpha) - 1)


def get_new_external_destinations(
    iteration: int,
    T: int,
    base_port: int,
    server_ip: bytes | str,
    client_ip: bytes | str = "198.51.100.10",
) -> list[ThreeTuple]:
    """The ``iteration``-th block of T-1 consecutive server ports (1-based)."""
    if iteration < 1:
        raise ValueError("iterations are numbered from 1")
    first = base_port + (iteration - 1) * (T - 1)
    last = first + T - 2
    if first < 1 or last > 65535:
        raise PoolExhausted(f"ports {first}..{last} leave the port space")
    return [ThreeTuple(client_ip, server_ip, p) for p in range(first, last + 1)]


class SynBudget:
    """Caps the attacker SYNs sent to the server; None means unlimited."""

    def __init__(self, limit: int | None = None):
        self.limit = limit
        self.spent = 0

    def charge(self, n: int) -> None:
        if self.limit is not None and self.spent + n > self.limit:
            raise NoConvergence(f"SYN budget {self.limit} exhausted ({self.spent} spent, {n} more needed)")
        self.spent += n


@dataclass
class Phase1State:
    S_prime: list[ThreeTuple] = field(default_factory=list)
    iteration: int = 0
    candidates: list[ThreeTuple] = field(default_factory=list)
    accepted: list[ThreeTuple] = field(default_factory=list)
    sizes: list[int] = field(default_factory=list)  # |S'| after each iteration
    discarded_multi: int = 0  # candidates seen more than twice (re-connects)


def run_phase1(
    kernel: KernelState,
    net,
    session: ServerSession,
    client_ip: bytes | str,
    server_ip: bytes | str,
    cap: int = PHASE1_CAP,
    budget: SynBudget | None = None,
    state: Phase1State | None = None,
) -> Phase1State:
    """Grow S' until it has one destination in every cell."""
    T, rho = session.T, session.num_ephemeral
    budget = budget or SynBudget()
    st = state if state is not None else Phase1State()
    while len(st.S_prime) < T:
        if st.iteration >= cap:
            raise IterationLimit(f"phase 1 stuck at {len(st.S_prime)}/{T} after {cap} iterations")
        st.iteration += 1
        budget.charge(2 * (T - 1) + len(st.S_prime))
        ports = session.allocate(T - 1)
        st.candidates = [ThreeTuple(client_ip, server_ip, p) for p in ports]
        session.begin_exchange()
        net.execute(kernel, [burst(st.candidates), burst(st.S_prime), burst(st.candidates)], session, client_ip)
        seen = session.source_ports(ports)
        st.accepted, rejected = [], []
        for tup in st.candidates:
            obs = seen[tup.dst_port]
            if len(obs) == 2 and (obs[1] - obs[0]) % rho == 1:
                st.accepted.append(tup)
            else:
                st.discarded_multi += len(obs) > 2
                rejected.append(tup.dst_port)
        session.release(rejected)
        st.S_prime.extend(st.accepted)
        st.sizes.append(len(st.S_prime))
    if len(st.S_prime) > T:
        raise NoConvergence(f"phase 1 accepted {len(st.S_prime)} > T={T} destinations; source ports rewritten?")
    return st


def plan_phase2_bursts(plan: GroupPlan, S_prime: Sequence[ThreeTuple], groups: int | None = None) -> list[Step]:
    """Leading burst, then per group its loopback connections and a burst."""
    groups = plan.max_groups if groups is None else groups
    script = [burst(S_prime, plan.burst_ticks)]
    for g in range(groups):
        script.extend(_group_loopbacks(plan, g))
        script.append(burst(S_prime, plan.burst_ticks))
    return script


def group_script(plan: GroupPlan, S_prime: Sequence[ThreeTuple], group: int) -> list[Step]:
    """Stand-alone measurement of one group: burst, loopbacks, burst."""
    return [burst(S_prime, plan.burst_ticks), *_group_loopbacks(plan, group), burst(S_prime, plan.burst_ticks)]


def _group_loopbacks(plan: GroupPlan, group: int) -> list[Step]:
    return [Step("loopback", (t,), plan.connects(i)) for i, t in enumerate(plan.group_loopbacks(group))]


@dataclass
class Phase2Outcome:
    groups_sent: int
    reruns: int
    burst_rounds: int  # phase-2 bursts, reruns excluded


@dataclass
class AttackResult:
    device_id: DeviceId
    S_prime: list[ThreeTuple]
    phase1_iterations: int
    groups_sent: int
    groups_used: int
    reruns: int
    burst_rounds: int
    syns_charged: int


def run_phase2(
    kernel: KernelState,
    net,
    session: ServerSession,
    plan: GroupPlan,
    S_prime: Sequence[ThreeTuple],
    client_ip: bytes | str,
    budget: SynBudget | None = None,
) -> Phase2Outcome:
    """Loopback mapping; the server's device ID ends up in ``session.device_id``."""
    S = list(S_prime)
    T = session.T
    client_ip = addr(client_ip)
    budget = budget or SynBudget()
    layout = Phase2Layout(
        destinations=[t.dst_port for t in S],
        alpha=plan.alpha,
        beta=plan.beta,
        groups=plan.max_groups,
        loopback_ports=plan.loopback_ports(),
        burst_windows=[],
        max_delay=net.cfg.max_delay,
    )
    asm = Phase2Assembler(session, layout, session.tables)
    reruns = 0

    def rerun(res: GroupResult) -> GroupResult:
        nonlocal reruns
        while res.mapping is None:
            if res.attempts >= MAX_RERUNS:
                raise NoConvergence(f"group {res.index} undecodable after {MAX_RERUNS} reruns ({res.status})")
            budget.charge(2 * T)
            session.begin_exchange()
            net.execute(kernel, group_script(plan, S, res.index), session, client_ip)
            fresh = session.decode_sandwich(layout, res.index)
            fresh.attempts = res.attempts + 1
            res = fresh
            reruns += 1
        return res

    if plan.sync:
        groups_sent = 0
        for g in range(plan.max_groups):
            budget.charge(2 * T)
            session.begin_exchange()
            net.execute(kernel, group_script(plan, S, g), session, client_ip)
            groups_sent += 1
            if asm.feed(rerun(session.decode_sandwich(layout, g))):
                break
        rounds = 2 * groups_sent
    else:
        budget.charge((plan.max_groups + 1) * T)
        session.begin_exchange()
        layout.burst_windows = net.execute(kernel, plan_phase2_bursts(plan, S), session, client_ip)
        results, _ = session.decode_async(layout)
        groups_sent = plan.max_groups
        for res in results:
            if asm.feed(rerun(res)):
                break
        rounds = groups_sent + 1
    if not asm.terminated:
        raise NoConvergence(
            f"termination rule unmet after {groups_sent} groups (n={asm.builder.n}, l={asm.builder.l})"
        )
    return Phase2Outcome(groups_sent, reruns, rounds)


def run_attack(
    kernel: KernelState,
    net,
    session: ServerSession,
    plan: GroupPlan | None = None,
    client_ip: bytes | str = "198.51.100.10",
    server_ip: bytes | str = "203.0.113.1",
    syn_budget: int | None = None,
    phase1_cap: int = PHASE1_CAP,
) -> AttackResult:
    """Both phases against one kernel; the device ID comes from the server.

    Failures carry ``phase1_iterations`` so reports can show how far the
    run got.
    """
    plan = plan or GroupPlan()
    client_ip, server_ip = addr(client_ip), addr(server_ip)
    budget = SynBudget(syn_budget)
    p1 = Phase1State()
    try:
        run_phase1(kernel, net, session, client_ip, server_ip, phase1_cap, budget, p1)
        p2 = run_phase2(kernel, net, session, plan, p1.S_prime, client_ip, budget)
    except DhpsError as exc:
        exc.phase1_iterations = p1.iteration
        raise
    return AttackResult(
        device_id=session.device_id,
        S_prime=list(p1.S_prime),
        phase1_iterations=p1.iteration,
        groups_sent=p2.groups_sent,
        groups_used=len(session.groups),
        reruns=p2.reruns,
        burst_rounds=3 * p1.iteration + p2.burst_rounds,
        syns_charged=budget.spent,
    )


__all__ = [
    "AttackResult",
    "GroupPlan",
    "Phase1State",
    "Step",
    "SynBudget",
    "burst",
    "get_new_external_destinations",
    "group_script",
    "plan_phase2_bursts",
    "Phase2Outcome",
    "run_attack",
    "run_phase1",
    "run_phase2",
]
