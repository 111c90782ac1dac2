"""Experiment drivers shared by the command line and the test-suite.

Functions named ``oracle_*`` read kernel internals. Only evaluation code
uses them, to score the attack against ground truth; the attack itself
never does.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dhpstrack.analysis.phase1 import simulate_phase1_iterations
from dhpstrack.attacker import GroupPlan, burst, run_phase2
from dhpstrack.errors import DhpsError
from dhpstrack.kernel import KernelConfig, KernelState, NoiseMode, ThreeTuple, addr, loopback_tuple
from dhpstrack.server import (
    DeviceId,
    IdBuilder,
    PortPool,
    ServerSession,
    should_terminate,
    traffic_count,
    update_device_id,
)
from dhpstrack.simnet import Scenario, SimNet, cached_tables, organic_connections, run_scenario


def oracle_unique_set(kernel: KernelState, session: ServerSession, client_ip, server_ip) -> list[ThreeTuple]:
    """One attacker destination per cell, chosen with the kernel's hash."""
    T = kernel.config.table_size
    chosen: dict[int, ThreeTuple] = {}
    while len(chosen) < T:
        spare = []
        for port in session.allocate(T - 1):
            tup = ThreeTuple(client_ip, server_ip, port)
            cell = kernel.index_of(tup)
            if cell in chosen:
                spare.append(port)
            else:
                chosen[cell] = tup
        session.release(spare)
    return [chosen[c] for c in range(T)]


def oracle_device_id(kernel: KernelState, plan: GroupPlan, tables) -> DeviceId:
    """The ID a perfect measurement would produce for the kernel's current key."""
    b = IdBuilder()
    for g in range(plan.max_groups):
        for i in range(plan.alpha):
            port = plan.loopback_port(g, i)
            update_device_id(b, port, kernel.index_of(loopback_tuple(port)))
            if should_terminate(b.n, b.l, tables):
                return b.freeze()
    raise DhpsError("loopback budget too small for the termination rule")


# -- countermeasures ----------------------------------------------------------------

COUNTERMEASURES = ("baseline", "large_table", "rekey", "patched_noise")


@dataclass
class CountermeasureRow:
    mode: str
    T: int
    runs: int
    consistent_fraction: float
    success_fraction: float
    mean_phase1_iterations: float | None
    mean_burst_rounds: float | None
    mean_syns: float | None
    syn_budget: int | None
    failure_modes: dict
    note: str = ""


def _summarise(mode: str, T: int, reports, budget=None, note="") -> CountermeasureRow:
    runs = [r for rep in reports for r in rep.runs]
    it = [r.phase1_iterations for r in runs if r.phase1_iterations is not None and r.failure is None]
    rounds = [r.burst_rounds for r in runs if r.burst_rounds is not None]
    fails: dict[str, int] = {}
    for r in runs:
        if r.failure:
            key = r.failure.split(":")[0]
            fails[key] = fails.get(key, 0) + 1
    return CountermeasureRow(
        mode=mode,
        T=T,
        runs=len(runs),
        consistent_fraction=sum(rep.consistent for rep in reports) / max(1, len(reports)),
        success_fraction=sum(r.failure is None for r in runs) / max(1, len(runs)),
        mean_phase1_iterations=float(np.mean(it)) if it else None,
        mean_burst_rounds=float(np.mean(rounds)) if rounds else None,
        mean_syns=float(np.mean([r.syns_sent for r in runs])) if runs else None,
        syn_budget=budget,
        failure_modes=dict(sorted(fails.items())),
        note=note,
    )


def base_scenario(seed: int, **overrides) -> Scenario:
    return Scenario(scenario_id=f"cm-{seed}", kernel_seed=seed, net_seed=seed, **overrides)


def evaluate_countermeasures(
    modes=COUNTERMEASURES,
    seeds: int = 20,
    base_seed: int = 0,
    rekey_every_ticks: int = 10,
    large_T: int = 65536,
) -> list[CountermeasureRow]:
    """Run the attack against each countermeasure and the unprotected baseline.

    The large-table run gets a SYN budget equal to the most any baseline run
    needed, i.e. the same attack effort that suffices at T=256.
    """
    out = []
    baseline = [run_scenario(base_scenario(base_seed + i)) for i in range(seeds)]
    budget = max(r.syns_sent for rep in baseline for r in rep.runs)
    for mode in modes:
        if mode == "baseline":
            out.append(_summarise(mode, 256, baseline))
        elif mode == "large_table":
            reps = [
                run_scenario(
                    base_scenario(base_seed + i, kernel=KernelConfig(table_size=large_T), syn_budget=budget, repeats=1)
                )
                for i in range(min(seeds, 5))
            ]
            iters = simulate_phase1_iterations(large_T, 4, np.random.default_rng(base_seed))
            per_iter = 2 * (large_T - 1)
            note = (
                f"phase 1 needs about {iters.mean():.1f} iterations of at least {per_iter} SYNs each "
                f"(vs budget {budget})"
            )
            out.append(_summarise(mode, large_T, reps, budget, note))
        elif mode == "rekey":
            reps = [run_scenario(base_scenario(base_seed + i, rekey_every_ticks=rekey_every_ticks)) for i in range(seeds)]
            out.append(_summarise(mode, 256, reps, note=f"re-key every {rekey_every_ticks} ticks"))
        elif mode == "patched_noise":
            cfg = KernelConfig(noise_mode=NoiseMode.PATCHED)
            reps = [run_scenario(base_scenario(base_seed + i, kernel=cfg)) for i in range(seeds)]
            rate = patched_decode_failure_rate(seeds, base_seed)
            note = f"phase-2 decode failure rate with a correct S': {rate:.3f}"
            out.append(_summarise(mode, 256, reps, note=note))
        else:
            raise ValueError(f"unknown countermeasure {mode!r}")
    return out


def patched_decode_failure_rate(seeds: int, base_seed: int = 0, alpha: int = 4, beta: int = 50) -> float:
    """Fraction of phase-2 runs that fail or mis-decode under 1..8 increments.

    Phase 1 is skipped (S' comes from the oracle) so that the number
    isolates the effect of the noise on group decoding.
    """
    plan = GroupPlan(alpha=alpha, beta=beta)
    tables = cached_tables(256, 1_000_000, 1.0)
    bad = 0
    for i in range(seeds):
        kernel = KernelState(KernelConfig(noise_mode=NoiseMode.PATCHED), seed=base_seed + i)
        session = ServerSession(addr("198.51.100.10"), PortPool(), 256, kernel.config.num_ephemeral, tables)
        S = oracle_unique_set(kernel, session, session.client_ip, addr("203.0.113.1"))
        try:
            run_phase2(kernel, SimNet(seed=i), session, plan, S, session.client_ip)
            bad += session.device_id != oracle_device_id(kernel, plan, tables)
        except DhpsError:
            bad += 1
    return bad / seeds


# -- traffic metering --------------------------------------------------------------


@dataclass
class TrafficRow:
    interval: int
    ground_truth: int
    counted: int
    saturated: bool

    @property
    def exact(self) -> bool:
        return self.counted == self.ground_truth


def traffic_experiment(
    counts,
    seed: int = 0,
    kernel_config: KernelConfig | None = None,
    client_ip: str = "198.51.100.10",
    server_ip: str = "203.0.113.1",
) -> list[TrafficRow]:
    """Poll the T unique destinations around known amounts of victim traffic.

    ``counts`` lists how many organic connections happen in each interval;
    an entry ``(k, "single")`` sends all ``k`` to one external destination.
    Ground truth comes from the kernel's connect counter; an interval is
    flagged saturated when some cell advanced by num_ephemeral - 1 or more,
    where the meter's modular arithmetic can no longer be trusted.
    """
    kernel = KernelState(kernel_config or KernelConfig(), seed=seed)
    cfg = kernel.config
    tables = cached_tables(cfg.table_size, 1_000_000, 1.0)
    session = ServerSession(addr(client_ip), PortPool(), cfg.table_size, cfg.num_ephemeral, tables)
    net = SimNet(seed=seed)
    S = oracle_unique_set(kernel, session, addr(client_ip), addr(server_ip))
    rng = np.random.default_rng(seed)

    def poll():
        # separate measurements: a port seen in an earlier poll may recur
        session.begin_exchange(reset_dedup=True)
        net.execute(kernel, [burst(S)], session, client_ip)
        return {w: ports[-1] for w, ports in session.source_ports([t.dst_port for t in S]).items()}

    rows = []
    before = poll()
    for i, count in enumerate(counts):
        table0 = list(kernel.table)
        start = kernel.connect_count
        if isinstance(count, (tuple, list)):
            count, how = count
            if how != "single":
                raise ValueError(f"unknown traffic shape {how!r}")
            kernel.attempt_many(ThreeTuple(addr("192.168.1.10"), addr("192.0.2.99"), 443), int(count))
        else:
            organic_connections(kernel, int(count), rng)
        truth = kernel.connect_count - start
        # the next poll advances each cell once more
        saturated = any(b - a + 1 >= cfg.num_ephemeral - 1 for a, b in zip(table0, kernel.table))
        after = poll()
        rows.append(TrafficRow(i, truth, traffic_count(before, after, cfg.num_ephemeral), saturated))
        before = after
    return rows


__all__ = [
    "COUNTERMEASURES",
    "CountermeasureRow",
    "TrafficRow",
    "evaluate_countermeasures",
    "oracle_device_id",
    "oracle_unique_set",
    "patched_decode_failure_rate",
    "traffic_experiment",
]
