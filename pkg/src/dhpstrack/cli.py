"""Command-line front end.

Exit codes: 0 success, 2 attack failure, 3 bad configuration, 4 analysis
infeasible (no termination table for the requested T and p*).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dhpstrack import analysis
from dhpstrack.errors import NoSolution
from dhpstrack.simnet import Scenario, reports_csv, run_scenario

EXIT_OK, EXIT_ATTACK, EXIT_CONFIG, EXIT_INFEASIBLE = 0, 2, 3, 4


class ConfigError(Exception):
    pass


def fmt(x) -> str:
    """CSV cell with full float precision."""
    if isinstance(x, float):
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return format(x, ".17g")
    if x is None:
        return ""
    return str(x)


def to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    seed: int | None
    out_dir: str
    args: dict
    files: list[dict] = field(default_factory=list)


class Output:
    """Atomic writer that records every file it emits for the manifest."""

    def __init__(self, out_dir: str, manifest: RunManifest):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest = manifest

    def write(self, name: str, text: str) -> Path:
        data = text.encode()
        path = self.dir / name
        fd, tmp = tempfile.mkstemp(dir=self.dir, prefix=f".{name}.")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
        self.manifest.files.append({"name": name, "sha256": hashlib.sha256(data).hexdigest()})
        return path

    def close(self) -> None:
        body = json.dumps(asdict(self.manifest), sort_keys=True, indent=2) + "\n"
        self.write("manifest.json", body)


def parse_counts(text: str) -> list[int]:
    """'1e2,1e3' or '1e2..1e12' (decades) into integers."""
    if ".." in text:
        lo, hi = (round(math.log10(float(v))) for v in text.split(".."))
        return [10**e for e in range(lo, hi + 1)]
    out = []
    for part in text.split(","):
        value = float(part)
        if value != int(value):
            raise ConfigError(f"not an integer: {part}")
        out.append(int(value))
    return out


def load_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return data


# -- commands -----------------------------------------------------------------------


def cmd_attack(args, out: Output) -> int:
    data = load_json(args.config)
    if args.seed is not None:
        data["kernel_seed"] = data["net_seed"] = args.seed
    data.setdefault("scenario_id", "attack")
    if args.config is None:
        data.setdefault("kernel_seed", 0)
        data.setdefault("net_seed", 0)
    try:
        scenario = Scenario.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scenario: {exc}") from exc
    report = run_scenario(scenario)
    out.write("scenario.json", scenario.to_json() + "\n")
    out.write("report.json", report.to_json() + "\n")
    out.write("report.csv", reports_csv([report]))
    ids = {r.run_id: r.device_id for r in report.runs}
    out.write("device_ids.json", json.dumps(ids, sort_keys=True, indent=2) + "\n")
    for r in report.runs:
        status = r.id_hash if r.failure is None else r.failure
        print(f"run {r.run_id} ({r.client_ip} -> {r.server_ip}): {status}")
    print(f"consistent: {report.consistent}")
    return EXIT_OK if report.consistent else EXIT_ATTACK


def cmd_tables(args, out: Output) -> int:
    Ns = parse_counts(args.N)
    rows = []
    for N in Ns:
        try:
            t = analysis.analyse_population(N, args.T, args.c_star)
        except NoSolution as exc:
            p = analysis.pstar_for_population(N, args.c_star)
            msg = f"error: {exc}"
            if args.T == 2:
                msg += f"; for T=2 use the special case: L = {analysis.low_T_special_case(p)} loopbacks"
            else:
                ok, minimal = analysis.low_T_check(args.T, p)
                msg += f"; the low-T condition needs T >= {minimal}"
            print(msg, file=sys.stderr)
            return EXIT_INFEASIBLE
        name = "nstar.csv" if len(Ns) == 1 else f"nstar_N{N}.csv"
        out.write(name, to_csv(["l", "nstar"], t.rows()))
        rows.append([N, t.p_star, t.l_min, t.l_max, t.expected_l, t.c_over_cstar])
    out.write("summary.csv", to_csv(["N", "p_star", "l_min", "l_max", "E_l", "c_over_cstar"], rows))
    for r in rows:
        print(f"N={r[0]:.0e} p*={r[1]:.3e} l_min={r[2]} l_max={r[3]} E(l)={r[4]:.3f} c/c*={r[5]:.5f}")
    return EXIT_OK


def cmd_montecarlo(args, out: Output) -> int:
    rng = np.random.default_rng(args.seed or 0)
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    if args.phase == "phase1":
        sample = analysis.simulate_phase1_iterations(args.T, args.trials, rng)
        exact = analysis.phase1_stop_distribution(args.T).expected
        values = sample
        extra = {}
    else:
        tables = analysis.analyse_population(args.N, args.T)
        stops, pair_hits = [], []
        for _ in range(args.trials):
            s, c = analysis.simulate_population_ids(tables, args.N, rng)
            stops.append(s.mean())
            pair_hits.append(c)
        values = np.array(stops)
        exact = tables.expected_l
        c_mean = float(np.mean(pair_hits))
        extra = {
            "c_mean": c_mean,
            "c_stderr": float(np.std(pair_hits, ddof=1) / math.sqrt(len(pair_hits))) if len(pair_hits) > 1 else None,
            "c_exact": tables.c,
            "c_over_cstar": c_mean / tables.c_star,
        }
    mean = float(np.mean(values))
    stderr = float(np.std(values, ddof=1) / math.sqrt(len(values))) if len(values) > 1 else None
    z = (mean - exact) / stderr if stderr else None
    stats = {"phase": args.phase, "T": args.T, "trials": args.trials, "mean": mean, "stderr": stderr,
             "exact": exact, "z": z, **extra}
    if args.phase == "phase1":
        vals, counts = np.unique(values, return_counts=True)
        out.write("distribution.csv", to_csv(["iterations", "count", "freq"],
                                             [[int(v), int(c), c / len(values)] for v, c in zip(vals, counts)]))
    else:
        out.write("distribution.csv", to_csv(["population", "mean_l"], [[i, float(v)] for i, v in enumerate(values)]))
    _write_report(out, args.format, "stats", [stats])
    print(f"mean={mean:.6f} exact={exact:.6f} z={z if z is None else round(z, 3)}")
    return EXIT_OK


def cmd_countermeasures(args, out: Output) -> int:
    from dhpstrack.experiments import COUNTERMEASURES, evaluate_countermeasures

    modes = tuple(args.modes.split(",")) if args.modes else COUNTERMEASURES
    bad = set(modes) - set(COUNTERMEASURES)
    if bad:
        raise ConfigError(f"unknown countermeasures: {', '.join(sorted(bad))}")
    rows = evaluate_countermeasures(modes, seeds=args.trials or 20, base_seed=args.seed or 0,
                                    rekey_every_ticks=args.rekey_ticks)
    dicts = [asdict(r) for r in rows]
    for d in dicts:
        d["failure_modes"] = json.dumps(d["failure_modes"], sort_keys=True)
    _write_report(out, args.format, "countermeasures", dicts)
    for r in rows:
        print(f"{r.mode:>14}: consistent {r.consistent_fraction:.2f}, success {r.success_fraction:.2f}, "
              f"failures {r.failure_modes} {r.note}")
    return EXIT_OK


def cmd_traffic(args, out: Output) -> int:
    from dhpstrack.experiments import traffic_experiment

    data = load_json(args.config)
    counts = data.get("counts") or ([int(c) for c in args.counts.split(",")] if args.counts else [737])
    seed = data.get("seed", args.seed or 0)
    rows = traffic_experiment(counts, seed=seed)
    _write_report(out, args.format, "traffic",
                  [{"interval": r.interval, "ground_truth": r.ground_truth, "counted": r.counted,
                    "exact": r.exact, "saturated": r.saturated} for r in rows])
    for r in rows:
        flag = " SATURATED" if r.saturated else ""
        print(f"interval {r.interval}: truth {r.ground_truth} counted {r.counted}{flag}")
    return EXIT_OK


def cmd_alg5(args, out: Output) -> int:
    b = analysis.alg5_bound(args.msl, args.rate, args.range)
    row = {"msl": b.msl, "rate": b.rate, "port_range": b.port_range, "max_n": b.max_n,
           "range_bits": b.range_bits, "bits": b.bits, "bits_lost": b.bits_lost}
    _write_report(out, args.format, "alg5", [row])
    print(f"N <= {b.max_n}; entropy {b.range_bits:.1f} -> {b.bits:.1f} bits")
    return EXIT_OK


def _write_report(out: Output, form: str, stem: str, rows: list[dict]) -> None:
    if form == "json":
        out.write(f"{stem}.json", json.dumps(rows, sort_keys=True, indent=2, default=str) + "\n")
    else:
        header = list(rows[0]) if rows else []
        out.write(f"{stem}.csv", to_csv(header, [[r[h] for h in header] for r in rows]))


COMMANDS = {
    "attack": cmd_attack,
    "tables": cmd_tables,
    "montecarlo": cmd_montecarlo,
    "countermeasures": cmd_countermeasures,
    "traffic": cmd_traffic,
    "alg5": cmd_alg5,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--trials", type=int, help="number of trials / seeds")
    common.add_argument("--format", choices=("csv", "json"), default="csv")

    p = argparse.ArgumentParser(prog="dhpstrack", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("attack", parents=[common], help="run the attack scenario from --config")
    t = sub.add_parser("tables", parents=[common], help="termination tables and stop-time summary")
    t.add_argument("--N", default="1e6", help="population sizes, e.g. 1e6 or 1e2..1e12")
    t.add_argument("--c-star", type=float, default=1.0)
    t.add_argument("--T", type=int, default=256)
    m = sub.add_parser("montecarlo", parents=[common], help="Monte Carlo checks of the analysis")
    m.add_argument("--phase", choices=("phase1", "phase2"), default="phase1")
    m.add_argument("--T", type=int, default=256)
    m.add_argument("--N", type=int, default=100, help="population size (phase2)")
    c = sub.add_parser("countermeasures", parents=[common], help="attack outcome per countermeasure")
    c.add_argument("--modes", help="comma-separated subset of baseline,large_table,rekey,patched_noise")
    c.add_argument("--rekey-ticks", type=int, default=10)
    tr = sub.add_parser("traffic", parents=[common], help="connection metering between polls")
    tr.add_argument("--counts", help="comma-separated connections per interval")
    a = sub.add_parser("alg5", parents=[common], help="wraparound bound of Algorithm 5")
    a.add_argument("--msl", type=float, default=30.0)
    a.add_argument("--rate", type=float, default=11.4)
    a.add_argument("--range", type=int, default=28232)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "montecarlo" and args.trials is None:
        args.trials = 1000 if args.phase == "phase1" else 500
    manifest = RunManifest(
        command=args.command,
        config_path=args.config,
        seed=args.seed,
        out_dir=str(args.out),
        args={k: v for k, v in sorted(vars(args).items()) if k not in ("command", "out")},
    )
    try:
        out = Output(args.out, manifest)
        code = COMMANDS[args.command](args, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out.close()
    return code


if __name__ == "__main__":
    sys.exit(main())
