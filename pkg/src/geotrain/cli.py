"""Command-line entry point: ``geotrain {plan,simulate,compare,sweep}``.

Every flag can also come from an environment variable named ``GEOTRAIN_<FLAG>``
(``--power-column`` -> ``GEOTRAIN_POWER_COLUMN``); flags win over the
environment. Exit codes: 0 success, 1 input error, 2 unschedulable,
3 simulation error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from pathlib import Path

from .control import launch
from .domain import Jitter, Scenario, SyncStrategyConfig, load_scenario, scenario_to_dict, validate_scenario
from .errors import ScenarioError, SimulationError, UnschedulableError
from .scheduler import greedy_plan, plan_resources
from .sim import comparison_summary, run_baseline_comparison, run_simulation

ENV_PREFIX = "GEOTRAIN_"
EXIT_OK, EXIT_INPUT, EXIT_UNSCHEDULABLE, EXIT_SIMULATION = 0, 1, 2, 3


def _env(name: str, default=None):
    return os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"), default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geotrain", description="Plan and simulate geo-distributed parameter-server training.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("plan", "print the optimal-matching resourcing plan"),
        ("simulate", "run one simulated training workflow"),
        ("compare", "greedy plan vs optimal-matching plan"),
        ("sweep", "synchronization-frequency sweep against the baseline"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--scenario", default=_env("scenario"), help="scenario YAML file")
        p.add_argument("--strategy", default=_env("strategy"), help="strategy kind (comma list for sweep)")
        p.add_argument("--freq", default=_env("freq"), help="sync frequency K[,K...]")
        p.add_argument("--seed", type=int, default=_env("seed"))
        p.add_argument("--power-column", choices=("in", "tn"), default=_env("power_column"))
        p.add_argument("--jitter", choices=("on", "off"), default=_env("jitter"))
        p.add_argument("--out", default=_env("out", "runs"), help="output directory")
    return parser


def _freqs(text: str | None) -> list[int]:
    if not text:
        return []
    out = [int(x) for x in str(text).split(",") if x.strip()]
    if any(k < 1 for k in out):
        raise ScenarioError(["--freq values must be >= 1"])
    return out


def effective_scenario(args) -> Scenario:
    if not args.scenario:
        raise ScenarioError(["--scenario is required"])
    sc = load_scenario(args.scenario)
    raw = scenario_to_dict(sc)
    if args.seed is not None:
        raw["seed"] = int(args.seed)
        raw["trainer"]["seed"] = int(args.seed)
    if args.power_column:
        raw["power_column"] = args.power_column
    if args.jitter == "off":
        raw["wan"].pop("jitter", None)
    elif args.jitter == "on" and "jitter" not in raw["wan"]:
        raw["wan"]["jitter"] = {"dist": "lognormal", "sigma": Jitter().sigma}
    if args.command in ("simulate", "compare") and (args.strategy or args.freq):
        kind = args.strategy or raw["strategy"]["kind"]
        freqs = _freqs(args.freq)
        raw["strategy"]["kind"] = kind
        raw["strategy"]["sync_frequency"] = 1 if kind == "baseline_asgd" else (freqs[0] if freqs else raw["strategy"]["sync_frequency"])
    return validate_scenario(raw)


def scenario_hash(sc: Scenario) -> str:
    canon = json.dumps(scenario_to_dict(sc), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _csv(rows: list[dict]) -> str:
    fields: list[str] = []
    for r in rows:
        fields.extend(k for k in r if k not in fields)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _emit(args, sc: Scenario, payload: dict, rows: list[dict] | None = None) -> Path:
    stem = f"{args.command}-{scenario_hash(sc)}-s{sc.seed}"
    out = Path(args.out)
    path = out / f"{stem}.json"
    _write_atomic(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")
    if rows is not None:
        _write_atomic(out / f"{stem}.csv", _csv(rows))
    return path


def _fmt(alloc) -> str:
    return " + ".join(f"{d}×{n}" for d, n in alloc if n) or "-"


def cmd_plan(args) -> int:
    sc = effective_scenario(args)
    plan = plan_resources(sc.clouds, sc.power_column)
    greedy = greedy_plan(sc.clouds, sc.power_column)
    print(f"power column: {sc.power_column}")
    print(f"{'cloud':<8} {'data':>7} {'greedy':<16} {'planned':<16} {'LP':>10}")
    for c in sc.clouds:
        print(
            f"{c.cloud_id:<8} {c.dataset_size:>7} {_fmt(greedy.allocations[c.cloud_id]):<16} "
            f"{_fmt(plan.allocations[c.cloud_id]):<16} {plan.per_cloud_lp[c.cloud_id]:>10.6g}"
        )
    print(plan.describe())
    path = _emit(args, sc, {"scenario_hash": scenario_hash(sc), "seed": sc.seed, "plan": plan.to_dict(), "greedy": greedy.to_dict()})
    print(f"wrote {path}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    sc = effective_scenario(args)
    wf, report = launch(sc)
    print(f"plan: {wf.plan.describe()}  strategy: {wf.strategy.kind} k={wf.strategy.sync_frequency}")
    for cid, ct in report.per_cloud.items():
        print(f"{cid:<8} load={ct.t_load:.3f}s train={ct.t_train:.3f}s wait={ct.t_wait:.3f}s total={ct.t_total:.3f}s")
    print(f"wan_bytes={report.wan_bytes} wan_time={report.wan_time_s:.6f}s cost={report.cost:.6f} accuracy={report.final_accuracy:.4f}")
    path = _emit(args, sc, {"workflow": wf.to_dict(), "report": report.to_dict()}, report.flat_rows())
    print(f"wrote {path}")
    return EXIT_OK


def cmd_compare(args) -> int:
    sc = effective_scenario(args)
    greedy, planned = run_baseline_comparison(sc)
    summary = comparison_summary(greedy, planned)
    rows = []
    print(f"{'leg':<8} {'cloud':<8} {'units':>5} {'train':>10} {'wait':>10} {'total':>10} {'cost':>10}")
    for leg, rep in (("greedy", greedy), ("planned", planned)):
        for cid, ct in rep.per_cloud.items():
            print(f"{leg:<8} {cid:<8} {ct.units:>5} {ct.t_train:>10.3f} {ct.t_wait:>10.3f} {ct.t_total:>10.3f} {ct.cost:>10.6f}")
        rows.extend({"leg": leg, **r} for r in rep.flat_rows())
    print(f"waiting reduction: {summary['waiting_reduction_pct']:.2f}%  cost reduction: {summary['cost_reduction_pct']:.2f}%")
    path = _emit(args, sc, {"greedy": greedy.to_dict(), "planned": planned.to_dict(), "summary": summary}, rows)
    print(f"wrote {path}")
    return EXIT_OK


def sweep_legs(sc: Scenario, freqs: list[int], strategies: list[str]) -> list[tuple[str, int, SyncStrategyConfig]]:
    legs = [("baseline_asgd", 1, SyncStrategyConfig.baseline())]
    for k in freqs:
        if k == 1:
            continue
        for kind in strategies:
            if kind == "baseline_asgd":
                continue
            base = sc.strategy
            legs.append((kind, k, SyncStrategyConfig(kind, k, base.accumulation_mode, {}, base.lr_sync, base.scale_by_window)))
    return legs


def run_sweep(sc: Scenario, freqs: list[int], strategies: list[str]) -> tuple[list[dict], dict]:
    plan = plan_resources(sc.clouds, sc.power_column)
    rows, reports = [], {}
    base = None
    for kind, k, strategy in sweep_legs(sc, freqs, strategies):
        rep = run_simulation(sc, plan, strategy)
        if base is None:
            base = rep
        reports[f"{kind}@{k}"] = rep.to_dict()
        rows.append(
            {
                "strategy": kind,
                "freq": k,
                "makespan_s": rep.makespan,
                "speedup": base.makespan / rep.makespan,
                "wan_bytes": rep.wan_bytes,
                "wan_time_s": rep.wan_time_s,
                "wan_size_time_s": rep.wan_size_time_s,
                "wan_size_time_ratio": rep.wan_size_time_s / base.wan_size_time_s if base.wan_size_time_s else 0.0,
                "payloads_per_partition": min(c.payloads_sent for c in rep.per_cloud.values()),
                "final_accuracy": rep.final_accuracy,
            }
        )
    return rows, reports


def cmd_sweep(args) -> int:
    sc = effective_scenario(args)
    freqs = _freqs(args.freq) or [1, 4, 8]
    strategies = [s.strip() for s in (args.strategy or "asgd_ga,ama").split(",") if s.strip()]
    for s in strategies:
        SyncStrategyConfig(kind=s, sync_frequency=1 if s == "baseline_asgd" else 2)
    rows, reports = run_sweep(sc, freqs, strategies)
    print(f"{'strategy':<14} {'k':>3} {'makespan':>10} {'speedup':>8} {'wan MB':>9} {'size-time ratio':>16} {'accuracy':>9}")
    for r in rows:
        print(
            f"{r['strategy']:<14} {r['freq']:>3} {r['makespan_s']:>10.3f} {r['speedup']:>8.3f} "
            f"{r['wan_bytes'] / 1e6:>9.4f} {r['wan_size_time_ratio']:>16.6f} {r['final_accuracy']:>9.4f}"
        )
    path = _emit(args, sc, {"rows": rows, "reports": reports}, rows)
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {"plan": cmd_plan, "simulate": cmd_simulate, "compare": cmd_compare, "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ScenarioError as exc:
        for err in exc.errors:
            print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except UnschedulableError as exc:
        print(f"unschedulable: {exc}", file=sys.stderr)
        return EXIT_UNSCHEDULABLE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SimulationError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION


if __name__ == "__main__":
    sys.exit(main())
