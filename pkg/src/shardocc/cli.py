"""Command line: run the server, the experiments, the enumerator and small utilities.

Experiment subcommands print a table and exit 0 only if every invariant
check of the run held. ``--jsonl PATH`` also writes one JSON report per line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .acp import replay_wal, required_retry_budget
from .client import HttpClient
from .errors import CorruptWal, ShardOccError
from .explore import ORI_OFF, ORI_ON, enumerate_schedules
from .http_service import ServiceConfig, serve
from .stats import rule_of_three, wilson_ci
from .wal import read_wal


def _add_common(p, *, mode=True, paired=False):
    p.add_argument("--n-agents", type=int, default=4)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--retry-budget", type=int, default=0, help="0 retries until success")
    if mode:
        p.add_argument("--mode", choices=[ORI_ON, ORI_OFF], default=ORI_ON)
    p.add_argument("--server", help="base URL of a live server; default runs in-process")
    if paired:
        p.add_argument("--server-off", help="live server running with validation disabled")
    p.add_argument("--scheduler", choices=["seeded", "threads"], default="seeded")
    p.add_argument("--jsonl", help="append JSON reports to this file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shardocc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the HTTP server")
    defaults = ServiceConfig.from_env()
    p.add_argument("--host", default=defaults.host)
    p.add_argument("--port", type=int, default=defaults.port)
    p.add_argument("--ori-enabled", action=argparse.BooleanOptionalAction, default=defaults.ori_enabled)
    p.add_argument("--ownership-enforced", action=argparse.BooleanOptionalAction,
                   default=defaults.ownership_enforced)
    p.add_argument("--session-ttl-ms", type=int, default=defaults.session_ttl_ms, help="0 = never expire")
    p.add_argument("--wal-path", default=defaults.wal_path)
    p.add_argument("--wal-fsync", action=argparse.BooleanOptionalAction, default=defaults.wal_fsync)
    p.add_argument("--wal-store-content", action="store_true")
    p.add_argument("--record-history", action=argparse.BooleanOptionalAction, default=defaults.record_history)

    p = sub.add_parser("stale-injection", help="engineered-stale vs fresh commits")
    _add_common(p)
    p.add_argument("--stale", type=int, default=200)
    p.add_argument("--fresh", type=int, default=200)

    p = sub.add_parser("contention-sweep", help="N agents contending on shared shards")
    _add_common(p)
    p.add_argument("--ns", type=int, nargs="+", default=[4, 8, 16])
    p.add_argument("--topology", choices=["shared", "dedicated"], default="shared")

    p = sub.add_parser("ori-isolation", help="marker preservation with and without validation")
    _add_common(p, mode=False, paired=True)

    p = sub.add_parser("dose-response", help="commit rate vs number of stale agents")
    _add_common(p)
    p.add_argument("--stale-agents-k", type=int, nargs="+", default=[0, 1, 2, 3])
    p.add_argument("--stale-after-step", type=int, default=5)

    p = sub.add_parser("divergence-counters", help="server-side view-divergence counters")
    _add_common(p, mode=False, paired=True)

    p = sub.add_parser("enumerate", help="exhaustive interleaving check on a small instance")
    p.add_argument("--agents", type=int, default=2)
    p.add_argument("--shards", type=int, default=2)
    p.add_argument("--steps", type=int, default=2)
    p.add_argument("--mode", choices=[ORI_ON, ORI_OFF], default=ORI_ON)
    p.add_argument("--topology", choices=["shared", "dedicated"], default="dedicated")
    p.add_argument("--max-schedules", type=int, default=250_000)

    p = sub.add_parser("retry-budget", help="attempts needed to reach a success probability")
    p.add_argument("scr", type=float)
    p.add_argument("--target", type=float, default=0.95)

    p = sub.add_parser("wilson", help="Wilson 95%% interval and rule-of-three bound")
    p.add_argument("successes", type=int)
    p.add_argument("n", type=int)

    p = sub.add_parser("replay-wal", help="rebuild per-key versions from a WAL file")
    p.add_argument("path")
    p.add_argument("--allow-torn-tail", action="store_true")
    return parser


def _client(url):
    return HttpClient(url) if url else None


def _config(args, experiment, **extra):
    fields = dict(
        experiment=experiment,
        n_agents=args.n_agents,
        steps=args.steps,
        seed=args.seed,
        trials=args.trials,
        retry_budget=args.retry_budget,
        scheduler=args.scheduler,
    )
    if getattr(args, "mode", None):
        fields["mode"] = args.mode
    fields.update(extra)
    return harness.ExperimentConfig(**fields)


def _emit(args, reports, extra_lines=()):
    print(harness.format_table(reports))
    for line in extra_lines:
        print(line)
    if args.jsonl:
        with open(args.jsonl, "a", encoding="utf-8") as fh:
            for r in reports:
                fh.write(r.to_json() + "\n")
    return 0 if all(r.passed for r in reports) else 1


def run_experiment(args) -> int:
    client = _client(args.server)
    cmd = args.command
    if cmd == "stale-injection":
        cfg = _config(args, "StaleInjection", stale_injections=args.stale, fresh_commits=args.fresh)
        report = harness.run_stale_injection(cfg, client)
        lines = []
        if report.rule_of_three_ub is not None:
            lines.append(f"rule of three over {args.stale} injections: {100 * report.rule_of_three_ub:.3f}%")
        return _emit(args, [report], lines)
    if cmd == "contention-sweep":
        cfg = _config(args, "ContentionSweep", topology=args.topology)
        reports = harness.run_contention_sweeps(cfg, args.ns, client)
        ok_trend = harness.scr_monotone(reports)
        lines = [f"SCR non-decreasing in N: {ok_trend}"]
        for r in reports:
            if 0 < r.scr < 1:
                lines.append(f"N={r.n_agents}: analytic K for 95% = {required_retry_budget(r.scr)}")
        code = _emit(args, reports, lines)
        return code or (0 if ok_trend or args.topology == "dedicated" else 1)
    if cmd == "ori-isolation":
        cfg = _config(args, "OriIsolation")
        return _emit(args, list(harness.run_ori_isolation(cfg, client, _client(args.server_off))))
    if cmd == "dose-response":
        reports = []
        for k in args.stale_agents_k:
            cfg = _config(args, "DoseResponse", stale_agents_k=k, stale_after_step=args.stale_after_step)
            reports.append(harness.run_dose_response(cfg, client))
        lines = [
            f"k={k}: measured {100 * r.commit_rate:.1f}%  predicted {100 * r.predicted_rate:.1f}%"
            for k, r in zip(args.stale_agents_k, reports)
        ]
        return _emit(args, reports, lines)
    if cmd == "divergence-counters":
        cfg = _config(args, "DivergenceCounters")
        reports = list(harness.run_divergence_counters(cfg, client, _client(args.server_off)))
        lines = [f"{r.mode}: divergent {r.view_divergent}/{r.view_checked} checked, "
                 f"{r.divergent_accepted} accepted" for r in reports]
        return _emit(args, reports, lines)
    raise AssertionError(cmd)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "serve":
            serve(ServiceConfig(
                host=args.host, port=args.port, ori_enabled=args.ori_enabled,
                ownership_enforced=args.ownership_enforced, session_ttl_ms=args.session_ttl_ms,
                wal_path=args.wal_path, wal_fsync=args.wal_fsync,
                wal_store_content=args.wal_store_content, record_history=args.record_history,
            ))
            return 0
        if args.command == "enumerate":
            report = enumerate_schedules(args.agents, args.shards, args.steps, args.mode, args.topology,
                                         max_schedules=args.max_schedules)
            print(json.dumps(report.to_dict(), default=str))
            expect_clean = args.mode == ORI_ON
            return 0 if (report.violation_total == 0) == expect_clean and not report.invariant_failures else 1
        if args.command == "retry-budget":
            print(required_retry_budget(args.scr, args.target))
            return 0
        if args.command == "wilson":
            lo, hi = wilson_ci(args.successes, args.n)
            print(f"wilson95=[{lo:.3f}, {hi:.3f}] rule_of_three={rule_of_three(args.n):.3g}")
            return 0
        if args.command == "replay-wal":
            try:
                records = read_wal(args.path, allow_torn_tail=args.allow_torn_tail)
                snap = replay_wal(records)
            except CorruptWal as exc:
                print(f"corrupt WAL: {exc} ({len(exc.records)} clean records)", file=sys.stderr)
                return 1
            print(json.dumps({"records": len(records), "versions": dict(sorted(snap.versions().items()))}))
            return 0
        return run_experiment(args)
    except ShardOccError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
