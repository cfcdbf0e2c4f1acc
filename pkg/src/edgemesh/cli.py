"""``edgemesh`` command line: run scenarios, compare strategies, inspect expressions."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import traceback
from pathlib import Path

from . import scenario as scenario_mod
from .federation import STRATEGIES
from .grammar import GrammarError, TemporalSpec, describe, parse_subscription, render_subscription
from .simnet import World

EXIT_OK = 0
EXIT_PARSE = 1
EXIT_SCHEMA = 2
EXIT_PANIC = 3

COMPARE_COLUMNS = ["strategy", "inter_broker_msgs", "p50", "p95", "duplicates", "deliveries", "delivery_digest"]


def _load(path: str, seed: int | None, strategy: str | None) -> dict:
    data = scenario_mod.load(path)
    return scenario_mod.with_overrides(data, seed=seed, strategy=strategy)


def _simulate(data: dict, out: Path | None, trace: bool = False):
    world = World(data)
    try:
        report = world.run()
    except Exception:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "trace.txt").write_text("\n".join(world.sim.trace) + "\n", encoding="utf-8")
        raise
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
        (out / "links.csv").write_text(report.links_csv(), encoding="utf-8")
        if trace:
            (out / "trace.txt").write_text("\n".join(world.sim.trace) + "\n", encoding="utf-8")
    return report


def cmd_run(args: argparse.Namespace) -> int:
    try:
        data = _load(args.scenario, args.seed, args.strategy)
    except (OSError, scenario_mod.ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    out = Path(args.out)
    try:
        report = _simulate(data, out, args.trace)
    except Exception:
        traceback.print_exc()
        print(f"simulation failed; trace written to {out / 'trace.txt'}", file=sys.stderr)
        return EXIT_PANIC
    print(f"{report.strategy}: {report.deliveries} deliveries, {report.inter_broker_msgs} inter-broker msgs "
          f"-> {out / 'metrics.json'}")
    return EXIT_OK


def compare_rows(data: dict, strategies: list[str]) -> list[dict]:
    rows = []
    for name in strategies:
        report = World(scenario_mod.with_overrides(data, strategy=name)).run()
        rows.append({
            "strategy": name,
            "inter_broker_msgs": report.inter_broker_msgs,
            "p50": report.latency_p50,
            "p95": report.latency_p95,
            "duplicates": report.duplicate_deliveries,
            "deliveries": report.deliveries,
            "delivery_digest": report.delivery_digest,
        })
    return rows


def cmd_compare(args: argparse.Namespace) -> int:
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    unknown = [s for s in strategies if s not in STRATEGIES]
    if unknown:
        print(f"error: unknown strategy {unknown[0]!r}", file=sys.stderr)
        return EXIT_SCHEMA
    try:
        data = _load(args.scenario, args.seed, None)
    except (OSError, scenario_mod.ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    try:
        rows = compare_rows(data, strategies)
    except Exception:
        traceback.print_exc()
        return EXIT_PANIC
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COMPARE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    sys.stdout.write(buf.getvalue())
    if args.out:
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    return EXIT_OK


def parse_report(text: str) -> dict:
    expr = parse_subscription(text)
    stages = []
    for stage in expr.evaluation_order():
        kind = type(stage).__name__
        item = {"kind": kind, "token": "$" + stage.token()}
        if isinstance(stage, TemporalSpec):
            item.update(window=stage.window, agg=stage.agg)
        stages.append(item)
    return {
        "input": text,
        "canonical": render_subscription(expr),
        "filter": str(expr.filter),
        "evaluation_order": stages,
        "summary": describe(expr),
    }


def cmd_parse(args: argparse.Namespace) -> int:
    try:
        report = parse_report(args.expr)
    except GrammarError as exc:
        print(f"error: {exc.message}", file=sys.stderr)
        print(exc.caret(), file=sys.stderr)
        return EXIT_PARSE
    if args.json:
        print(json.dumps(report, sort_keys=True))
        return EXIT_OK
    print(report["summary"])
    print(f"canonical: {report['canonical']}")
    for i, stage in enumerate(report["evaluation_order"], 1):
        print(f"  {i}. {stage['token']} ({stage['kind']})")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    from .service import serve_forever

    serve_forever(args.host, args.port, args.broker_id, budget=args.budget)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgemesh", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one scenario and write metrics")
    run.add_argument("scenario")
    run.add_argument("--seed", type=int)
    run.add_argument("--strategy", choices=STRATEGIES)
    run.add_argument("--out", default="out")
    run.add_argument("--trace", action="store_true", help="also write the event trace")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="run a scenario under several strategies")
    cmp_.add_argument("scenario")
    cmp_.add_argument("--strategies", default=",".join(STRATEGIES))
    cmp_.add_argument("--seed", type=int)
    cmp_.add_argument("--out", help="also write the CSV table here")
    cmp_.set_defaults(func=cmd_compare)

    prs = sub.add_parser("parse", help="explain a subscription expression")
    prs.add_argument("expr")
    prs.add_argument("--json", action="store_true")
    prs.set_defaults(func=cmd_parse)

    srv = sub.add_parser("serve", help="run a single broker over TCP (JSON lines)")
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--port", type=int, default=1884)
    srv.add_argument("--broker-id", default="B1")
    srv.add_argument("--budget", type=int, default=100)
    srv.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
