"""Command line entry point: ``python -m blockaudit <command>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .features import FeatureSetKind
from .harness import (
    PRESETS,
    PlanValidationError,
    RunManifest,
    analyze,
    render_manifest,
    run_experiment,
    settings_diff,
    summarize_family,
)
from .model import PlanError, load_logs, load_plan, validate_plan
from .simulator import SimulatorServer, Simulator, SutProtocolError, TcpSut, load_config

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_PROTOCOL = 3


def _load_valid_plan(path):
    plan = load_plan(path)
    diags = validate_plan(plan)
    if diags:
        raise PlanValidationError(diags)
    return plan


def cmd_validate(args) -> int:
    plan = load_plan(args.plan)
    diags = validate_plan(plan)
    for d in diags:
        print(d)
    if diags:
        return EXIT_VALIDATION
    print(f"{args.plan}: ok")
    return EXIT_OK


def cmd_run(args) -> int:
    plan = _load_valid_plan(args.plan)
    if args.sut == "sim":
        sut = Simulator(load_config(plan.sim, plan.seed, plan.base_dir))
    elif args.sut.startswith("tcp:"):
        sut = TcpSut.from_spec(args.sut)
    else:
        print(f"unknown --sut {args.sut!r}; use sim or tcp:HOST:PORT", file=sys.stderr)
        return EXIT_VALIDATION
    out = run_experiment(plan, sut, args.out)
    print(f"wrote {plan.block_count * plan.block_size} agent logs to {out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    keywords = tuple(k.strip().lower() for k in args.keywords.split(",") if k.strip()) if args.keywords else ()
    manifest = analyze(
        args.logs, args.preset, FeatureSetKind(args.features), samples=args.samples, seed=args.seed,
        keywords=keywords, workers=args.workers,
    )
    if args.out:
        Path(args.out).write_text(manifest.dumps())
        sys.stdout.write(render_manifest(manifest))
    else:
        sys.stdout.write(manifest.dumps())
    return EXIT_OK


def cmd_report(args) -> int:
    sys.stdout.write(render_manifest(RunManifest.load(args.manifest)))
    return EXIT_OK


def cmd_family(args) -> int:
    report = summarize_family([RunManifest.load(p) for p in args.manifests], alpha=args.alpha)
    sys.stdout.write(report.render())
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_settings_diff(args) -> int:
    sys.stdout.write(settings_diff(load_logs(args.logs)).render())
    return EXIT_OK


def cmd_sim_server(args) -> int:
    sut = Simulator(load_config(args.scenario, args.seed))
    with SimulatorServer((args.host, args.port), sut) as server:
        host, port = server.server_address[:2]
        print(f"serving {args.scenario} on {host}:{port}", flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockaudit", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a plan file")
    p.add_argument("--plan", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="run a plan against a SUT and write logs")
    p.add_argument("--plan", required=True)
    p.add_argument("--sut", default="sim", help="sim or tcp:HOST:PORT")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("analyze", help="test a log directory and write a manifest")
    p.add_argument("--logs", required=True)
    p.add_argument("--preset", required=True, choices=[k.value for k in PRESETS])
    p.add_argument("--features", default="urltitle", choices=[k.value for k in FeatureSetKind])
    p.add_argument("--samples", type=int, default=10**6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--keywords", help="comma-separated; overrides the plan's keywords")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="render a manifest as text")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("family", help="Holm-Bonferroni across manifests")
    p.add_argument("--manifests", nargs="+", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", help="write the JSON twin of the report here")
    p.set_defaults(func=cmd_family)

    p = sub.add_parser("settings-diff", help="compare settings across groups")
    p.add_argument("--logs", required=True)
    p.set_defaults(func=cmd_settings_diff)

    p = sub.add_parser("sim-server", help="serve a simulator over TCP")
    p.add_argument("--scenario", default="null")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.set_defaults(func=cmd_sim_server)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except PlanValidationError as exc:
        for d in exc.diagnostics:
            print(d, file=sys.stderr)
        return EXIT_VALIDATION
    except (PlanError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SutProtocolError as exc:
        print(f"SUT protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
