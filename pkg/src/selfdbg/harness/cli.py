"""selfdbg-harness: demo runner, attack scenarios, benchmarks, simulator and scanner."""
from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources

import jsonschema

from .. import sim
from ..scan import UnreadableBinary, static_footprint_report
from . import demo
from .config import ConfigError, load_config

EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_TIMEOUT = 3


def load_schema(kind: str) -> dict:
    return json.loads(resources.files("selfdbg").joinpath(f"schemas/{kind}.schema.json").read_text())


def validate_report(kind: str, report: dict) -> None:
    jsonschema.validate(report, load_schema(kind))


def _emit_json(kind: str, report: dict, path: str | None) -> None:
    validate_report(kind, report)
    if path:
        with open(path, "w") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")


# -- subcommands ---------------------------------------------------------------

def cmd_run_demo(args, cfg) -> int:
    from .. import bootstrap
    bootstrap.default_registry(cfg.codec)  # before the demo registers anything
    args.probe_timeout = cfg.timeouts.probe
    args.handshake_timeout = cfg.timeouts.handshake
    return demo.run(args)


def cmd_attack(args, cfg) -> int:
    from .attacks import SCENARIOS, ScenarioTimeout, run_attack
    names = list(SCENARIOS) if args.scenario == "all" else [args.scenario]
    outcomes, status = [], 0
    for _ in range(args.repeat):
        for name in names:
            try:
                out = run_attack(name, cfg)
            except ScenarioTimeout as e:
                expected = SCENARIOS[name][1].value
                outcomes.append({"scenario": name, "expected": expected, "observed": "ScenarioTimeout",
                                 "pass": False, "elapsed": 0.0, "detail": {}, "orphans": [], "error": str(e)})
                print(f"{name:<18} expected={expected:<16} TIMEOUT  {e}")
                status = max(status, EXIT_TIMEOUT)
                continue
            rec = out.to_json()
            outcomes.append(rec)
            mark = "pass" if out.passed else "FAIL"
            print(f"{name:<18} expected={out.expected.value:<16} observed={out.observed.value:<16} {mark}"
                  f"  ({out.elapsed:.3f}s, orphans={len(out.orphans)})")
            if not out.passed or out.orphans:
                status = max(status, EXIT_FAIL)
    _emit_json("attack", {"outcomes": outcomes}, args.json)
    return status


def cmd_bench(args, cfg) -> int:
    from .bench import InsufficientSamples, WorkerFailed, report_json, report_text, run_bench
    opts = cfg.bench
    if args.samples is not None:
        opts.switch_samples = opts.remote_samples = args.samples
    if args.init_samples is not None:
        opts.init_samples = args.init_samples
    try:
        rows = run_bench(opts, args.method)
    except InsufficientSamples as e:
        print(f"InsufficientSamples: {e}", file=sys.stderr)
        return EXIT_USAGE
    except WorkerFailed as e:
        print(f"bench worker failed: {e}", file=sys.stderr)
        return EXIT_FAIL
    print(report_text(rows))
    report = report_json(rows, args.method)
    _emit_json("bench", report, args.json)
    if args.json is None:
        print(json.dumps(report))
    return 0


def cmd_simulate(args, cfg) -> int:
    catalog = sim.scenario_catalog()
    extra = cfg.scenarios
    if args.scenario:
        pool = {**catalog, **extra}
        if args.scenario not in pool:
            print(f"unknown scenario {args.scenario!r}; known: {', '.join(pool)}", file=sys.stderr)
            return EXIT_USAGE
        chosen = {args.scenario: pool[args.scenario]}
    else:
        chosen = {**catalog, **extra}
    if args.trace_dir:
        os.makedirs(args.trace_dir, exist_ok=True)
    results, status = [], 0
    for name, scenario in chosen.items():
        try:
            verdict = sim.explore(scenario, depth=args.depth, raise_on_depth=args.strict_depth)
        except sim.DepthExceeded as e:
            print(f"{name:<24} DepthExceeded: {e}")
            status = EXIT_FAIL
            continue
        problems = sim.terminal_checks(name, verdict)
        ok = verdict.value == scenario.expected and not problems
        status = status if ok else EXIT_FAIL
        print(f"{name:<24} expected={scenario.expected:<13} verdict={verdict.value:<13} "
              f"states={verdict.states:<6} {'pass' if ok else 'DEVIATION'}")
        for p in problems:
            print(f"    {p}")
        results.append({"scenario": name, "expected": scenario.expected, "verdict": verdict.value,
                        "states": verdict.states, "terminals": len(verdict.terminals),
                        "trace": [e.label for e in verdict.trace], "problems": problems, "pass": ok})
        if args.trace_dir and verdict.trace:
            with open(os.path.join(args.trace_dir, f"{name}.json"), "w") as fh:
                fh.write(verdict.to_json())
    _emit_json("simulate", {"depth": args.depth, "results": results}, args.json)
    return status


def cmd_scan(args, cfg) -> int:
    try:
        report = static_footprint_report(args.binary, args.sites)
    except UnreadableBinary as e:
        print(f"UnreadableBinary: {e}", file=sys.stderr)
        return EXIT_USAGE
    _emit_json("scan", report, args.json)
    print(f"{report['binary']}: {report['site_count']} sites, {report['trap_opcodes']} trap opcodes at sites, "
          f"{report['adjacent_pairs']} sites with an adjacent address setup, {report['instructions']} instructions")
    if args.json is None and args.verbose:
        print(json.dumps(report, indent=2))
    if args.expect_trap:
        return 0 if report["trap_opcodes"] == report["site_count"] else EXIT_FAIL
    return EXIT_FAIL if report["trap_opcodes"] else 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selfdbg-harness", description=__doc__)
    p.add_argument("--config", help="TOML config file (default: the packaged default.toml)")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("run-demo", help="run the demo protectee")
    demo.build_parser(d)
    d.set_defaults(func=cmd_run_demo)

    from .attacks import SCENARIOS
    a = sub.add_parser("attack", help="run an attack scenario against a live pair")
    a.add_argument("scenario", choices=[*SCENARIOS, "all"])
    a.add_argument("--repeat", type=int, default=1)
    a.add_argument("--json", metavar="PATH", help="write the JSON report here")
    a.set_defaults(func=cmd_attack)

    b = sub.add_parser("bench", help="micro-benchmark each self-debugging aspect")
    b.add_argument("--method", choices=("trap", "segv-rw", "segv-x"), default="segv-rw",
                   help="site kind used to enter the remote memory benchmarks")
    b.add_argument("--samples", type=int, help="samples per switch and remote memory aspect")
    b.add_argument("--init-samples", type=int)
    b.add_argument("--json", metavar="PATH")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("simulate", help="exhaustively explore the signal/ptrace model")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--scenario")
    g.add_argument("--all", action="store_true", help="catalog plus config scenarios (the default)")
    s.add_argument("--depth", type=int, default=sim.DEFAULT_DEPTH)
    s.add_argument("--strict-depth", action="store_true", help="fail with DepthExceeded instead of a verdict")
    s.add_argument("--trace-dir", help="write counterexample traces as JSON here")
    s.add_argument("--json", metavar="PATH")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("scan", help="static footprint of an emitted code image")
    c.add_argument("binary")
    c.add_argument("--sites", help="sites sidecar (default: <binary>.sites.json)")
    c.add_argument("--expect-trap", action="store_true", help="the image is a trap build: expect one per site")
    c.add_argument("--json", metavar="PATH")
    c.add_argument("-v", "--verbose", action="store_true")
    c.set_defaults(func=cmd_scan)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as e:
        print(f"config: {e}", file=sys.stderr)
        return EXIT_USAGE
    return args.func(args, cfg)


if __name__ == "__main__":
    sys.exit(main())
