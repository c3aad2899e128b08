"""Command-line entry point: ``xchange run | verify | sweep | replay``.

Exit codes: 0 success, 1 invariant violation, 2 configuration or input error.
Log verbosity comes from the ``XCHANGE_LOG`` environment variable
(DEBUG, INFO, WARNING, ERROR; default WARNING).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

from . import __version__
from .ledger import LedgerError, load_partitions, verify_partitions
from .orderbook import ConfigError
from .simnet import runner
from .simnet.replay import TraceError, load_trace, compute_metrics
from .simnet.scenario import Scenario, ScenarioError, load_scenario, parse_policy_override, scenario_from_dict

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_CONFIG = 2

logger = logging.getLogger("xchange.cli")


class CliError(Exception):
    """Bad arguments or unreadable input; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _configure_logging() -> None:
    level = os.environ.get("XCHANGE_LOG", "WARNING").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _read_input(path: str) -> tuple[Scenario, dict | None]:
    """Load a scenario file, or the scenario recorded in a manifest.json."""
    if path.endswith(".json"):
        try:
            with open(path, encoding="utf-8") as fh:
                manifest = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"{path}: cannot read manifest: {exc}") from None
        if not isinstance(manifest, dict) or not isinstance(manifest.get("scenario"), dict):
            raise CliError(f"{path}: not a manifest (no 'scenario' object)")
        return scenario_from_dict(manifest["scenario"]), manifest
    return load_scenario(path), None


def _policy_overrides(items) -> dict:
    merged = {}
    for item in items or ():
        merged.update(parse_policy_override(item))
    return merged


def _publish(tmp: Path, out: Path) -> None:
    """Move finished outputs into ``out`` so a failed command never leaves partial files."""
    out.mkdir(parents=True, exist_ok=True)
    for item in sorted(tmp.iterdir()):
        os.replace(item, out / item.name)


def _staging(out: Path) -> Path:
    parent = out.resolve().parent
    parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=".xchange-", dir=parent))


# --- run -------------------------------------------------------------------------------------

def cmd_run(args) -> int:
    scenario, manifest = _read_input(args.scenario)
    reps = args.reps if args.reps is not None else (manifest or {}).get("reps", 1)
    seed = args.seed if args.seed is not None else (manifest or {}).get("seed")
    if reps < 1:
        raise CliError("--reps must be at least 1")
    scenario = scenario.with_overrides(seed=seed, load=args.load, policy=_policy_overrides(args.policy))
    results = runner.run_reps(scenario, reps)
    failed = [(rep, c) for rep, r in enumerate(results, 1) for c in r.failed()]
    rows = [runner.summary_row(r, rep) for rep, r in enumerate(results, 1)]
    if args.out:
        out = Path(args.out)
        tmp = _staging(out)
        try:
            runner.write_outputs(results, tmp, scenario, reps)
            _publish(tmp, out)
        finally:
            shutil.rmtree(tmp, ignore_errors=True)
    for row in rows + (runner.aggregate_rows(rows) if reps > 1 else []):
        print(" ".join(f"{k}={row[k]}" for k in ("rep", "seed", "trades_completed", "orders_fulfilled",
                                                 "throughput", "mean_latency", "theft_trades", "checks_ok")))
    for rep, check in failed:
        print(f"rep {rep}: invariant violated: {check.name}: {check.detail}", file=sys.stderr)
    return EXIT_VIOLATION if failed else EXIT_OK


# --- verify ----------------------------------------------------------------------------------

def cmd_verify(args) -> int:
    try:
        with open(args.dump, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise CliError(f"cannot read ledger dump: {exc}") from None
    try:
        partitions = load_partitions(text)
    except LedgerError as exc:
        # an unparseable line is itself evidence of tampering
        print(f"malformed partition: {exc}")
        return EXIT_VIOLATION
    report = verify_partitions(partitions)
    for v in report.violations:
        print(v)
    if args.verbose:
        for note in report.notes:
            print(f"note: {note}")
    peers = len({p.creator for p in partitions})
    print(f"{len(partitions)} partitions from {peers} chains: "
          f"{'ok' if report.ok else f'{len(report.violations)} violation(s)'}")
    return EXIT_OK if report.ok else EXIT_VIOLATION


# --- sweep -----------------------------------------------------------------------------------

def _parse_loads(values) -> list[float]:
    loads = []
    for value in values or ():
        for part in str(value).split(","):
            if part.strip():
                try:
                    load = float(part)
                except ValueError:
                    raise CliError(f"--load expects numbers, got {part!r}") from None
                if load <= 0:
                    raise CliError("--load values must be positive")
                loads.append(load)
    return loads


def cmd_sweep(args) -> int:
    scenario, manifest = _read_input(args.scenario)
    recorded = (manifest or {}).get("sweep", {})
    loads = _parse_loads(args.load) or list(recorded.get("loads", []))
    policies = args.policy_grid.split(",") if args.policy_grid else list(recorded.get("policies", ["none"]))
    reps = args.reps if args.reps is not None else (manifest or {}).get("reps", 1)
    seed = args.seed if args.seed is not None else (manifest or {}).get("seed")
    if reps < 1:
        raise CliError("--reps must be at least 1")
    unknown = [p for p in policies if p not in runner.POLICY_GRID]
    if unknown:
        raise CliError(f"unknown policy setting(s) {', '.join(unknown)}; choose from {', '.join(runner.POLICY_GRID)}")
    base = scenario.with_overrides(seed=seed, policy=_policy_overrides(args.policy))
    for load in loads:
        base.with_overrides(load=load)  # reject impossible points before any simulation
    rows = []
    for point in runner.sweep_points(loads, policies):
        row, _ = runner.run_point(base, point, reps)
        rows.append(row)
        print(" ".join(f"{k}={row.get(k, '')}" for k in ("load", "policy", "peers", "status", "throughput",
                                                       "mean_latency")), flush=True)
    if args.out:
        out = Path(args.out)
        tmp = _staging(out)
        try:
            runner.write_sweep(rows, tmp / "sweep.csv")
            manifest = runner.manifest_for(base, reps, command="sweep",
                                           extra={"sweep": {"loads": loads, "policies": policies}})
            (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                               encoding="utf-8")
            _publish(tmp, out)
        finally:
            shutil.rmtree(tmp, ignore_errors=True)
    bad = [r for r in rows if r.get("status") != "ok"]
    return EXIT_VIOLATION if bad else EXIT_OK


# --- replay ----------------------------------------------------------------------------------

def cmd_replay(args) -> int:
    try:
        records = load_trace(args.trace)
    except OSError as exc:
        raise CliError(f"cannot read trace: {exc}") from None
    log = compute_metrics(records)
    summary = log.summary()
    if args.json:
        print(json.dumps(log.fingerprint(), indent=2, sort_keys=True))
    else:
        for key, value in summary.items():
            print(f"{key}={value}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xchange", description="Simulate and audit XChange cross-chain trading.")
    parser.add_argument("--version", action="version", version=f"xchange {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def scenario_flags(p):
        p.add_argument("--scenario", required=True, help="scenario YAML file or a manifest.json from an earlier run")
        p.add_argument("--seed", type=int, help="override the scenario seed")
        p.add_argument("--reps", type=int, help="repetitions; rep r uses seed+r-1 (default 1)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--policy", action="append", metavar="KEY=VALUE",
                       help="restrict=<t|none> or incset=<n>; repeatable")

    p = sub.add_parser("run", help="run a scenario and write metric tables")
    scenario_flags(p)
    p.add_argument("--load", type=float, help="orders per second; sets peers = load / workload rate")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="verify a ledger dump")
    p.add_argument("dump", help="ledger dump (one hex partition per line)")
    p.add_argument("-v", "--verbose", action="store_true", help="also print informational notes")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="run a scenario over a load and policy grid")
    scenario_flags(p)
    p.add_argument("--load", action="append", metavar="L[,L...]", help="orders per second; repeatable or comma list")
    p.add_argument("--policy-grid", help=f"comma list from {', '.join(runner.POLICY_GRID)} (default none)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("replay", help="recompute metrics from a trace")
    p.add_argument("trace", help="trace-N.jsonl written by run")
    p.add_argument("--json", action="store_true", help="print the full metric fingerprint as JSON")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, ScenarioError) as exc:
        print(f"xchange {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TraceError as exc:
        print(f"xchange {args.command}: malformed trace: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
