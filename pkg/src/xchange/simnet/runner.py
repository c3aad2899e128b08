"""Build a simulated XChange network from a scenario, run it, check it, write outputs."""
from __future__ import annotations

import csv
import json
import logging
import math
import random
import statistics
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .. import __version__
from ..assets import ChainRegistry, MockChain, Wallet, WalletAddress
from ..clock import SECOND, seconds
from ..crypto import Identity
from ..ledger import LedgerStore, dump_partitions, increment_amount, verify_partitions
from ..orderbook import AssetPair
from ..protocol.peer import Peer
from .adversaries import adversary_class
from .engine import LatencyModel, Simulator, Trace
from .metrics import MetricsCollector, MetricsLog
from .scenario import Scenario

logger = logging.getLogger(__name__)


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


@dataclass
class World:
    scenario: Scenario
    sim: Simulator
    chains: ChainRegistry
    peers: list[Peer]
    labels: dict[str, int]
    union: LedgerStore

    def peer(self, index: int) -> Peer:
        return self.peers[index - 1]

    def label(self, index: int) -> str:
        return self.peers[index - 1].id.hex()[:16]


@dataclass
class RunResult:
    scenario: Scenario
    world: World
    metrics: MetricsLog
    trace: Trace
    checks: list[Check] = field(default_factory=list)
    cpu_seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    @property
    def trace_hash(self) -> str:
        return self.trace.hexdigest()

    def failed(self) -> list[Check]:
        return [c for c in self.checks if not c.ok]


def peer_identity(seed: int, index: int) -> Identity:
    return Identity.from_seed(f"xchange-peer-{seed}-{index}")


def choose_matchmakers(scenario: Scenario, rng: random.Random) -> dict[int, list[int]]:
    """Per peer, a seeded sample of ``fanout`` matchmakers other than itself.

    A peer that is itself a matchmaker also lists its own orders in its own book.
    """
    ids = scenario.matchmaker_ids
    chosen = {}
    for i in range(1, scenario.peers + 1):
        others = [m for m in ids if m != i]
        picked = rng.sample(others, min(scenario.fanout, len(others))) if others else []
        chosen[i] = sorted(picked + ([i] if i in ids else []))
    return chosen


def build_world(scenario: Scenario, trace: Trace) -> World:
    sc = scenario
    setup_rng = random.Random(sc.seed)
    latency = LatencyModel(seconds(sc.network.latency_min), seconds(sc.network.latency_max), sc.network.loss)
    sim = Simulator(latency, random.Random(f"network-{sc.seed}"), trace)
    config = sc.protocol_config()
    config.validate()

    chains = ChainRegistry(MockChain(asset, sim.now, seconds(sc.chain_spec(asset).confirmation_delay))
                           for asset in sc.assets)
    identities = [peer_identity(sc.seed, i) for i in range(1, sc.peers + 1)]
    mm_ids = set(sc.matchmaker_ids)
    selection = choose_matchmakers(sc, setup_rng)
    union = LedgerStore()
    fallback = [identities[m - 1].peer_id for m in sorted(mm_ids)]
    peers = []
    for i, ident in enumerate(identities, 1):
        wallets = {}
        for asset in sc.assets:
            wallet = Wallet(chains[asset], WalletAddress.derive(asset, ident.peer_id.key))
            if sc.funding:
                chains[asset].faucet(wallet.address, sc.funding)
            wallets[asset] = wallet
        matchmakers = [identities[m - 1].peer_id for m in selection[i]]
        adv = sc.adversary_of(i)
        cls, params = Peer, {}
        if adv is not None:
            cls = adversary_class(adv.profile)
            params = dict(adv.params)
            if "favoured" in params:
                params["favoured"] = [identities[f - 1].peer_id for f in params["favoured"]]
        peer = cls(ident, sim, sc.protocol_config(), chains, wallets, matchmakers, is_matchmaker=i in mm_ids,
                   mirror=union, audit_store=union if sc.audit_view == "oracle" else None,
                   fallback_matchmakers=fallback, **params)
        sim.add_peer(peer)
        peers.append(peer)
    chains.close_setup()
    labels = {p.id.hex()[:16]: i for i, p in enumerate(peers, 1)}
    world = World(sc, sim, chains, peers, labels, union)
    _schedule_workload(world)
    return world


def _create(peer: Peer, pair: AssetPair, is_offer: bool, timeout) -> None:
    peer.create_order(pair, is_offer, timeout)


def _cancel(peer: Peer, order_seq: int) -> None:
    peer.cancel_order(order_seq)


def _schedule_workload(world: World) -> None:
    sc, sim = world.scenario, world.sim
    w = sc.workload
    if w.kind == "synthetic":
        pair = AssetPair(w.base, w.quote, w.base_qty * w.unit, w.quote_qty * w.unit)
        if not pair.is_normalized:
            pair = pair.flipped()
            flipped = True
        else:
            flipped = False
        timeout = None if w.timeout is None else seconds(w.timeout)
        interval = seconds(1 / w.rate)
        end = seconds(w.duration)
        for i, peer in enumerate(world.peers, 1):
            t = (i - 1) * interval // sc.peers
            is_offer = i % 2 == 1
            while t < end:
                sim.schedule_at(None, t, _create, peer, pair, is_offer != flipped, timeout)
                is_offer = not is_offer
                t += interval
    for action in sc.actions:
        peer = world.peer(action.peer)
        at = seconds(action.at)
        if action.action == "create_order":
            p = action.params
            pair = AssetPair(p.get("base", w.base), p.get("quote", w.quote), p.get("base_qty", w.base_qty) * w.unit,
                             p.get("quote_qty", w.quote_qty) * w.unit)
            is_offer = p["side"] == "offer"
            if not pair.is_normalized:
                pair, is_offer = pair.flipped(), not is_offer
            timeout = seconds(p["timeout"]) if "timeout" in p else None
            sim.schedule_at(None, at, _create, peer, pair, is_offer, timeout)
        else:
            sim.schedule_at(None, at, _cancel, peer, action.params["order"])


# --- invariant checks -----------------------------------------------------------------

def _fraud_bound_applies(sc: Scenario) -> bool:
    config = sc.protocol_config()
    return (config.restrict == 1 and not config.at_own_risk and sc.audit_view == "oracle"
            and all(sc.chain_spec(a).confirmation_delay == 0 for a in sc.assets))


def run_checks(world: World, metrics: MetricsLog) -> list[Check]:
    sc = world.scenario
    checks = []
    report = verify_partitions(list(world.union))
    checks.append(Check("ledger", report.ok, "; ".join(str(v) for v in report.violations[:5])))

    bad = []
    for asset, chain in sorted(world.chains.chains.items()):
        total = sum(chain.balances.values()) + chain.pending_total()
        if total != chain.minted:
            bad.append(f"{asset}: {total} != minted {chain.minted}")
    checks.append(Check("conservation", not bad, "; ".join(bad)))

    bad = []
    for i, peer in enumerate(world.peers, 1):
        for own in peer.orders.values():
            spec = own.spec
            if spec.reserved_qty < 0 or spec.traded_qty + spec.reserved_qty > spec.pair.base_qty:
                bad.append(f"peer {i} order {spec.order_seq}: traded {spec.traded_qty} reserved {spec.reserved_qty}")
    checks.append(Check("order-quantities", not bad, "; ".join(bad[:5])))

    if _fraud_bound_applies(sc) and sc.adversaries:
        thefts = metrics.theft_counts()
        worst = max(thefts.values(), default=0)
        checks.append(Check("fraud-bound", worst <= 1, f"theft trades per adversary: {thefts}"))
        if sc.protocol_config().incset >= 2:
            over = []
            for adv, per_trade in metrics.stolen().items():
                for tid, value in per_trade.items():
                    row = metrics.trades[tid]
                    honest = row.counterparty if adv == row.initiator else row.initiator
                    total = row.total_of(honest)
                    if value > max_increment(total, row.n):
                        over.append(f"{tid[:8]}: {value} > increment of {total}")
            checks.append(Check("increment-bound", not over, "; ".join(over[:5])))

    if not sc.adversaries and sc.network.loss == 0:
        sim = world.sim
        open_trades = sum(len(p.open_trades()) for p in world.peers)
        problems = []
        if sim.in_flight:
            problems.append(f"{sim.in_flight} messages in flight")
        if sim.live_timers:
            problems.append(f"{sim.live_timers} live timers")
        if open_trades:
            problems.append(f"{open_trades} open trades")
        checks.append(Check("drain", not problems, "; ".join(problems)))
    return checks


def max_increment(total: int, n: int) -> int:
    return max(increment_amount(total, n, i) for i in range(1, n + 1))


# --- running ------------------------------------------------------------------------------

def run(scenario: Scenario, keep_trace: bool = True, full_trace: bool = True) -> RunResult:
    """Run one scenario to workload end plus drain and check its invariants.

    ``full_trace=False`` skips trace hashing and message digests; metrics are unaffected.
    """
    collector = MetricsCollector()
    trace = Trace(keep=keep_trace, listeners=[collector], full=full_trace)
    started = time.process_time()
    world = build_world(scenario, trace)
    sim = world.sim
    adversaries = {world.label(a.peer): a.profile for a in scenario.adversaries}
    horizon = seconds(scenario.horizon)
    sim.record("run_start", scenario=scenario.name, seed=scenario.seed, peers=scenario.peers,
               duration=max(SECOND, seconds(scenario.end_of_activity)), horizon=horizon, adversaries=adversaries)
    sim.run(until=horizon)
    sim.record("run_end", events=sim.processed, pending=sim.pending(), records=trace.count + 1)
    metrics = collector.result()
    result = RunResult(scenario, world, metrics, trace)
    result.checks = run_checks(world, metrics)
    result.cpu_seconds = time.process_time() - started
    for check in result.failed():
        logger.warning("check %s failed: %s", check.name, check.detail)
    return result


def run_reps(scenario: Scenario, reps: int = 1, keep_trace: bool = True, full_trace: bool = True) -> list[RunResult]:
    """Run ``reps`` repetitions with seeds ``seed, seed+1, ...``."""
    return [run(scenario.with_overrides(seed=scenario.seed + r), keep_trace, full_trace) for r in range(reps)]


# --- outputs ----------------------------------------------------------------------------------

def _secs(t: int | None) -> str:
    return "" if t is None else f"{t / SECOND:.6f}"


ORDER_COLUMNS = ["rep", "seed", "order", "peer", "side", "qty", "created", "fulfilled", "latency", "cancelled"]
TRADE_COLUMNS = ["rep", "seed", "trade", "initiator", "counterparty", "qty", "n", "proposed", "agreed", "completed",
                 "outcome", "payments"]
SUMMARY_KEYS = ["orders_created", "orders_fulfilled", "trades_completed", "trades_aborted", "throughput",
                "peak_throughput", "mean_latency", "p50_latency", "p95_latency", "blocks", "block_rate", "messages",
                "dropped", "request_timeouts", "theft_trades", "stolen"]
SUMMARY_COLUMNS = ["rep", "seed"] + SUMMARY_KEYS + ["checks_ok", "trace_hash"]


def order_rows(result: RunResult, rep: int) -> list[dict]:
    labels = result.world.labels
    rows = []
    for key, r in sorted(result.metrics.orders.items(), key=lambda kv: (kv[1].created, kv[0])):
        rows.append({"rep": rep, "seed": result.scenario.seed, "order": key, "peer": labels.get(r.peer, r.peer),
                     "side": "offer" if r.offer else "request", "qty": r.qty, "created": _secs(r.created),
                     "fulfilled": _secs(r.fulfilled), "latency": _secs(r.latency), "cancelled": int(r.cancelled)})
    return rows


def trade_rows(result: RunResult, rep: int) -> list[dict]:
    labels = result.world.labels
    rows = []
    for key, r in sorted(result.metrics.trades.items(), key=lambda kv: (kv[1].proposed, kv[0])):
        rows.append({"rep": rep, "seed": result.scenario.seed, "trade": key,
                     "initiator": labels.get(r.initiator, r.initiator),
                     "counterparty": labels.get(r.counterparty, r.counterparty), "qty": r.qty,
                     "n": "" if r.n is None else r.n, "proposed": _secs(r.proposed), "agreed": _secs(r.agreed),
                     "completed": _secs(r.completed), "outcome": r.outcome, "payments": r.payments})
    return rows


def summary_row(result: RunResult, rep) -> dict:
    row = {"rep": rep, "seed": result.scenario.seed}
    row.update(result.metrics.summary())
    row["checks_ok"] = int(result.ok)
    row["trace_hash"] = result.trace_hash
    return row


def aggregate_rows(rows: list[dict]) -> list[dict]:
    """Mean and sample standard deviation of every numeric summary column."""
    mean = {"rep": "mean", "seed": ""}
    std = {"rep": "stddev", "seed": ""}
    for key in SUMMARY_KEYS + ["checks_ok"]:
        values = [float(Fraction(r[key])) for r in rows]
        mean[key] = f"{statistics.fmean(values):.6f}"
        std[key] = f"{statistics.stdev(values):.6f}" if len(values) > 1 else "0.000000"
    mean["trace_hash"] = std["trace_hash"] = ""
    return [mean, std]


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def manifest_for(scenario: Scenario, reps: int, command: str = "run", extra: dict | None = None) -> dict:
    data = {"tool": "xchange", "version": __version__, "command": command, "seed": scenario.seed, "reps": reps,
            "scenario": scenario.to_dict()}
    if extra:
        data.update(extra)
    return data


def write_outputs(results: list[RunResult], out_dir, scenario: Scenario, reps: int) -> dict:
    """Write CSV tables, traces, ledger dumps, chain logs and the manifest into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    orders, trades, summary = [], [], []
    for rep, result in enumerate(results, 1):
        orders += order_rows(result, rep)
        trades += trade_rows(result, rep)
        summary.append(summary_row(result, rep))
        (out / f"trace-{rep}.jsonl").write_text(result.trace.dumps(), encoding="utf-8")
        (out / f"ledger-{rep}.dump").write_text(dump_partitions(list(result.world.union)), encoding="utf-8")
        (out / f"chains-{rep}.jsonl").write_text(
            "".join(c.export_log() for _, c in sorted(result.world.chains.chains.items())), encoding="utf-8")
    _write_csv(out / "orders.csv", ORDER_COLUMNS, orders)
    _write_csv(out / "trades.csv", TRADE_COLUMNS, trades)
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary + aggregate_rows(summary))
    checks = {str(rep): [{"name": c.name, "ok": c.ok, "detail": c.detail} for c in r.checks]
              for rep, r in enumerate(results, 1)}
    (out / "checks.json").write_text(json.dumps(checks, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    manifest = manifest_for(scenario, reps, extra={"trace_hashes": [r.trace_hash for r in results]})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    timing = {"cpu_seconds": [round(r.cpu_seconds, 3) for r in results]}
    (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n", encoding="utf-8")
    return manifest


# --- sweeps --------------------------------------------------------------------------------------

POLICY_GRID = {
    "none": {"restrict": None, "incset": 1},
    "restrict1": {"restrict": 1, "incset": 1},
    "incset2": {"restrict": None, "incset": 2},
    "both": {"restrict": 1, "incset": 2},
}

SWEEP_COLUMNS = ["load", "policy", "peers", "reps", "status", "trades_completed", "throughput", "peak_throughput",
                 "mean_latency", "p95_latency", "blocks", "block_rate", "messages", "orders_created",
                 "orders_fulfilled", "checks_ok", "error"]


@dataclass
class SweepPoint:
    load: float | None
    policy: str
    overrides: dict


def sweep_points(loads, policies) -> list[SweepPoint]:
    loads = list(loads) or [None]
    points = []
    for load in loads:
        for name in policies:
            if name not in POLICY_GRID:
                raise KeyError(name)
            points.append(SweepPoint(load, name, POLICY_GRID[name]))
    return points


def run_point(scenario: Scenario, point: SweepPoint, reps: int) -> tuple[dict, list[RunResult]]:
    row = {"load": "" if point.load is None else point.load, "policy": point.policy, "reps": reps}
    try:
        sc = scenario.with_overrides(load=point.load, policy=point.overrides)
        row["peers"] = sc.peers
        results = run_reps(sc, reps, keep_trace=False, full_trace=False)
    except Exception as exc:  # a failed point is recorded and the sweep continues
        logger.error("sweep point %s/%s failed: %s", point.load, point.policy, exc)
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
        return row, []
    summaries = [r.metrics.summary() for r in results]
    for key in ("trades_completed", "throughput", "peak_throughput", "mean_latency", "p95_latency", "blocks",
                "block_rate", "messages", "orders_created", "orders_fulfilled"):
        row[key] = f"{statistics.fmean(float(s[key]) for s in summaries):.6f}"
    row["checks_ok"] = int(all(r.ok for r in results))
    row["status"] = "ok" if row["checks_ok"] else "check-failed"
    row["error"] = "; ".join(f"{c.name}: {c.detail}" for r in results for c in r.failed())
    return row, results


def write_sweep(rows: list[dict], path) -> None:
    _write_csv(Path(path), SWEEP_COLUMNS, rows)


def linear_fit_deviation(xs, ys) -> float:
    """Largest relative deviation of ``ys`` from the least-squares line through the origin."""
    denom = sum(x * x for x in xs)
    if not denom:
        return math.inf
    slope = sum(x * y for x, y in zip(xs, ys)) / denom
    return max(abs(y - slope * x) / (slope * x) for x, y in zip(xs, ys)) if slope > 0 else math.inf
