"""End-to-end acceptance criteria.  Each test reports one pass/fail line."""
import contextlib
import io
import itertools
import random
import time
from dataclasses import replace
from pathlib import Path

import pytest

from helpers import UNIT, Market, schedule_walker
from reference import run_book_sequence, run_mpq_sequence
from xchange import cli
from xchange.ledger import audit_responsibilities, dump_partitions, make_partition
from xchange.simnet import load_scenario, run, scenario_from_dict
from xchange.simnet.runner import (
    POLICY_GRID, SweepPoint, linear_fit_deviation, max_increment, run_point, write_outputs,
)

pytestmark = pytest.mark.acceptance
CORPUS = sorted(Path("scenarios").glob("*.yaml"))


# --- 1: fraud bound ------------------------------------------------------------------

def fraud_scenario(seed: int, incset: int) -> dict:
    rng = random.Random(seed)
    peers = rng.randint(20, 100) + 1
    adversary = rng.randint(1, peers)
    actions = [{"at": round(0.1 + k * 0.12, 3), "peer": adversary, "action": "create_order",
                "side": "offer" if k % 2 else "request", "base_qty": 1, "quote_qty": 1} for k in range(8)]
    return {"name": f"fraud-{seed}", "seed": seed, "peers": peers,
            "workload": {"kind": "synthetic", "rate": 1, "duration": 1},
            "policy": {"restrict": 1, "incset": incset, "sign_messages": False},
            "actions": actions, "adversaries": [{"peer": adversary, "profile": "payment-withholder"}],
            "drain": 15}


@pytest.mark.slow
def test_c1_fraud_bound(criterion):
    started = time.monotonic()
    worst_trades, over_increment, failed, thefts = 0, [], [], 0
    for seed in range(100):
        for incset in (1, 2):
            result = run(scenario_from_dict(fraud_scenario(seed, incset)), keep_trace=False, full_trace=False)
            if not result.ok:
                failed.append((seed, incset, [c.name for c in result.failed()]))
            m = result.metrics
            for adv, per_trade in m.stolen().items():
                worst_trades = max(worst_trades, len(per_trade))
                thefts += len(per_trade)
                if incset == 2:
                    for tid, value in per_trade.items():
                        row = m.trades[tid]
                        honest = row.counterparty if adv == row.initiator else row.initiator
                        if value > max_increment(row.total_of(honest), row.n):
                            over_increment.append((seed, tid))
    elapsed = time.monotonic() - started
    ok = worst_trades <= 1 and not over_increment and not failed and elapsed < 120
    criterion(1, ok, f"200 runs, max theft trades per adversary {worst_trades}, {thefts} thefts, "
                     f"{len(over_increment)} over one increment, {elapsed:.0f}s")
    assert not failed, failed
    assert worst_trades <= 1 and not over_increment
    assert elapsed < 120


# --- 2: golden two-peer sequence --------------------------------------------------------

PREFIX = [
    ("Order", "P1", "P1"), ("Order", "P2", "P1"), ("Match", "P1", "P2"),                # I
    ("TradeProposal", "P2", "P1"), ("TradeAccept", "P1", "P2"),                          # II
    ("PartialAgreement", "P2", "P1"), ("Agreement", "P1", "P2"),                         # III
    ("BlockProposal", "P2", "P1"), ("Payment", "P2", "P1"), ("BlockReply", "P1", "P2"),  # III/IV
    ("BlockReply", "P1", "P2"), ("Payment", "P1", "P2"), ("BlockReply", "P2", "P1"),     # IV
]
ROUND = [("Payment", "P2", "P1"), ("BlockReply", "P1", "P2"), ("Payment", "P1", "P2"), ("BlockReply", "P2", "P1")]
SUFFIX = [
    ("PartialTradeDone", "P2", "P1"), ("TradeDone", "P1", "P1"), ("TradeDone", "P1", "P2"),  # V
    ("BlockProposal", "P2", "P1"), ("TradeDone", "P2", "P1"), ("BlockReply", "P1", "P2"),
]


def golden(n: int) -> list:
    return PREFIX + ROUND * (n - 1) + SUFFIX


def test_c2_golden_sequence(criterion):
    problems, wall = [], None
    for n in (1, 2, 3):
        sc = load_scenario("scenarios/two_peer.yaml").with_overrides(policy={"incset": n})
        started = time.monotonic()
        result = run(sc)
        if n == 1:
            wall = time.monotonic() - started
        roles = {result.world.label(1): "P1", result.world.label(2): "P2"}
        sent = [(r["kind"], roles[r["src"]], roles[r["dst"]]) for r in result.trace.records if r["type"] == "send"]
        if sent != golden(n):
            problems.append(f"n={n}: message sequence differs")
        signed = [p for p in result.world.union if p.counterparty_signature is not None]
        if sum(p.kind == "payment" for p in signed) != 2 * n:
            problems.append(f"n={n}: payment blocks != {2 * n}")
        if sum(p.kind == "tradedone" for p in signed) != 1:
            problems.append(f"n={n}: not exactly one dual-signed TradeDone")
        if not result.ok or result.metrics.trades_completed != 1:
            problems.append(f"n={n}: trade did not complete cleanly")
    ok = not problems and wall < 1.0
    criterion(2, ok, f"n=1,2,3 sequences; n=1 wall {wall:.3f}s" + (f"; {problems}" if problems else ""))
    assert not problems, problems
    assert wall < 1.0


# --- 3: scalability sweep ---------------------------------------------------------------------

@pytest.mark.slow
def test_c3_sweep_linearity(criterion):
    started = time.monotonic()
    base = load_scenario("scenarios/sweep_base.yaml")
    loads = [10, 50, 100, 200]
    rows = {}
    for load in loads:
        for policy in POLICY_GRID:
            row, _ = run_point(base, SweepPoint(load, policy, POLICY_GRID[policy]), reps=1)
            rows[(load, policy)] = row
    elapsed = time.monotonic() - started
    details, ok = [], elapsed < 600
    for policy in POLICY_GRID:
        pts = [rows[(load, policy)] for load in loads]
        if any(p["status"] != "ok" for p in pts):
            ok = False
            details.append(f"{policy}: point failed")
            continue
        dev = linear_fit_deviation(loads, [float(p["throughput"]) for p in pts])
        ratio = float(pts[-1]["mean_latency"]) / float(pts[0]["mean_latency"])
        ok = ok and dev <= 0.25 and ratio <= 2.0
        details.append(f"{policy}: fit dev {dev:.3f}, latency ratio {ratio:.2f}")
    criterion(3, ok, "; ".join(details) + f"; {elapsed:.0f}s")
    assert ok, details


# --- 4: tamper fuzz ---------------------------------------------------------------------------------

def _verify_text(tmp: Path, text: str) -> int:
    path = tmp / "fuzz.dump"
    path.write_text(text)
    with contextlib.redirect_stdout(io.StringIO()):
        return cli.main(["verify", str(path)])


def _resign_tail(ident, blocks, start):
    out = list(blocks[:start])
    prev = out[-1].hash if out else blocks[0].prev_hash_self
    for seq, b in enumerate(blocks[start:], start + 1):
        nb = make_partition(ident, seq, prev, b.prev_hash_counterparty, b.counterparty, b.timestamp, b.payload)
        out.append(nb)
        prev = nb.hash
    return out


@pytest.mark.slow
def test_c4_tamper_fuzz(criterion, tmp_path):
    sc = scenario_from_dict({"name": "fuzz", "seed": 5, "peers": 4,
                             "workload": {"kind": "synthetic", "rate": 2, "duration": 2}, "drain": 20})
    result = run(sc)
    assert result.ok and result.metrics.orders_fulfilled == len(result.metrics.orders)
    chains = {p.id: list(result.world.union.chain(p.id)) for p in result.world.peers}
    assert max(len(c) for c in chains.values()) <= 20
    idents = {p.id: p.identity for p in result.world.peers}
    rng = random.Random(0)
    cases, missed = 0, []
    for owner, chain in chains.items():
        rest = [p for pid, c in chains.items() if pid != owner for p in c]
        for i in range(len(chain)):
            variants = [("delete", dump_partitions(rest + chain[:i] + chain[i + 1:]))]
            if i + 1 < len(chain):
                swapped = chain[:i] + [chain[i + 1], chain[i]] + chain[i + 2:]
                variants.append(("swap", dump_partitions(rest + _resign_tail(idents[owner], swapped, i))))
            raw = bytearray(chain[i].encode())
            raw[rng.randrange(len(raw))] ^= 1 << rng.randrange(8)
            lines = dump_partitions(rest + chain).splitlines()
            lines[len(rest) + i] = bytes(raw).hex()
            variants.append(("flip", "\n".join(lines) + "\n"))
            edited = replace(chain[i], timestamp=chain[i].timestamp + 1)
            variants.append(("edit", dump_partitions(rest + chain[:i] + [edited] + chain[i + 1:])))
            for name, text in variants:
                cases += 1
                if _verify_text(tmp_path, text) != cli.EXIT_VIOLATION:
                    missed.append((name, i))
    false_pos = []
    honest = {"fuzz-source": dump_partitions(list(result.world.union))}
    for path in CORPUS:
        honest[path.name] = dump_partitions(list(run(load_scenario(path)).world.union))
    for name, text in honest.items():
        if _verify_text(tmp_path, text) != cli.EXIT_OK:
            false_pos.append(name)
    ok = not missed and not false_pos
    criterion(4, ok, f"{cases} mutations, {cases - len(missed)} detected; "
                     f"{len(false_pos)} false positives over {len(honest)} honest dumps")
    assert not missed, missed[:10]
    assert not false_pos, false_pos


# --- 5: order book and MPQ oracles ----------------------------------------------------------------

def test_c5_orderbook_oracle(criterion):
    ops = sum(run_book_sequence(seed) for seed in range(1000))
    mpq_ops = sum(run_mpq_sequence(seed) for seed in range(1000))
    criterion(5, True, f"1000 book sequences ({ops} ops), 1000 MPQ sequences ({mpq_ops} ops) match the models")


# --- 6: audit vs brute-force walker ---------------------------------------------------------------

def test_c6_audit_walker(criterion):
    cases = [(n, k) for n in (1, 2, 3) for k in range(2 * n + 1)]
    checked = 0
    for (n1, k1), second in itertools.product(cases, [None] + cases):
        n2, k2 = second if second is not None else (None, None)
        m = Market()
        a, b, c = m.party("a"), m.party("b"), m.party("c")
        t1 = m.agree(a, b, n=n1, base_qty=7 * UNIT + 1, quote_qty=5 * UNIT + 3)
        m.pay_prefix(t1, k1)
        expected = {a.id: 0, b.id: 0, c.id: 0}
        owner = schedule_walker(n1, k1, a.id, b.id)
        if owner is not None:
            expected[owner] += 1
        if n2 is not None:
            t2 = m.agree(c, b, n=n2, base_qty=3 * UNIT, quote_qty=11 * UNIT + 7, initiator_is_offer=False)
            m.pay_prefix(t2, k2)
            owner = schedule_walker(n2, k2, c.id, b.id)
            if owner is not None:
                expected[owner] += 1
        for party in (a, b, c):
            assert audit_responsibilities(party.id, m.union, m.chains) == expected[party.id], (n1, k1, n2, k2)
        checked += 1
        if k1 == 2 * n1 and n2 is None:
            m.finish(t1)
            assert all(audit_responsibilities(p.id, m.union, m.chains) == 0 for p in (a, b, c))
    criterion(6, True, f"{checked} single and concurrent trade prefixes agree with the walker")


# --- 7: adversary containment ---------------------------------------------------------------------

def test_c7_adversary_containment(criterion):
    notes, ok = [], True

    res = run(load_scenario("scenarios/agreement_withholder.yaml"))
    adv = res.world.peer(4)
    adv_wallets = {w.address for w in adv.wallets.values()}
    moved = [tx for chain in res.world.chains.chains.values() for tx in chain.log
             if tx.sender in adv_wallets or tx.receiver in adv_wallets]
    recs, adv_label = res.trace.records, res.world.label(4)
    adv_trades = {r["trade"] for r in recs if r["type"] == "proposal" and adv_label in (r["initiator"], r["counterparty"])}
    completed = [r for r in recs if r["type"] == "trade_done" and r["trade"] in adv_trades]
    victim_aborts = [(i, r) for i, r in enumerate(recs) if r["type"] == "abort" and r["trade"] in adv_trades
                     and r["peer"] != adv_label and r["reason"] != "assets-reserved"]

    def rematched(i, order):
        return any(r.get("order") == order and r["type"] in ("proposal", "order_redisseminated", "order_fulfilled")
                   for r in recs[i + 1:])

    withholder_ok = (not moved and res.ok and not completed and victim_aborts
                     and all(r["reason"] == "publication-deadline" and rematched(i, r["order"])
                             for i, r in victim_aborts))
    notes.append(f"agreement-withholder moved {len(moved)} transfers, {len(victim_aborts)} victim trades "
                 f"aborted at the deadline and re-entered matching")
    ok &= withholder_ok

    res = run(load_scenario("scenarios/biased_matchmaker.yaml"))
    victims = [res.world.label(i) for i in range(2, 13) if i != 5]
    rates = [res.metrics.fulfil_rate(p) for p in victims]
    biased_ok = res.ok and min(rates) == 1.0 and res.scenario.fanout >= 2
    notes.append(f"biased matchmaker: min victim fulfil rate {min(rates):.2f}")
    ok &= biased_ok

    res = run(load_scenario("scenarios/negotiation_staller.yaml"))
    victim, staller, other = (res.world.label(i) for i in (1, 2, 3))
    recs = res.trace.records
    proposals = [r for r in recs if r["type"] == "proposal" and r["initiator"] == victim]
    timeouts = [r for r in recs if r["type"] == "request_timeout" and r["peer"] == victim]
    staller_ok = (len(proposals) >= 2 and proposals[0]["counterparty"] == staller and timeouts
                  and proposals[-1]["counterparty"] == other and timeouts[0]["t"] <= proposals[-1]["t"]
                  and res.metrics.fulfil_rate(victim) == 1.0)
    notes.append(f"staller: {len(timeouts)} timeout(s), victim then traded with the next MPQ entry")
    ok &= bool(staller_ok)

    criterion(7, ok, "; ".join(notes))
    assert withholder_ok and biased_ok and staller_ok


# --- 8: determinism -------------------------------------------------------------------------------

@pytest.mark.slow
def test_c8_corpus_determinism(criterion, tmp_path):
    differing = []
    for path in CORPUS:
        sc = load_scenario(path)
        outs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{path.stem}-{rep}"
            write_outputs([run(sc)], out, sc, 1)
            outs.append(out)
        for f in sorted(outs[0].iterdir()):
            if f.name != "timing.json" and f.read_bytes() != (outs[1] / f.name).read_bytes():
                differing.append(f"{path.name}:{f.name}")
    ok = not differing
    criterion(8, ok, f"{len(CORPUS)} scenarios run twice, {len(differing)} differing files")
    assert not differing, differing
