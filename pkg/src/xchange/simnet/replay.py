"""Offline metric recomputation from a recorded trace.

This deliberately does not reuse :class:`MetricsCollector`: it groups the raw
records by type and rebuilds every table in one pass per table, so it can act
as an independent check on the online numbers.
"""
from __future__ import annotations

import json
from collections import defaultdict

from .metrics import MetricsLog, OrderRow, TradeRow


class TraceError(ValueError):
    """The trace is malformed or incomplete."""


def parse_trace(lines) -> list[dict]:
    records = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceError(f"line {lineno}: not valid JSON ({exc.msg})") from None
        if not isinstance(record, dict) or not isinstance(record.get("t"), int) or not isinstance(
                record.get("type"), str):
            raise TraceError(f"line {lineno}: every record needs an integer 't' and a string 'type'")
        records.append(record)
    return records


def load_trace(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return parse_trace(fh)


def check_trace(records: list[dict]) -> None:
    if not records:
        raise TraceError("empty trace")
    if records[0]["type"] != "run_start":
        raise TraceError("trace does not begin with run_start")
    if records[-1]["type"] != "run_end":
        raise TraceError("trace is truncated: no run_end record")
    if sum(1 for r in records if r["type"] in ("run_start", "run_end")) != 2:
        raise TraceError("trace contains more than one run")
    last = 0
    for i, r in enumerate(records):
        if r["t"] < last:
            raise TraceError(f"record {i + 1}: time goes backwards")
        last = r["t"]
    if records[-1].get("records") not in (None, len(records)):
        raise TraceError("trace is truncated: record count does not match run_end")


_REQUIRED = {
    "send": ("src",), "order_created": ("order", "peer", "offer", "qty"), "order_fulfilled": ("order",),
    "order_cancelled": ("order",), "proposal": ("trade", "initiator", "counterparty", "qty"),
    "agreement": ("trade", "n", "qty", "initiator_total", "counterparty_total"),
    "payment": ("trade", "payer", "amount"), "trade_done": ("trade", "role"), "abort": ("trade", "role", "reason"),
}


def compute_metrics(records: list[dict]) -> MetricsLog:
    """Recompute a :class:`MetricsLog` from trace records."""
    check_trace(records)
    by_type = defaultdict(list)
    for i, r in enumerate(records):
        for key in _REQUIRED.get(r["type"], ()):
            if key not in r:
                raise TraceError(f"record {i + 1}: {r['type']} record lacks {key!r}")
        by_type[r["type"]].append(r)

    start = records[0]
    log = MetricsLog(duration=start["duration"], horizon=start["horizon"], end=records[-1]["t"],
                     adversaries=dict(start.get("adversaries", {})))
    log.messages_sent = len(by_type["send"])
    log.messages_delivered = len(by_type["deliver"])
    log.messages_dropped = len(by_type["drop"])
    log.blocks = len(by_type["block"])
    log.request_timeouts = len(by_type["request_timeout"])
    per_peer = defaultdict(int)
    for r in by_type["send"]:
        per_peer[r["src"]] += 1
    log.messages_per_peer = dict(sorted(per_peer.items()))

    cancelled = {r["order"] for r in by_type["order_cancelled"]}
    fulfilled = {}
    for r in by_type["order_fulfilled"]:
        fulfilled.setdefault(r["order"], r["t"])
    for r in by_type["order_created"]:
        log.orders[r["order"]] = OrderRow(r["order"], r["peer"], r["offer"], r["qty"], r["t"],
                                          fulfilled.get(r["order"]), r["order"] in cancelled)

    agreements = {r["trade"]: r for r in by_type["agreement"]}
    paid = defaultdict(lambda: defaultdict(int))
    payments = defaultdict(int)
    for r in by_type["payment"]:
        paid[r["trade"]][r["payer"]] += r["amount"]
        payments[r["trade"]] += 1
    done = defaultdict(dict)
    for r in by_type["trade_done"]:
        done[r["trade"]][r["role"]] = r["t"]
    aborted = defaultdict(dict)
    for r in by_type["abort"]:
        aborted[r["trade"]].setdefault(r["role"], r["reason"])
    for r in by_type["proposal"]:
        tid = r["trade"]
        row = TradeRow(tid, r["initiator"], r["counterparty"], r["qty"], r["t"])
        a = agreements.get(tid)
        if a is not None:
            row.agreed, row.n, row.qty = a["t"], a["n"], a["qty"]
            row.initiator_total, row.counterparty_total = a["initiator_total"], a["counterparty_total"]
        row.paid = dict(paid[tid]) if tid in paid else {}
        row.payments = payments.get(tid, 0)
        row.done = dict(done.get(tid, {}))
        row.aborted = dict(aborted.get(tid, {}))
        log.trades[tid] = row
    return log


def replay_file(path) -> MetricsLog:
    return compute_metrics(load_trace(path))
