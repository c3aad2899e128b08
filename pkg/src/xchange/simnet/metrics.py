"""Run metrics, collected online from trace records.

Everything in a :class:`MetricsLog` is a function of the trace alone, so the
same numbers can be recomputed offline (see :mod:`xchange.simnet.replay`).
"""
from __future__ import annotations

import statistics
from bisect import bisect_left
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction

from ..clock import SECOND


@dataclass
class OrderRow:
    order: str
    peer: str
    offer: bool
    qty: int
    created: int
    fulfilled: int | None = None
    cancelled: bool = False

    @property
    def latency(self) -> int | None:
        return None if self.fulfilled is None else self.fulfilled - self.created


@dataclass
class TradeRow:
    trade: str
    initiator: str
    counterparty: str
    qty: int
    proposed: int
    agreed: int | None = None
    n: int | None = None
    initiator_total: int | None = None
    counterparty_total: int | None = None
    done: dict = field(default_factory=dict)
    aborted: dict = field(default_factory=dict)
    paid: dict = field(default_factory=dict)
    payments: int = 0

    @property
    def completed(self) -> int | None:
        """Time both sides finished, or None."""
        if len(self.done) == 2:
            return max(self.done.values())
        return None

    @property
    def outcome(self) -> str:
        if self.completed is not None:
            return "done"
        if self.aborted:
            return "aborted"
        return "open"

    def total_of(self, peer: str) -> int:
        return self.initiator_total if peer == self.initiator else self.counterparty_total


def stolen_in_trade(row: TradeRow, adversary: str) -> Fraction:
    """Value the honest side sent beyond what the adversary reciprocated, in the honest side's asset."""
    if row.agreed is None or adversary not in (row.initiator, row.counterparty):
        return Fraction(0)
    honest = row.counterparty if adversary == row.initiator else row.initiator
    honest_sent = row.paid.get(honest, 0)
    adv_sent = row.paid.get(adversary, 0)
    adv_total = row.total_of(adversary)
    owed = Fraction(row.total_of(honest) * adv_sent, adv_total) if adv_total else Fraction(0)
    return max(Fraction(0), honest_sent - owed)


@dataclass
class MetricsLog:
    orders: dict[str, OrderRow] = field(default_factory=dict)
    trades: dict[str, TradeRow] = field(default_factory=dict)
    duration: int = 0
    horizon: int = 0
    end: int = 0
    blocks: int = 0
    messages_sent: int = 0
    messages_delivered: int = 0
    messages_dropped: int = 0
    messages_per_peer: dict[str, int] = field(default_factory=dict)
    adversaries: dict[str, str] = field(default_factory=dict)
    request_timeouts: int = 0

    # --- derived -----------------------------------------------------------------

    def completion_times(self) -> list[int]:
        return sorted(t for t in (row.completed for row in self.trades.values()) if t is not None)

    @property
    def trades_completed(self) -> int:
        return len(self.completion_times())

    @property
    def throughput(self) -> float:
        """Completed trades per simulated second of workload."""
        return self.trades_completed / (self.duration / SECOND) if self.duration else 0.0

    @property
    def peak_throughput(self) -> int:
        """Most trades completed in any one-second window."""
        times = self.completion_times()
        best = 0
        for i, t in enumerate(times):
            best = max(best, bisect_left(times, t + SECOND) - i)
        return best

    def latencies(self) -> list[int]:
        return sorted(r.latency for r in self.orders.values() if r.latency is not None)

    @property
    def mean_latency(self) -> float:
        lat = self.latencies()
        return statistics.fmean(lat) / SECOND if lat else 0.0

    def latency_percentile(self, p: float) -> float:
        lat = self.latencies()
        if not lat:
            return 0.0
        index = min(len(lat) - 1, max(0, int(round(p / 100 * (len(lat) - 1)))))
        return lat[index] / SECOND

    @property
    def block_rate(self) -> float:
        return self.blocks / (self.duration / SECOND) if self.duration else 0.0

    @property
    def orders_fulfilled(self) -> int:
        return sum(1 for r in self.orders.values() if r.fulfilled is not None)

    def fulfil_rate(self, peer: str | None = None) -> float:
        rows = [r for r in self.orders.values() if peer is None or r.peer == peer]
        rows = [r for r in rows if not r.cancelled]
        return sum(1 for r in rows if r.fulfilled is not None) / len(rows) if rows else 1.0

    def stolen(self) -> dict[str, dict[str, Fraction]]:
        """Per adversary: trade id -> stolen value, for trades where the value is positive."""
        out = {}
        for adv in sorted(self.adversaries):
            per_trade = {}
            for tid, row in sorted(self.trades.items()):
                value = stolen_in_trade(row, adv)
                if value > 0:
                    per_trade[tid] = value
            out[adv] = per_trade
        return out

    def theft_counts(self) -> dict[str, int]:
        return {adv: len(v) for adv, v in self.stolen().items()}

    def summary(self) -> dict:
        stolen = self.stolen()
        return {
            "orders_created": len(self.orders),
            "orders_fulfilled": self.orders_fulfilled,
            "trades_completed": self.trades_completed,
            "trades_aborted": sum(1 for r in self.trades.values() if r.outcome == "aborted"),
            "throughput": round(self.throughput, 6),
            "peak_throughput": self.peak_throughput,
            "mean_latency": round(self.mean_latency, 6),
            "p50_latency": round(self.latency_percentile(50), 6),
            "p95_latency": round(self.latency_percentile(95), 6),
            "blocks": self.blocks,
            "block_rate": round(self.block_rate, 6),
            "messages": self.messages_sent,
            "dropped": self.messages_dropped,
            "request_timeouts": self.request_timeouts,
            "theft_trades": sum(len(v) for v in stolen.values()),
            "stolen": str(sum((sum(v.values(), Fraction(0)) for v in stolen.values()), Fraction(0))),
        }

    def fingerprint(self) -> dict:
        """Everything comparable between an online and a replayed computation."""
        return {
            "summary": self.summary(),
            "orders": {k: (r.peer, r.offer, r.qty, r.created, r.fulfilled, r.cancelled)
                       for k, r in sorted(self.orders.items())},
            "trades": {k: (r.initiator, r.counterparty, r.qty, r.proposed, r.agreed, r.n, r.outcome, r.completed,
                           tuple(sorted(r.paid.items())), r.payments)
                       for k, r in sorted(self.trades.items())},
            "messages_per_peer": dict(sorted(self.messages_per_peer.items())),
            "stolen": {a: {t: str(v) for t, v in d.items()} for a, d in self.stolen().items()},
        }


class MetricsCollector:
    """Trace listener that folds records into a :class:`MetricsLog` as they are emitted."""

    def __init__(self):
        self.log = MetricsLog()
        self._sent = Counter()
        self._handlers = {
            "run_start": self._run_start,
            "run_end": self._run_end,
            "send": self._send,
            "deliver": self._deliver,
            "drop": self._drop,
            "block": self._block,
            "order_created": self._order_created,
            "order_cancelled": self._order_cancelled,
            "order_fulfilled": self._order_fulfilled,
            "proposal": self._proposal,
            "agreement": self._agreement,
            "payment": self._payment,
            "trade_done": self._trade_done,
            "abort": self._abort,
            "request_timeout": self._timeout,
        }

    def __call__(self, record: dict) -> None:
        handler = self._handlers.get(record["type"])
        if handler is not None:
            handler(record)

    def result(self) -> MetricsLog:
        self.log.messages_per_peer = dict(sorted(self._sent.items()))
        return self.log

    def _run_start(self, r):
        self.log.duration = r["duration"]
        self.log.horizon = r["horizon"]
        self.log.adversaries = dict(r.get("adversaries", {}))

    def _run_end(self, r):
        self.log.end = r["t"]

    def _send(self, r):
        self.log.messages_sent += 1
        self._sent[r["src"]] += 1

    def _deliver(self, r):
        self.log.messages_delivered += 1

    def _drop(self, r):
        self.log.messages_dropped += 1

    def _block(self, r):
        self.log.blocks += 1

    def _order_created(self, r):
        self.log.orders[r["order"]] = OrderRow(r["order"], r["peer"], r["offer"], r["qty"], r["t"])

    def _order_cancelled(self, r):
        row = self.log.orders.get(r["order"])
        if row is not None:
            row.cancelled = True

    def _order_fulfilled(self, r):
        row = self.log.orders.get(r["order"])
        if row is not None:
            row.fulfilled = r["t"]

    def _proposal(self, r):
        self.log.trades[r["trade"]] = TradeRow(r["trade"], r["initiator"], r["counterparty"], r["qty"], r["t"])

    def _agreement(self, r):
        row = self.log.trades.get(r["trade"])
        if row is not None:
            row.agreed = r["t"]
            row.n = r["n"]
            row.qty = r["qty"]
            row.initiator_total = r["initiator_total"]
            row.counterparty_total = r["counterparty_total"]

    def _payment(self, r):
        row = self.log.trades.get(r["trade"])
        if row is not None:
            row.paid[r["payer"]] = row.paid.get(r["payer"], 0) + r["amount"]
            row.payments += 1

    def _trade_done(self, r):
        row = self.log.trades.get(r["trade"])
        if row is not None:
            row.done[r["role"]] = r["t"]

    def _abort(self, r):
        row = self.log.trades.get(r["trade"])
        if row is not None:
            row.aborted.setdefault(r["role"], r["reason"])

    def _timeout(self, r):
        self.log.request_timeouts += 1
