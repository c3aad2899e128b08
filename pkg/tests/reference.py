"""Naive reference models used as oracles."""
from __future__ import annotations

import random

from helpers import identity, order
from xchange.orderbook import OrderId, DuplicateOrder, LimitOrderBook, OrderBookError, OrderRejected, REJECT_EXPIRED

CREATORS = [identity(f"book-{i}") for i in range(3)]


class NaiveBook:
    """A list of resident orders, filtered and fully re-sorted on every query."""

    def __init__(self, pair_id):
        self.pair_id = pair_id
        self.orders = []

    def insert(self, o, now=None):
        if o.pair.pair_id != self.pair_id:
            raise OrderBookError("pair")
        if any(r.id == o.id for r in self.orders):
            raise DuplicateOrder(str(o.id))
        if now is not None and now > o.created_at + o.timeout:
            raise OrderRejected(REJECT_EXPIRED)
        self.orders.append(o)

    def remove(self, order_id):
        for i, r in enumerate(self.orders):
            if r.id == order_id:
                del self.orders[i]
                return True
        return False

    def match(self, incoming, now=None):
        if incoming.pair.pair_id != self.pair_id:
            return []
        wanted = incoming.pair.base_qty - incoming.traded_qty - incoming.reserved_qty
        if wanted <= 0:
            return []
        out = []
        for r in self.orders:
            if r.is_offer == incoming.is_offer or r.id == incoming.id:
                continue
            if now is not None and now > r.created_at + r.timeout:
                continue
            ok = (r.pair.quote_qty * incoming.pair.base_qty >= incoming.pair.quote_qty * r.pair.base_qty
                  if incoming.is_offer else
                  r.pair.quote_qty * incoming.pair.base_qty <= incoming.pair.quote_qty * r.pair.base_qty)
            qty = min(wanted, r.pair.base_qty - r.traded_qty - r.reserved_qty)
            if ok and qty > 0:
                out.append((r, qty))
        sign = -1 if incoming.is_offer else 1
        out.sort(key=lambda rq: (sign * rq[0].price, rq[0].created_at, rq[0].creator.key, rq[0].order_seq))
        return out

    def best_ask(self):
        asks = [r.price for r in self.orders if r.is_offer]
        return min(asks) if asks else None

    def best_bid(self):
        bids = [r.price for r in self.orders if not r.is_offer]
        return max(bids) if bids else None


def random_order(rng: random.Random, seq: int):
    base_qty = rng.randint(1, 6)
    o = order(rng.choice(CREATORS), seq, rng.random() < 0.5, base_qty=base_qty, quote_qty=rng.randint(1, 12),
              created_at=rng.randint(0, 50), timeout=rng.randint(1, 100), sign=False)
    o.traded_qty = rng.randint(0, base_qty) if rng.random() < 0.2 else 0
    o.reserved_qty = rng.randint(0, base_qty - o.traded_qty) if rng.random() < 0.2 else 0
    return o


def run_book_sequence(seed: int, max_ops: int = 200) -> int:
    """Drive the real book and the naive model with the same random ops; returns the op count."""
    rng = random.Random(seed)
    pair_id = ("BTC", "ETH")
    real, model = LimitOrderBook(pair_id), NaiveBook(pair_id)
    seq = 0
    ops = rng.randint(1, max_ops)
    for _ in range(ops):
        op = rng.random()
        now = rng.choice([None, rng.randint(0, 150)])
        if op < 0.45 or not model.orders:
            seq += 1
            o = random_order(rng, seq)
            if rng.random() < 0.05 and model.orders:
                o = rng.choice(model.orders)
            outcomes = []
            for book in (real, model):
                try:
                    book.insert(o, now)
                    outcomes.append("ok")
                except OrderBookError as exc:
                    outcomes.append(type(exc).__name__)
            assert outcomes[0] == outcomes[1], (seed, outcomes)
        elif op < 0.6:
            victim = rng.choice(model.orders).id if rng.random() < 0.9 else (CREATORS[0].peer_id, 10**6)
            victim = OrderId(*victim)
            assert real.remove(victim) == model.remove(victim)
        elif op < 0.7:
            r = rng.choice(model.orders)
            r.reserved_qty = rng.randint(0, r.pair.base_qty - r.traded_qty)
        else:
            seq += 1
            incoming = random_order(rng, seq) if rng.random() < 0.7 else rng.choice(model.orders)
            got = [(r.id, q) for r, q in real.match(incoming, now)]
            want = [(r.id, q) for r, q in model.match(incoming, now)]
            assert got == want, (seed, got, want)
        assert len(real) == len(model.orders)
        assert real.best_ask() == model.best_ask() and real.best_bid() == model.best_bid()
    return ops


def reference_pop_order(entries):
    """MPQ reference: retries ascending, quality descending, oldest matched order, then creator and seq."""
    return sorted(entries, key=lambda e: (e.retries, -e.quality, e.matched.created_at, e.matched.creator.key,
                                          e.matched.order_seq))


def run_mpq_sequence(seed: int, max_ops: int = 200) -> int:
    """Random push/pop/requeue/discard against a list re-sorted on every pop; returns the op count."""
    from fractions import Fraction

    from xchange.protocol.mpq import MatchPriorityQueue, MatchQueueEntry

    rng = random.Random(seed)
    q = MatchPriorityQueue(CREATORS[0].peer_id, window=0)
    model: list = []
    seq = 0
    ops = rng.randint(1, max_ops)
    for _ in range(ops):
        op = rng.random()
        if op < 0.5 or not model:
            seq += 1
            matched = order(rng.choice(CREATORS), seq, True, created_at=rng.randint(0, 10), sign=False)
            entry = MatchQueueEntry(rng.randint(0, 2), matched, Fraction(rng.randint(-3, 3), rng.randint(1, 3)), 1)
            assert q.push(entry)
            model.append(entry)
        elif op < 0.8:
            want = reference_pop_order(model)[0]
            got = q.pop()
            assert got is want, (seed, got, want)
            model.remove(want)
            if rng.random() < 0.5:
                q.requeue(got)
                model.append(got)
        else:
            victim = rng.choice(model)
            q.discard(victim.matched_id)
            model.remove(victim)
        assert len(q) == len(model)
    while model:
        want = reference_pop_order(model)[0]
        assert q.pop() is want
        model.remove(want)
    assert q.pop() is None
    return ops
