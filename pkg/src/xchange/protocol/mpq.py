"""Match priority queues: per-order queues of nominated counterparties."""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from fractions import Fraction

from ..crypto import PeerId
from ..orderbook import OrderId, OrderSpec


def match_quality(own: OrderSpec, matched: OrderSpec) -> Fraction:
    """Price advantage of ``matched`` relative to the owner's limit price.

    A buyer gains by paying less than its limit, a seller by receiving more.
    """
    if own.is_offer:
        return matched.price - own.price
    return own.price - matched.price


@dataclass
class MatchQueueEntry:
    retries: int
    matched: OrderSpec
    quality: Fraction
    qty: int
    matchmakers: list[PeerId] = field(default_factory=list)
    nominations: int = 1

    @property
    def matched_id(self) -> OrderId:
        return self.matched.id

    def sort_key(self) -> tuple:
        m = self.matched
        return (self.retries, -self.quality, m.created_at, m.creator.key, m.order_seq)


class MatchPriorityQueue:
    """Entries pop in ascending retries, then descending quality.

    Ties go to the oldest matched order, then to the order id, mirroring the
    order book's time priority so no resident order starves behind newer
    ones.  Nominations of an order already known to the queue are collapsed
    into the existing entry.
    """

    def __init__(self, owner: OrderId, window: int):
        self.owner = owner
        self.window = window
        self.window_closed = False
        self.timer = None
        self._heap: list[tuple[tuple, int, MatchQueueEntry]] = []
        self._known: dict[OrderId, MatchQueueEntry] = {}
        self._queued: set[OrderId] = set()
        self._counter = 0

    def __len__(self) -> int:
        return len(self._queued)

    def __contains__(self, matched_id: OrderId) -> bool:
        return matched_id in self._queued

    def known(self, matched_id: OrderId) -> MatchQueueEntry | None:
        return self._known.get(matched_id)

    def _push(self, entry: MatchQueueEntry) -> None:
        self._counter += 1
        heapq.heappush(self._heap, (entry.sort_key(), self._counter, entry))
        self._queued.add(entry.matched_id)

    def push(self, entry: MatchQueueEntry) -> bool:
        """Add a nomination.  Returns True when it created a new entry."""
        existing = self._known.get(entry.matched_id)
        if existing is not None:
            existing.nominations += 1
            for mm in entry.matchmakers:
                if mm not in existing.matchmakers:
                    existing.matchmakers.append(mm)
            return False
        self._known[entry.matched_id] = entry
        self._push(entry)
        return True

    def pop(self) -> MatchQueueEntry | None:
        while self._heap:
            _, _, entry = heapq.heappop(self._heap)
            if entry.matched_id in self._queued:
                self._queued.discard(entry.matched_id)
                return entry
        return None

    def peek(self) -> MatchQueueEntry | None:
        while self._heap:
            entry = self._heap[0][2]
            if entry.matched_id in self._queued:
                return entry
            heapq.heappop(self._heap)
        return None

    def requeue(self, entry: MatchQueueEntry) -> None:
        """Put a popped entry back with one more retry."""
        entry.retries += 1
        self._known[entry.matched_id] = entry
        self._push(entry)

    def discard(self, matched_id: OrderId) -> None:
        self._queued.discard(matched_id)

    def entries(self) -> list[MatchQueueEntry]:
        live = [e for _, _, e in self._heap if e.matched_id in self._queued]
        return sorted(live, key=MatchQueueEntry.sort_key)
