"""Per-trade state kept by each side of a trade."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any

from ..crypto import PeerId
from ..ledger import COUNTERPARTY, INITIATOR, AgreementPayload, BlockPartition, BlockRef, TradeDonePayload
from ..orderbook import OrderId
from .messages import Proposal

NEGOTIATING = "negotiating"
ACCEPTED = "accepted"
AGREED = "agreed"
EXECUTING = "executing"
FINALIZING = "finalizing"
DONE = "done"
ABORTED = "aborted"
PHASES = (NEGOTIATING, ACCEPTED, AGREED, EXECUTING, FINALIZING, DONE, ABORTED)


def trade_id_for(initiator: PeerId, cid: bytes) -> bytes:
    return hashlib.sha256(b"trade" + initiator.key + cid).digest()[:16]


@dataclass
class TradeState:
    trade_id: bytes
    role: str
    me: PeerId
    other: PeerId
    own_order: OrderId
    proposal: Proposal
    reserved: int
    phase: str = NEGOTIATING
    entry: Any = None
    agreement: AgreementPayload | None = None
    agreement_partition: BlockPartition | None = None
    sent: list[BlockPartition] = field(default_factory=list)
    received: list[BlockPartition] = field(default_factory=list)
    pending_payment: BlockPartition | None = None
    pending_message: Any = None
    pending_since: int = 0
    done_payload: TradeDonePayload | None = None
    done_partition: BlockPartition | None = None
    abort_flag: bool = False
    timer: Any = None
    started_at: int = 0
    transfer_attempts: int = 0
    blocked_since: int | None = None
    done_cid: bytes | None = None

    @property
    def is_initiator(self) -> bool:
        return self.role == INITIATOR

    @property
    def other_order(self) -> OrderId:
        p = self.proposal
        if self.is_initiator:
            return OrderId(p.counterparty, p.counterparty_order)
        return OrderId(p.initiator, p.initiator_order)

    @property
    def n(self) -> int:
        return self.agreement.payments_per_side

    @property
    def open(self) -> bool:
        return self.phase not in (DONE, ABORTED)

    @property
    def agreement_ref(self) -> BlockRef:
        return self.agreement_partition.ref

    def my_turn(self) -> bool:
        if self.agreement is None or self.abort_flag:
            return False
        made, seen = len(self.sent), len(self.received)
        if made >= self.n:
            return False
        return made == seen if self.is_initiator else made < seen

    def complete(self) -> bool:
        return self.agreement is not None and len(self.sent) == len(self.received) == self.n

    def payment_refs(self) -> tuple[BlockRef, ...]:
        """Payment partitions in schedule order, each referenced at its payer's chain."""
        first, second = (self.sent, self.received) if self.is_initiator else (self.received, self.sent)
        refs = []
        for a, b in zip(first, second):
            refs.append(a.ref)
            refs.append(b.ref)
        return tuple(refs)


__all__ = [
    "TradeState", "trade_id_for", "PHASES", "NEGOTIATING", "ACCEPTED", "AGREED", "EXECUTING",
    "FINALIZING", "DONE", "ABORTED", "INITIATOR", "COUNTERPARTY",
]
