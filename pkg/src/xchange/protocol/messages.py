"""Protocol messages and their canonical wire format.

A message is encoded as ``[kind, sender, cid, body, signature]`` where ``body``
is a dict of named fields.  The creator signs ``[b"msg", kind, sender, cid,
body]``.  Responses echo the correlation id (``cid``) of the request they
answer.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any

from ..crypto import Identity, PeerId, Signature
from ..encoding import decode, digest, encode
from ..ledger import BlockPartition, payload_from_wire
from ..orderbook import AssetPair, OrderId, OrderSpec

ORDER = "Order"
CANCEL_ORDER = "CancelOrder"
MATCH = "Match"
REJECT_MATCH = "RejectMatch"
TRADE_PROPOSAL = "TradeProposal"
NEGOTIATE = "Negotiate"
TRADE_ACCEPT = "TradeAccept"
TRADE_REJECT = "TradeReject"
PARTIAL_AGREEMENT = "PartialAgreement"
AGREEMENT = "Agreement"
BLOCK_PROPOSAL = "BlockProposal"
BLOCK_REPLY = "BlockReply"
PAYMENT = "Payment"
PARTIAL_TRADE_DONE = "PartialTradeDone"
TRADE_DONE = "TradeDone"
MATCH_WITHDRAWN = "MatchWithdrawn"

KINDS = (
    ORDER, CANCEL_ORDER, MATCH, REJECT_MATCH, TRADE_PROPOSAL, NEGOTIATE, TRADE_ACCEPT,
    TRADE_REJECT, PARTIAL_AGREEMENT, AGREEMENT, BLOCK_PROPOSAL, BLOCK_REPLY, PAYMENT,
    PARTIAL_TRADE_DONE, TRADE_DONE, MATCH_WITHDRAWN,
)

# RejectMatch / TradeReject reasons
EXPIRED = "expired"
CANCELLED = "cancelled"
ASSETS_RESERVED = "assets-reserved"
NEGOTIATION_FAILED = "negotiation-failed"
RESPONSIBILITY_HELD = "responsibility-held"
REASONS = (EXPIRED, CANCELLED, ASSETS_RESERVED, NEGOTIATION_FAILED, RESPONSIBILITY_HELD)


@dataclass(frozen=True)
class Proposal:
    """Terms under negotiation; ``pair`` holds the negotiated quantities."""

    trade_id: bytes
    initiator: PeerId
    initiator_order: int
    counterparty: PeerId
    counterparty_order: int
    initiator_is_offer: bool
    pair: AssetPair

    @property
    def qty(self) -> int:
        return self.pair.base_qty

    def with_pair(self, pair: AssetPair) -> "Proposal":
        return replace(self, pair=pair)

    def to_wire(self) -> list:
        return [
            self.trade_id, self.initiator.key, self.initiator_order, self.counterparty.key,
            self.counterparty_order, self.initiator_is_offer, self.pair.to_wire(),
        ]

    @classmethod
    def from_wire(cls, data) -> "Proposal":
        trade_id, initiator, i_order, counterparty, c_order, i_offer, pair = data
        return cls(bytes(trade_id), PeerId(bytes(initiator)), i_order, PeerId(bytes(counterparty)), c_order,
                   i_offer, AssetPair.from_wire(pair))


def _peer_list(data) -> list[PeerId]:
    return [PeerId(bytes(k)) for k in data]


_FIELDS = {
    "order": OrderSpec.from_wire,
    "matched": OrderSpec.from_wire,
    "order_id": OrderId.from_wire,
    "matched_id": OrderId.from_wire,
    "qty": int,
    "reason": str,
    "proposal": Proposal.from_wire,
    "agreement": payload_from_wire,
    "done": payload_from_wire,
    "partition": BlockPartition.from_wire,
    "signature": Signature.from_wire,
    "countersignature": Signature.from_wire,
    "initiator_signature": Signature.from_wire,
    "matchmakers": _peer_list,
}


@dataclass
class Message:
    kind: str
    sender: PeerId
    cid: bytes | None = None
    body: dict[str, Any] = field(default_factory=dict)
    signature: Signature | None = None

    def __getitem__(self, name: str) -> Any:
        return self.body[name]

    def get(self, name: str, default=None) -> Any:
        return self.body.get(name, default)

    def signing_bytes(self) -> bytes:
        return encode([b"msg", self.kind, self.sender.key, self.cid, self.body])

    def sign(self, identity: Identity) -> "Message":
        self.signature = identity.sign(self.signing_bytes())
        return self

    def verify(self) -> bool:
        return (
            self.signature is not None
            and self.signature.signer == self.sender
            and self.signature.verify(self.signing_bytes())
        )

    def to_wire(self) -> list:
        return [self.kind, self.sender.key, self.cid, self.body,
                None if self.signature is None else self.signature.to_wire()]

    def encode(self) -> bytes:
        return encode(self.to_wire())

    def digest(self) -> str:
        return digest(self.encode())[:8].hex()

    @classmethod
    def decode(cls, data: bytes) -> "Message":
        kind, sender, cid, body, sig = decode(data)
        if kind not in KINDS:
            raise ValueError(f"unknown message kind {kind!r}")
        fields = {}
        for name, value in body.items():
            parse = _FIELDS.get(name)
            if parse is None:
                raise ValueError(f"unknown field {name!r} in {kind}")
            fields[name] = None if value is None else parse(value)
        return cls(kind, PeerId(bytes(sender)), None if cid is None else bytes(cid), fields,
                   None if sig is None else Signature.from_wire(sig))

    def __repr__(self) -> str:
        cid = self.cid.hex()[:6] if self.cid else "-"
        return f"<{self.kind} from {self.sender} cid={cid}>"
