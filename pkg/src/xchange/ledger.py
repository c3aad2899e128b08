"""Individual hash chains that record full trade specifications.

Every peer grows its own chain of :class:`BlockPartition` records.  A
bilateral transaction is split in two partitions: the initiator appends its
half immediately (so it can run several transactions at once) and the
counterparty later appends a half that points at the initiator's hash and
returns a counter-signature over it.  Tampering with a chain is detected by
comparing it with the copies and hash pointers held by counterparties.

Partition hashing and signing use the canonical encoding from
:mod:`xchange.encoding`:

    content   = encode([b"partition", creator, seq, prev_hash_self,
                        prev_hash_counterparty, counterparty, timestamp, payload])
    signature = Ed25519(creator, content)
    hash      = sha256(encode([content, signature]))
    counter-signature = Ed25519(counterparty, b"countersign" + hash)

so the hash commits to every field except the counter-signature.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator, Protocol

from .assets import ExternalTxId, Lookup, WalletAddress
from .crypto import GENESIS_HASH, Identity, PeerId, Signature
from .encoding import EncodingError, decode, digest, encode
from .orderbook import AssetPair, OrderSpec


class LedgerError(Exception):
    pass


class LedgerFormatError(LedgerError):
    pass


# --- payloads -------------------------------------------------------------------

@dataclass(frozen=True)
class OfferPayload:
    order: OrderSpec
    kind = "offer"

    def to_wire(self) -> list:
        return [self.kind, self.order.to_wire()]


@dataclass(frozen=True)
class RequestPayload:
    order: OrderSpec
    kind = "request"

    def to_wire(self) -> list:
        return [self.kind, self.order.to_wire()]


INITIATOR = "initiator"
COUNTERPARTY = "counterparty"


@dataclass(frozen=True)
class AgreementPayload:
    trade_id: bytes
    initiator: PeerId
    counterparty: PeerId
    initiator_order: int
    counterparty_order: int
    pair: AssetPair
    initiator_is_offer: bool
    payments_per_side: int
    publication_deadline: int
    wallets: tuple[tuple[str, WalletAddress | None], ...]
    kind = "agreement"

    def to_wire(self) -> list:
        return [
            self.kind, self.trade_id, self.initiator.key, self.counterparty.key,
            self.initiator_order, self.counterparty_order, self.pair.to_wire(),
            self.initiator_is_offer, self.payments_per_side, self.publication_deadline,
            [[side, None if w is None else w.to_wire()] for side, w in self.wallets],
        ]

    def signing_bytes(self) -> bytes:
        return encode([b"agreement", self.to_wire()])

    @property
    def parties(self) -> tuple[PeerId, PeerId]:
        return (self.initiator, self.counterparty)

    def role_of(self, peer: PeerId) -> str:
        if peer == self.initiator:
            return INITIATOR
        if peer == self.counterparty:
            return COUNTERPARTY
        raise LedgerError(f"{peer} is not a party to trade {self.trade_id.hex()}")

    def other(self, peer: PeerId) -> PeerId:
        return self.counterparty if peer == self.initiator else self.initiator

    def wallet(self, side: str) -> WalletAddress | None:
        for name, address in self.wallets:
            if name == side:
                return address
        return None

    def with_wallet(self, side: str, address: WalletAddress) -> "AgreementPayload":
        wallets = tuple((name, address if name == side else w) for name, w in self.wallets)
        return replace(self, wallets=wallets)

    def is_seller(self, peer: PeerId) -> bool:
        return (peer == self.initiator) == self.initiator_is_offer

    def pay_asset(self, peer: PeerId) -> str:
        return self.pair.base if self.is_seller(peer) else self.pair.quote

    def side_total(self, peer: PeerId) -> int:
        return self.pair.base_qty if self.is_seller(peer) else self.pair.quote_qty

    def receive_wallet(self, peer: PeerId) -> WalletAddress | None:
        return self.wallet(self.role_of(peer))

    def increment(self, payer: PeerId, index: int) -> int:
        return increment_amount(self.side_total(payer), self.payments_per_side, index)

    def schedule(self) -> list[tuple[PeerId, int]]:
        """Payment slots in protocol order; the initiator pays first and sides alternate."""
        slots = []
        for index in range(1, self.payments_per_side + 1):
            slots.append((self.initiator, index))
            slots.append((self.counterparty, index))
        return slots


def increment_amount(total: int, n: int, index: int) -> int:
    """Floor split of ``total`` in ``n`` parts, remainder added to the last part."""
    if not 1 <= index <= n:
        raise ValueError(f"payment index {index} outside 1..{n}")
    base = total // n
    return base + (total - base * n if index == n else 0)


@dataclass(frozen=True)
class BlockRef:
    creator: PeerId
    seq: int
    hash: bytes

    def to_wire(self) -> list:
        return [self.creator.key, self.seq, self.hash]

    @classmethod
    def from_wire(cls, data) -> "BlockRef":
        creator, seq, h = data
        return cls(PeerId(bytes(creator)), seq, bytes(h))


@dataclass(frozen=True)
class PaymentPayload:
    trade_id: bytes
    trade_ref: BlockRef
    payer: PeerId
    amount: int
    external_txid: ExternalTxId
    payment_index: int
    kind = "payment"

    def to_wire(self) -> list:
        return [
            self.kind, self.trade_id, self.trade_ref.to_wire(), self.payer.key,
            self.amount, self.external_txid.to_wire(), self.payment_index,
        ]


@dataclass(frozen=True)
class TradeDonePayload:
    trade_id: bytes
    trade_ref: BlockRef
    payment_refs: tuple[BlockRef, ...]
    kind = "tradedone"

    def to_wire(self) -> list:
        return [self.kind, self.trade_id, self.trade_ref.to_wire(), [r.to_wire() for r in self.payment_refs]]

    def signing_bytes(self) -> bytes:
        return encode([b"tradedone", self.to_wire()])


@dataclass(frozen=True)
class MultiPartyPayload:
    participants: tuple[PeerId, ...]
    body: bytes
    kind = "multiparty"

    def to_wire(self) -> list:
        return [self.kind, [p.key for p in self.participants], self.body]


Payload = OfferPayload | RequestPayload | AgreementPayload | PaymentPayload | TradeDonePayload | MultiPartyPayload
UNILATERAL = (OfferPayload, RequestPayload)
BILATERAL = (AgreementPayload, PaymentPayload, TradeDonePayload, MultiPartyPayload)


def payload_from_wire(data) -> Payload:
    kind, *rest = data
    if kind == "offer":
        return OfferPayload(OrderSpec.from_wire(rest[0]))
    if kind == "request":
        return RequestPayload(OrderSpec.from_wire(rest[0]))
    if kind == "agreement":
        (trade_id, initiator, counterparty, i_order, c_order, pair, i_offer, n, deadline, wallets) = rest
        return AgreementPayload(
            bytes(trade_id), PeerId(bytes(initiator)), PeerId(bytes(counterparty)), i_order, c_order,
            AssetPair.from_wire(pair), i_offer, n, deadline,
            tuple((side, None if w is None else WalletAddress.from_wire(w)) for side, w in wallets),
        )
    if kind == "payment":
        trade_id, ref, payer, amount, txid, index = rest
        return PaymentPayload(
            bytes(trade_id), BlockRef.from_wire(ref), PeerId(bytes(payer)), amount,
            ExternalTxId.from_wire(txid), index,
        )
    if kind == "tradedone":
        trade_id, ref, refs = rest
        return TradeDonePayload(bytes(trade_id), BlockRef.from_wire(ref), tuple(BlockRef.from_wire(r) for r in refs))
    if kind == "multiparty":
        participants, body = rest
        return MultiPartyPayload(tuple(PeerId(bytes(p)) for p in participants), bytes(body))
    raise LedgerFormatError(f"unknown payload kind {kind!r}")


def payload_issues(payload: Payload) -> list[str]:
    """Invariant breaches that can be judged from the payload alone."""
    issues = []
    if isinstance(payload, AgreementPayload):
        if payload.payments_per_side < 1:
            issues.append("agreement with fewer than one payment per side")
        if payload.initiator == payload.counterparty:
            issues.append("agreement with itself")
    elif isinstance(payload, PaymentPayload):
        if payload.payment_index < 1:
            issues.append("payment index below 1")
        if payload.amount <= 0:
            issues.append("non-positive payment amount")
    elif isinstance(payload, MultiPartyPayload):
        if len(set(payload.participants)) != len(payload.participants):
            issues.append("duplicate participant")
    return issues


# --- partitions -------------------------------------------------------------------

@dataclass(frozen=True)
class BlockPartition:
    creator: PeerId
    seq: int
    prev_hash_self: bytes
    prev_hash_counterparty: bytes | None
    counterparty: PeerId | None
    timestamp: int
    payload: Payload
    signature: Signature
    counterparty_signature: Signature | None = None

    @staticmethod
    def content_bytes_for(creator, seq, prev_self, prev_cp, counterparty, timestamp, payload) -> bytes:
        return encode([
            b"partition", creator.key, seq, prev_self, prev_cp,
            None if counterparty is None else counterparty.key, timestamp, payload.to_wire(),
        ])

    @functools.cached_property
    def content_bytes(self) -> bytes:
        return self.content_bytes_for(
            self.creator, self.seq, self.prev_hash_self, self.prev_hash_counterparty,
            self.counterparty, self.timestamp, self.payload,
        )

    @functools.cached_property
    def hash(self) -> bytes:
        return digest(encode([self.content_bytes, self.signature.value]))

    @property
    def ref(self) -> BlockRef:
        return BlockRef(self.creator, self.seq, self.hash)

    @property
    def kind(self) -> str:
        return self.payload.kind

    @property
    def is_bilateral(self) -> bool:
        return isinstance(self.payload, BILATERAL)

    def signature_valid(self) -> bool:
        return self.signature.signer == self.creator and self.signature.verify(self.content_bytes)

    def countersignature_valid(self) -> bool:
        sig = self.counterparty_signature
        return (
            sig is not None
            and self.counterparty is not None
            and sig.signer == self.counterparty
            and sig.verify(countersign_bytes(self.hash))
        )

    def with_countersignature(self, sig: Signature) -> "BlockPartition":
        return replace(self, counterparty_signature=sig)

    def to_wire(self) -> list:
        return [
            self.creator.key, self.seq, self.prev_hash_self, self.prev_hash_counterparty,
            None if self.counterparty is None else self.counterparty.key, self.timestamp,
            self.payload.to_wire(), self.signature.to_wire(),
            None if self.counterparty_signature is None else self.counterparty_signature.to_wire(),
        ]

    @classmethod
    def from_wire(cls, data) -> "BlockPartition":
        try:
            creator, seq, prev_self, prev_cp, counterparty, ts, payload, sig, csig = data
            return cls(
                PeerId(bytes(creator)), seq, bytes(prev_self),
                None if prev_cp is None else bytes(prev_cp),
                None if counterparty is None else PeerId(bytes(counterparty)), ts,
                payload_from_wire(payload), Signature.from_wire(sig),
                None if csig is None else Signature.from_wire(csig),
            )
        except (TypeError, ValueError) as exc:
            raise LedgerFormatError(f"malformed partition record: {exc}") from exc

    def encode(self) -> bytes:
        return encode(self.to_wire())

    def __repr__(self) -> str:
        return f"<{self.kind} {self.creator}#{self.seq} {self.hash.hex()[:8]}>"


def countersign_bytes(partition_hash: bytes) -> bytes:
    return b"countersign" + partition_hash


def make_partition(identity: Identity, seq: int, prev_self: bytes, prev_cp: bytes | None,
                   counterparty: PeerId | None, timestamp: int, payload: Payload) -> BlockPartition:
    content = BlockPartition.content_bytes_for(
        identity.peer_id, seq, prev_self, prev_cp, counterparty, timestamp, payload)
    return BlockPartition(
        identity.peer_id, seq, prev_self, prev_cp, counterparty, timestamp, payload, identity.sign(content))


# --- store ------------------------------------------------------------------------

@dataclass
class TradeRecord:
    trade_id: bytes
    agreements: dict[PeerId, BlockPartition] = field(default_factory=dict)
    payments: dict[tuple[PeerId, int], BlockPartition] = field(default_factory=dict)
    payment_copies: list[BlockPartition] = field(default_factory=list)
    done: dict[PeerId, BlockPartition] = field(default_factory=dict)

    @property
    def published_agreement(self) -> BlockPartition | None:
        """The initiator's agreement partition, if known."""
        for part in self.agreements.values():
            if part.creator == part.payload.initiator:
                return part
        return None

    @property
    def agreement(self) -> AgreementPayload | None:
        for part in self.agreements.values():
            return part.payload
        return None

    def done_complete(self) -> bool:
        if len(self.done) >= 2:
            return True
        return any(p.countersignature_valid() for p in self.done.values())


class LedgerStore:
    """Partitions held by one peer (or the union held by everyone)."""

    def __init__(self):
        self.chains: dict[PeerId, dict[int, BlockPartition]] = {}
        self.by_hash: dict[bytes, BlockPartition] = {}
        self.trades: dict[bytes, TradeRecord] = {}
        self.trades_of: dict[PeerId, list[bytes]] = {}
        # trades that may still make a peer responsible; audits prune finished ones
        self.live_of: dict[PeerId, dict[bytes, None]] = {}
        self.conflicts: list[tuple[BlockPartition, BlockPartition]] = []

    def __len__(self) -> int:
        return len(self.by_hash)

    def __iter__(self) -> Iterator[BlockPartition]:
        for peer in sorted(self.chains):
            chain = self.chains[peer]
            for seq in sorted(chain):
                yield chain[seq]

    def peers(self) -> list[PeerId]:
        return sorted(self.chains)

    def get(self, creator: PeerId, seq: int) -> BlockPartition | None:
        return self.chains.get(creator, {}).get(seq)

    def get_hash(self, h: bytes) -> BlockPartition | None:
        return self.by_hash.get(h)

    def chain(self, peer: PeerId) -> list[BlockPartition]:
        chain = self.chains.get(peer, {})
        return [chain[seq] for seq in sorted(chain)]

    def tip(self, peer: PeerId) -> BlockPartition | None:
        chain = self.chains.get(peer)
        if not chain:
            return None
        return chain[max(chain)]

    def add(self, partition: BlockPartition) -> bool:
        """Store a partition.  Returns False if already present or conflicting."""
        existing = self.by_hash.get(partition.hash)
        if existing is not None:
            if existing.counterparty_signature is None and partition.counterparty_signature is not None:
                self._replace(partition)
            return False
        chain = self.chains.setdefault(partition.creator, {})
        other = chain.get(partition.seq)
        if other is not None:
            self.conflicts.append((other, partition))
            return False
        chain[partition.seq] = partition
        self.by_hash[partition.hash] = partition
        self._index(partition)
        return True

    def _replace(self, partition: BlockPartition) -> None:
        self.chains[partition.creator][partition.seq] = partition
        self.by_hash[partition.hash] = partition
        self._index(partition)

    def _trade(self, trade_id: bytes) -> TradeRecord:
        record = self.trades.get(trade_id)
        if record is None:
            record = self.trades[trade_id] = TradeRecord(trade_id)
        return record

    def _index(self, partition: BlockPartition) -> None:
        payload = partition.payload
        if isinstance(payload, AgreementPayload):
            record = self._trade(payload.trade_id)
            if not record.agreements:
                for peer in payload.parties:
                    self.trades_of.setdefault(peer, []).append(payload.trade_id)
                    self.live_of.setdefault(peer, {})[payload.trade_id] = None
            record.agreements[partition.creator] = partition
        elif isinstance(payload, PaymentPayload):
            record = self._trade(payload.trade_id)
            if partition.creator == payload.payer:
                record.payments[(payload.payer, payload.payment_index)] = partition
            else:
                record.payment_copies.append(partition)
        elif isinstance(payload, TradeDonePayload):
            self._trade(payload.trade_id).done[partition.creator] = partition

    def attach_countersignature(self, partition_hash: bytes, sig: Signature) -> BlockPartition:
        part = self.by_hash.get(partition_hash)
        if part is None:
            raise LedgerError("countersignature for unknown partition")
        signed = part.with_countersignature(sig)
        if not signed.countersignature_valid():
            raise LedgerError("invalid countersignature")
        self._replace(signed)
        return signed


class ExternalChainQuery(Protocol):
    def lookup(self, txid: ExternalTxId) -> Lookup: ...


# --- per-peer ledger --------------------------------------------------------------

class Ledger:
    """The chain of one identity.  ``mirror`` receives a copy of every stored partition."""

    def __init__(self, identity: Identity, store: LedgerStore | None = None,
                 clock: Callable[[], int] = lambda: 0, mirror: LedgerStore | None = None):
        self.identity = identity
        self.store = store if store is not None else LedgerStore()
        self.clock = clock
        self.mirror = mirror

    @property
    def peer_id(self) -> PeerId:
        return self.identity.peer_id

    def chain(self) -> list[BlockPartition]:
        return self.store.chain(self.peer_id)

    def _keep(self, partition: BlockPartition) -> None:
        self.store.add(partition)
        if self.mirror is not None and self.mirror is not self.store:
            self.mirror.add(partition)

    def _append(self, payload: Payload, counterparty: PeerId | None, prev_cp: bytes | None) -> BlockPartition:
        tip = self.store.tip(self.peer_id)
        seq = 1 if tip is None else tip.seq + 1
        prev_self = GENESIS_HASH if tip is None else tip.hash
        partition = make_partition(self.identity, seq, prev_self, prev_cp, counterparty, self.clock(), payload)
        self._keep(partition)
        return partition

    def append_unilateral(self, payload: Payload) -> BlockPartition:
        if not isinstance(payload, UNILATERAL):
            raise LedgerError(f"{type(payload).__name__} is not a unilateral payload")
        return self._append(payload, None, None)

    def initiate_bilateral(self, counterparty: PeerId, payload: Payload) -> BlockPartition:
        if not isinstance(payload, BILATERAL):
            raise LedgerError(f"{type(payload).__name__} is not a bilateral payload")
        if counterparty == self.peer_id:
            raise LedgerError("cannot transact with oneself")
        known = self.store.tip(counterparty)
        return self._append(payload, counterparty, GENESIS_HASH if known is None else known.hash)

    def countersign(self, incoming: BlockPartition, external: ExternalChainQuery | None = None,
                    check: Callable[[BlockPartition], None] | None = None) -> tuple[BlockPartition, Signature]:
        """Accept a counterparty's partition: append our half and sign theirs.

        ``check`` may raise :class:`LedgerError` to refuse the payload; nothing is
        stored in that case.
        """
        if incoming.counterparty != self.peer_id:
            raise LedgerError("partition is addressed to another peer")
        if incoming.creator == self.peer_id:
            raise LedgerError("cannot countersign own partition")
        if not isinstance(incoming.payload, BILATERAL):
            raise LedgerError("unilateral partitions are not countersigned")
        if not incoming.signature_valid():
            raise LedgerError("invalid signature on incoming partition")
        issues = payload_issues(incoming.payload)
        if issues:
            raise LedgerError("; ".join(issues))
        if isinstance(incoming.payload, PaymentPayload) and external is not None:
            status = external.lookup(incoming.payload.external_txid)
            if not status.confirmed:
                raise LedgerError(f"payment {incoming.payload.external_txid} is {status.status.value}")
        if check is not None:
            check(incoming)
        sig = self.identity.sign(countersign_bytes(incoming.hash))
        self._keep(incoming.with_countersignature(sig))
        own = self._append(incoming.payload, incoming.creator, incoming.hash)
        return own, sig

    def accept_reply(self, own_hash: bytes, reply: BlockPartition, sig: Signature) -> BlockPartition:
        """Store the counterparty's half and its signature over our partition."""
        own = self.store.get_hash(own_hash)
        if own is None or own.creator != self.peer_id:
            raise LedgerError("reply for an unknown partition")
        if reply.prev_hash_counterparty != own_hash or reply.creator != own.counterparty:
            raise LedgerError("reply does not link to our partition")
        if reply.payload != own.payload or not reply.signature_valid():
            raise LedgerError("reply partition is not a valid copy")
        signed = self.store.attach_countersignature(own_hash, sig)
        if self.mirror is not None and self.mirror is not self.store:
            if self.mirror.get_hash(own_hash) is not None:
                self.mirror.attach_countersignature(own_hash, sig)
        self._keep(reply)
        return signed

    def observe(self, partition: BlockPartition) -> None:
        if partition.signature_valid():
            self._keep(partition)


# --- verification -------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    kind: str
    creator: PeerId | None
    seq: int | None
    detail: str
    evidence: tuple[bytes, ...] = ()

    def __str__(self) -> str:
        where = f"{self.creator}#{self.seq}" if self.creator is not None else "-"
        return f"{self.kind} at {where}: {self.detail}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def add(self, kind: str, creator, seq, detail: str, evidence: tuple[bytes, ...] = ()) -> None:
        self.violations.append(Violation(kind, creator, seq, detail, evidence))

    def extend(self, other: "ValidationReport") -> None:
        self.violations.extend(other.violations)
        self.notes.extend(other.notes)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return bool(self.violations)

    def __len__(self) -> int:
        return len(self.violations)

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}


def _check_partition(part: BlockPartition, report: ValidationReport) -> None:
    if not part.signature_valid():
        report.add("bad-signature", part.creator, part.seq, "creator signature does not verify")
    if part.counterparty_signature is not None and not part.countersignature_valid():
        report.add("bad-countersignature", part.creator, part.seq, "counterparty signature does not verify")
    if isinstance(part.payload, UNILATERAL) and (part.counterparty is not None or part.prev_hash_counterparty is not None):
        report.add("payload-invalid", part.creator, part.seq, "unilateral partition names a counterparty")
    if isinstance(part.payload, (AgreementPayload, PaymentPayload, TradeDonePayload)) and part.counterparty is None:
        report.add("payload-invalid", part.creator, part.seq, "bilateral partition without counterparty")
    if isinstance(part.payload, AgreementPayload) and part.counterparty is not None:
        if {part.creator, part.counterparty} != set(part.payload.parties):
            report.add("payload-invalid", part.creator, part.seq, "agreement parties do not match partition")
    for issue in payload_issues(part.payload):
        report.add("payload-invalid", part.creator, part.seq, issue)


def verify_chain(chain: Iterable[BlockPartition], reference: LedgerStore | Iterable[BlockPartition] | None = None) -> ValidationReport:
    """Check one peer's chain; with ``reference`` also compare against counterparty copies."""
    chain = list(chain)
    report = ValidationReport()
    if not chain:
        return report
    owner = chain[0].creator
    prev: BlockPartition | None = None
    seen: set[int] = set()
    for position, part in enumerate(chain, start=1):
        if part.creator != owner:
            report.add("creator-mismatch", part.creator, part.seq, f"partition of another peer in chain of {owner}")
        if part.seq in seen:
            report.add("seq-duplicate", owner, part.seq, "sequence number used twice")
        elif part.seq != position:
            kind = "seq-gap" if part.seq > position and part.seq not in seen else "seq-order"
            report.add(kind, owner, position, f"expected seq {position}, found {part.seq}")
        seen.add(part.seq)
        expected_prev = GENESIS_HASH if position == 1 else (prev.hash if prev is not None else None)
        if part.prev_hash_self != expected_prev:
            report.add("link-broken", owner, part.seq, "previous-hash pointer does not match predecessor")
        _check_partition(part, report)
        prev = part
    if reference is not None:
        _compare_with_reference(owner, chain, reference, report)
    return report


def _compare_with_reference(owner: PeerId, chain: list[BlockPartition], reference, report: ValidationReport) -> None:
    if not isinstance(reference, LedgerStore):
        store = LedgerStore()
        for part in reference:
            store.add(part)
        reference = store
    by_seq = {p.seq: p for p in chain}
    hashes = {p.hash for p in chain}
    for copy in reference.chain(owner):
        mine = by_seq.get(copy.seq)
        if mine is None:
            report.add("missing-partition", owner, copy.seq, "counterparty holds a partition absent from the chain",
                       (copy.hash,))
        elif mine.hash != copy.hash:
            report.add("conflict", owner, copy.seq, "chain and counterparty copy disagree (fraud proof)",
                       (mine.hash, copy.hash))
    for peer in reference.peers():
        if peer == owner:
            continue
        for part in reference.chain(peer):
            if part.counterparty == owner and part.prev_hash_counterparty not in (None, GENESIS_HASH):
                if part.prev_hash_counterparty not in hashes:
                    report.add("dangling-link", owner, None,
                               f"{peer}#{part.seq} points at a partition missing from the chain",
                               (part.prev_hash_counterparty,))


def verify_partitions(partitions: Iterable[BlockPartition]) -> ValidationReport:
    """Verify a collection of partitions from many chains (e.g. a ledger dump)."""
    report = ValidationReport()
    merged: dict[bytes, BlockPartition] = {}
    for part in partitions:
        have = merged.get(part.hash)
        if have is None or (have.counterparty_signature is None and part.counterparty_signature is not None):
            merged[part.hash] = part
    versions: dict[tuple[PeerId, int], list[BlockPartition]] = {}
    for part in merged.values():
        versions.setdefault((part.creator, part.seq), []).append(part)
    chains: dict[PeerId, list[BlockPartition]] = {}
    for (creator, seq), parts in sorted(versions.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        parts.sort(key=lambda p: p.hash)
        if len(parts) > 1:
            report.add("conflict", creator, seq, f"{len(parts)} distinct partitions claim this position (fraud proof)",
                       tuple(p.hash for p in parts))
        chains.setdefault(creator, []).append(parts[0])
    for creator in sorted(chains):
        report.extend(verify_chain(chains[creator]))

    responders: dict[bytes, list[BlockPartition]] = {}
    for part in merged.values():
        link = part.prev_hash_counterparty
        if link is None or link == GENESIS_HASH:
            continue
        target = merged.get(link)
        if target is None:
            report.add("dangling-link", part.creator, part.seq, "counterparty pointer references an unknown partition",
                       (link,))
            continue
        if part.counterparty is not None and target.creator != part.counterparty:
            report.add("dangling-link", part.creator, part.seq, "counterparty pointer references a third party")
        if target.payload == part.payload:
            responders.setdefault(link, []).append(part)
    for part in merged.values():
        if not part.is_bilateral or part.counterparty is None:
            continue
        answered = [r for r in responders.get(part.hash, ()) if r.creator == part.counterparty]
        is_response = (part.prev_hash_counterparty in merged
                       and merged[part.prev_hash_counterparty].payload == part.payload)
        if part.counterparty_signature is not None and not answered:
            report.add("missing-counterpart", part.creator, part.seq,
                       "dual-signed payload without the counterparty's partition")
        elif not answered and not is_response:
            report.notes.append(f"{part.creator}#{part.seq} {part.kind} awaits countersignature")
    report.extend(check_trade_records(merged.values()))
    return report


def check_trade_records(partitions: Iterable[BlockPartition]) -> ValidationReport:
    """Cross-partition payload invariants: payment ordering and trade-done references."""
    report = ValidationReport()
    store = LedgerStore()
    for part in partitions:
        store.add(part)
    for trade_id, record in store.trades.items():
        agreement = record.agreement
        payments = list(record.payments.values())
        if agreement is None:
            for part in payments:
                report.add("payload-invalid", part.creator, part.seq, "payment for an unknown agreement")
            continue
        n = agreement.payments_per_side
        per_payer: dict[PeerId, list[BlockPartition]] = {}
        for part in payments:
            payload = part.payload
            if payload.payer not in agreement.parties:
                report.add("payload-invalid", part.creator, part.seq, "payer is not a party to the trade")
                continue
            if payload.payment_index > n:
                report.add("payload-invalid", part.creator, part.seq, f"payment index beyond {n}")
            per_payer.setdefault(payload.payer, []).append(part)
        for payer, parts in per_payer.items():
            parts.sort(key=lambda p: p.seq)
            indices = [p.payload.payment_index for p in parts]
            if indices != list(range(1, len(indices) + 1)):
                report.add("payload-invalid", payer, parts[0].seq, f"payment indices {indices} are not 1..k in order")
        for done in record.done.values():
            refs = done.payload.payment_refs
            if len(refs) != 2 * n:
                report.add("payload-invalid", done.creator, done.seq, f"trade done lists {len(refs)} payments, expected {2 * n}")
            for ref in refs:
                target = store.get_hash(ref.hash)
                if target is None:
                    continue
                if not isinstance(target.payload, PaymentPayload) or target.payload.trade_id != trade_id:
                    report.add("payload-invalid", done.creator, done.seq, "trade done references a foreign block")
    return report


# --- responsibility audit -----------------------------------------------------------

def payment_verified(payment: PaymentPayload, agreement: AgreementPayload, external: ExternalChainQuery) -> bool:
    """A payment counts once its external transfer is confirmed with the agreed amount and destination."""
    try:
        expected = agreement.increment(payment.payer, payment.payment_index)
    except (ValueError, LedgerError):
        return False
    if payment.amount != expected or payment.external_txid.chain_id != agreement.pay_asset(payment.payer):
        return False
    status = external.lookup(payment.external_txid)
    if not status.confirmed:
        return False
    tx = status.tx
    return tx.amount == payment.amount and tx.receiver == agreement.receive_wallet(agreement.other(payment.payer))


def next_payer(record: TradeRecord, external: ExternalChainQuery) -> PeerId | None:
    """Who owes the next payment of a trade, or None when every payment is verified."""
    agreement = record.agreement
    for payer, index in agreement.schedule():
        part = record.payments.get((payer, index))
        if part is None or not payment_verified(part.payload, agreement, external):
            return payer
    return None


def responsible_trades(subject: PeerId, store: LedgerStore, external: ExternalChainQuery,
                       exclude: bytes | None = None, role: str | None = None) -> list[bytes]:
    """Trades in which ``subject`` owes the next payment.

    With ``role`` set, only trades where ``subject`` plays that role are
    counted.  A responsible counterparty holds an increment it has not yet
    reciprocated; a responsible initiator is level with its counterparty.
    """
    result = []
    live = store.live_of.get(subject, {})
    for trade_id in list(live):
        record = store.trades[trade_id]
        published = record.published_agreement
        if published is None:
            continue
        if published.timestamp > published.payload.publication_deadline or record.done_complete():
            del live[trade_id]  # neither condition can revert
            continue
        if trade_id == exclude:
            continue
        if role is not None and published.payload.role_of(subject) != role:
            continue
        if next_payer(record, external) == subject:
            result.append(trade_id)
    return result


def audit_responsibilities(subject: PeerId, store: LedgerStore, external: ExternalChainQuery,
                           exclude: bytes | None = None) -> int:
    """Number of ongoing trades in which ``subject`` must make the next payment."""
    return len(responsible_trades(subject, store, external, exclude))


# --- multi-party block trees -----------------------------------------------------------

@dataclass
class BlockTree:
    root: BlockPartition
    leaves: list[BlockPartition]
    cosignatures: dict[PeerId, Signature]

    @property
    def participants(self) -> list[PeerId]:
        return [self.root.creator] + [leaf.creator for leaf in self.leaves]


def build_multiparty_block(initiator: Ledger, others: list[Ledger], payload: Payload) -> BlockTree:
    ids = [initiator.peer_id] + [o.peer_id for o in others]
    if len(set(ids)) != len(ids):
        raise LedgerError("duplicate participant")
    if not others:
        raise LedgerError("a multi-party block needs at least one other participant")
    if not isinstance(payload, BILATERAL):
        raise LedgerError("multi-party blocks carry a bilateral payload")
    if len(others) == 1:
        other = others[0]
        root = initiator.initiate_bilateral(other.peer_id, payload)
        leaf, sig = other.countersign(root)
        root = initiator.accept_reply(root.hash, leaf, sig)
        return BlockTree(root, [leaf], {other.peer_id: sig})
    root = initiator._append(payload, None, None)
    leaves, cosigs = [], {}
    for other in others:
        if not root.signature_valid():
            raise LedgerError("root signature invalid")
        leaf = other._append(payload, initiator.peer_id, root.hash)
        cosigs[other.peer_id] = other.identity.sign(countersign_bytes(root.hash))
        initiator._keep(leaf)
        other._keep(root)
        leaves.append(leaf)
    return BlockTree(root, leaves, cosigs)


def verify_tree(tree: BlockTree) -> ValidationReport:
    report = ValidationReport()
    root = tree.root
    _check_partition(root, report)
    seen = {root.creator}
    for leaf in tree.leaves:
        _check_partition(leaf, report)
        if leaf.creator in seen:
            report.add("payload-invalid", leaf.creator, leaf.seq, "participant appears twice in tree")
        seen.add(leaf.creator)
        if leaf.prev_hash_counterparty != root.hash:
            report.add("dangling-link", leaf.creator, leaf.seq, "leaf does not point at the root")
        if leaf.payload != root.payload:
            report.add("payload-mismatch", leaf.creator, leaf.seq, "leaf payload differs from root")
        if leaf.counterparty != root.creator:
            report.add("payload-invalid", leaf.creator, leaf.seq, "leaf names the wrong initiator")
        sig = tree.cosignatures.get(leaf.creator)
        if sig is None and len(tree.leaves) == 1:
            sig = root.counterparty_signature
        if sig is None or sig.signer != leaf.creator or not sig.verify(countersign_bytes(root.hash)):
            report.add("bad-countersignature", leaf.creator, leaf.seq, "missing or invalid co-signature on root")
    payload = root.payload
    if isinstance(payload, MultiPartyPayload) and set(payload.participants) != seen:
        report.add("payload-invalid", root.creator, root.seq, "participant list does not match tree")
    return report


# --- dump / load ----------------------------------------------------------------------

def dump_partitions(partitions: Iterable[BlockPartition]) -> str:
    """One hex-encoded canonical partition per line."""
    return "".join(p.encode().hex() + "\n" for p in partitions)


def load_partitions(text: str) -> list[BlockPartition]:
    parts = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            parts.append(BlockPartition.from_wire(decode(bytes.fromhex(line))))
        except (ValueError, EncodingError, LedgerFormatError) as exc:
            raise LedgerFormatError(f"line {lineno}: {exc}") from exc
    return parts
