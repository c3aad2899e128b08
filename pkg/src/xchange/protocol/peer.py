"""The per-peer protocol engine: matchmaker and trader roles, phases I to V.

A :class:`Peer` is a reactive state machine.  It never blocks: every input is
a delivered :class:`Message` or a timer callback, and every output goes
through the :class:`Runtime` it was constructed with (send, schedule, cancel,
record).  The discrete-event simulator is one such runtime.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Callable, Protocol

from ..assets import TransferError, Wallet, WalletAddress
from ..crypto import Identity, PeerId
from ..ledger import (
    COUNTERPARTY, INITIATOR, AgreementPayload, BlockPartition, Ledger, LedgerError, LedgerStore,
    OfferPayload, PaymentPayload, RequestPayload, TradeDonePayload,
)
from ..orderbook import (
    AssetPair, LimitOrderBook, OrderId, OrderSpec, apply_match_policy, order_price_ok, validate,
)
from . import messages as M
from . import requests as R
from .messages import Message, Proposal
from .mpq import MatchPriorityQueue, MatchQueueEntry, match_quality
from .policies import Auditor, DisseminationPolicy, ProtocolConfig, clearing_policy
from .trade import (
    ABORTED, ACCEPTED, AGREED, DONE, EXECUTING, FINALIZING, NEGOTIATING, TradeState, trade_id_for,
)

logger = logging.getLogger(__name__)

REQUEST_KINDS = (M.TRADE_PROPOSAL, M.PARTIAL_AGREEMENT, M.BLOCK_PROPOSAL, M.PAYMENT, M.PARTIAL_TRADE_DONE)


class Runtime(Protocol):
    def now(self) -> int: ...

    def send(self, sender: PeerId, receiver: PeerId, message: Message) -> None: ...

    def schedule(self, owner: PeerId, delay: int, callback: Callable, *args) -> Any: ...

    def cancel(self, handle: Any) -> None: ...

    def record(self, record_type: str, /, **fields) -> None: ...


@dataclass
class OwnOrder:
    spec: OrderSpec
    matchmakers: list[PeerId]
    mpq: MatchPriorityQueue | None = None
    active: bytes | None = None
    cancelled: bool = False
    fulfilled_at: int | None = None
    retry_timer: Any = None
    spread_timer: Any = None
    stale: bool = False
    hold_until: int = 0

    @property
    def seq(self) -> int:
        return self.spec.order_seq


def _hex(peer: PeerId | None) -> str | None:
    return None if peer is None else peer.hex()[:16]


def order_label(order_id: OrderId) -> str:
    return f"{order_id.creator.hex()[:16]}:{order_id.seq}"


class Peer:
    def __init__(self, identity: Identity, runtime: Runtime, config: ProtocolConfig, chains,
                 wallets: dict[str, Wallet], matchmakers: list[PeerId] = (), is_matchmaker: bool = True,
                 mirror: LedgerStore | None = None, audit_store: LedgerStore | None = None,
                 fallback_matchmakers: list[PeerId] = ()):
        config.validate()
        self.identity = identity
        self.id = identity.peer_id
        self.rt = runtime
        self.config = config
        self.chains = chains
        self.wallets = wallets
        self.is_matchmaker = is_matchmaker
        self.ledger = Ledger(identity, LedgerStore(), clock=runtime.now, mirror=mirror)
        self.auditor = Auditor(audit_store if audit_store is not None else self.ledger.store, chains)
        self.clearing = clearing_policy(config)
        self.dissemination = DisseminationPolicy(list(matchmakers), config.fanout,
                                                 [m for m in fallback_matchmakers if m != self.id])
        self.requests = R.RequestStore(self.id, self._schedule, runtime.cancel, self._resend)
        self.reply_cache: dict[tuple, Message | None] = {}
        self.orders: dict[int, OwnOrder] = {}
        self.order_seq = 0
        self.trades: dict[bytes, TradeState] = {}
        # matchmaker state
        self.books: dict[tuple[str, str], LimitOrderBook] = {}
        self.sent_pairs: dict[OrderId, set[OrderId]] = {}
        self.named_in: dict[OrderId, set[OrderId]] = {}  # resident -> orders told about it
        self.declined: set[tuple[OrderId, OrderId]] = set()
        self.closed_orders: set[OrderId] = set()
        self.finished_trades: set[bytes] = set()
        self.handlers = {
            M.ORDER: self.on_order,
            M.CANCEL_ORDER: self.on_cancel_order,
            M.MATCH: self.on_match,
            M.REJECT_MATCH: self.on_reject_match,
            M.TRADE_PROPOSAL: self.on_trade_proposal,
            M.NEGOTIATE: self.on_negotiate,
            M.TRADE_ACCEPT: self.on_trade_accept,
            M.TRADE_REJECT: self.on_trade_reject,
            M.PARTIAL_AGREEMENT: self.on_partial_agreement,
            M.AGREEMENT: self.on_agreement,
            M.BLOCK_PROPOSAL: self.on_block_proposal,
            M.BLOCK_REPLY: self.on_block_reply,
            M.PAYMENT: self.on_payment,
            M.PARTIAL_TRADE_DONE: self.on_partial_trade_done,
            M.TRADE_DONE: self.on_trade_done,
            M.MATCH_WITHDRAWN: self.on_match_withdrawn,
        }

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.id}>"

    # --- plumbing ------------------------------------------------------------------

    @property
    def now(self) -> int:
        return self.rt.now()

    def _schedule(self, delay: int, callback, *args):
        return self.rt.schedule(self.id, delay, callback, *args)

    def _record(self, record_type: str, /, **fields) -> None:
        self.rt.record(record_type, peer=_hex(self.id), **fields)

    def _send(self, to: PeerId, kind: str, body: dict, cid: bytes | None = None) -> Message:
        msg = Message(kind, self.id, cid, body)
        if self.config.sign_messages:
            msg.sign(self.identity)
        self.rt.send(self.id, to, msg)
        return msg

    def _resend(self, req: R.Request) -> None:
        self.rt.send(self.id, req.peer, req.message)

    def _reply(self, request: Message, kind: str, body: dict) -> Message:
        msg = self._send(request.sender, kind, body, request.cid)
        self.reply_cache[(request.sender, request.kind, request.cid)] = msg
        return msg

    def _block(self, partition: BlockPartition) -> None:
        self._record("block", creator=_hex(partition.creator), seq=partition.seq, tx=partition.kind)

    def deliver(self, msg: Message) -> None:
        """Entry point for every incoming message."""
        if self.config.sign_messages and not msg.verify():
            self._record("bad_message", kind=msg.kind, sender=_hex(msg.sender))
            return
        if msg.kind in REQUEST_KINDS and msg.cid is not None:
            key = (msg.sender, msg.kind, msg.cid)
            if key in self.reply_cache:
                cached = self.reply_cache[key]
                if cached is not None:
                    self.rt.send(self.id, msg.sender, cached)
                return
            self.reply_cache[key] = None
        handler = self.handlers.get(msg.kind)
        if handler is not None:
            handler(msg)

    def receive_address(self, asset: str) -> WalletAddress:
        return self.wallets[asset].address

    # --- phase I: orders --------------------------------------------------------------

    def create_order(self, pair: AssetPair, is_offer: bool, timeout: int | None = None) -> OrderSpec:
        pair.validate()
        timeout = self.config.order_timeout if timeout is None else timeout
        if timeout <= 0:
            raise ValueError("order timeout must be positive")
        self.order_seq += 1
        spec = OrderSpec(self.id, self.order_seq, self.now, timeout, is_offer, pair).normalized()
        spec.sign(self.identity)
        targets = self.dissemination.targets()
        own = self.orders[spec.order_seq] = OwnOrder(spec, list(targets))
        part = self.ledger.append_unilateral(OfferPayload(spec.copy()) if spec.is_offer else RequestPayload(spec.copy()))
        self._block(part)
        self._record("order_created", order=order_label(spec.id), offer=spec.is_offer,
                     base=spec.pair.base, quote=spec.pair.quote, qty=spec.pair.base_qty, price=str(spec.price))
        for mm in targets:
            self._send(mm, M.ORDER, {"order": spec.copy()})
        self._arm_spread(own)
        return spec

    def _arm_spread(self, own: OwnOrder) -> None:
        if self.config.redisseminate_interval and own.spread_timer is None and own.matchmakers:
            own.spread_timer = self._schedule(self.config.redisseminate_interval, self._redisseminate, own.seq)

    def _redisseminate(self, order_seq: int) -> None:
        """Send an idle order to further matchmakers."""
        own = self.orders.get(order_seq)
        if own is None:
            return
        own.spread_timer = None
        if self._interest(own) is not None:
            return
        idle = (own.active is None and own.retry_timer is None and own.spec.reserved_qty == 0
                and (own.mpq is None or not len(own.mpq)))
        if idle:
            more = self.dissemination.more_targets(own.matchmakers)
            if more:
                own.matchmakers.extend(more)
            elif own.stale:
                # every matchmaker already holds the order; ask them to match it again
                more = list(own.matchmakers)
                self._drop_mpq(own)
            else:
                return
            own.stale = False
            self._record("order_redisseminated", order=order_label(own.spec.id), matchmakers=len(more))
            for mm in more:
                self._send(mm, M.ORDER, {"order": own.spec.copy()})
        self._arm_spread(own)

    def cancel_order(self, order_seq: int) -> bool:
        own = self.orders.get(order_seq)
        if own is None or own.cancelled or own.spec.is_fulfilled:
            return False
        own.cancelled = True
        self._drop_mpq(own)
        self._record("order_cancelled", order=order_label(own.spec.id))
        for mm in own.matchmakers:
            self._send(mm, M.CANCEL_ORDER, {"order_id": own.spec.id})
        return True

    # matchmaker side

    def _book_of(self, order_id: OrderId) -> tuple[LimitOrderBook | None, OrderSpec | None]:
        for book in self.books.values():
            order = book.get(order_id)
            if order is not None:
                return book, order
        return None, None

    def on_order(self, msg: Message) -> None:
        if not self.is_matchmaker:
            return
        order = msg["order"].copy()
        if msg.sender != order.creator or order.id in self.closed_orders:
            return
        if not order.pair.is_normalized:
            self._record("order_discarded", order=order_label(order.id), reason="invalid-pair")
            return
        verdict = validate(order, self.now)
        if not verdict:
            self._record("order_discarded", order=order_label(order.id), reason=verdict.reason)
            return
        book = self.books.get(order.pair.pair_id)
        if book is None:
            book = self.books[order.pair.pair_id] = LimitOrderBook(order.pair.pair_id)
        if order.id in book:
            # a re-announced order asks for a fresh round of matching
            self.sent_pairs.pop(order.id, None)
            self._match_and_notify(book, book.get(order.id))
            return
        book.insert(order, self.now)
        self._match_and_notify(book, order)

    def reports_match(self, incoming: OrderSpec, resident: OrderSpec) -> bool:
        return True

    def _match_and_notify(self, book: LimitOrderBook, order: OrderSpec) -> int:
        sent = 0
        for resident, qty in apply_match_policy(self.config.match_policy, order, book, self.now):
            if resident.creator == order.creator:
                continue
            reported = self.sent_pairs.setdefault(order.id, set())
            if resident.id in reported or not self.reports_match(order, resident):
                continue
            reported.add(resident.id)
            self.named_in.setdefault(resident.id, set()).add(order.id)
            self._send(order.creator, M.MATCH, {"order": order.copy(), "matched": resident.copy(), "qty": qty})
            sent += 1
        return sent

    def _remove_order(self, order_id: OrderId) -> None:
        book, _ = self._book_of(order_id)
        if book is not None:
            book.remove(order_id)
        self.closed_orders.add(order_id)
        self.sent_pairs.pop(order_id, None)
        # owners still queueing a Match that names this order would only be refused
        for other in sorted(self.named_in.pop(order_id, ())):
            if other not in self.closed_orders:
                self._send(other.creator, M.MATCH_WITHDRAWN, {"order_id": other, "matched_id": order_id})

    def on_cancel_order(self, msg: Message) -> None:
        order_id = msg["order_id"]
        if self.is_matchmaker and msg.sender == order_id.creator:
            self._remove_order(order_id)

    def on_reject_match(self, msg: Message) -> None:
        order_id, matched_id, reason = msg["order_id"], msg["matched_id"], msg["reason"]
        if not self.is_matchmaker or msg.sender != order_id.creator or reason not in M.REASONS:
            return
        if reason in (M.EXPIRED, M.CANCELLED):
            self._remove_order(order_id)
            return
        self.declined.add((order_id, matched_id))
        book, order = self._book_of(order_id)
        if order is not None:
            self._match_and_notify(book, order)

    def _matchmaker_trade_done(self, msg: Message) -> None:
        done, agreement, sig = msg["done"], msg["agreement"], msg["signature"]
        if not isinstance(done, TradeDonePayload) or not isinstance(agreement, AgreementPayload):
            return
        if done.trade_id != agreement.trade_id or done.trade_id in self.finished_trades:
            return
        if sig is None or sig.signer != agreement.counterparty or not sig.verify(done.signing_bytes()):
            return
        self.finished_trades.add(done.trade_id)
        for order_id in (OrderId(agreement.initiator, agreement.initiator_order),
                         OrderId(agreement.counterparty, agreement.counterparty_order)):
            book, order = self._book_of(order_id)
            if order is None:
                continue
            order.traded_qty = min(order.pair.base_qty, order.traded_qty + agreement.pair.base_qty)
            if order.is_fulfilled:
                self._remove_order(order_id)

    # trader side

    def _interest(self, own: OwnOrder | None) -> str | None:
        if own is None or own.cancelled:
            return M.CANCELLED
        if own.spec.is_expired(self.now):
            return M.EXPIRED
        if own.spec.is_fulfilled:
            return M.NEGOTIATION_FAILED
        return None

    def _reject_match(self, matchmakers, order_id: OrderId, matched_id: OrderId, reason: str) -> None:
        for mm in matchmakers:
            self._send(mm, M.REJECT_MATCH, {"order_id": order_id, "matched_id": matched_id, "reason": reason})

    def on_match(self, msg: Message) -> None:
        mine = msg["order"]
        matched = msg["matched"].copy()
        own = self.orders.get(mine.order_seq) if mine.creator == self.id else None
        reason = self._interest(own)
        if reason is not None:
            self._reject_match([msg.sender], mine.id, matched.id, reason)
            return
        if matched.creator == self.id:
            return
        if (not matched.verify_signature() or matched.is_expired(self.now)
                or not order_price_ok(own.spec, matched)):
            self._reject_match([msg.sender], own.spec.id, matched.id, M.NEGOTIATION_FAILED)
            return
        mpq = own.mpq
        if mpq is None:
            mpq = own.mpq = MatchPriorityQueue(own.spec.id, self.config.match_window)
            mpq.timer = self._schedule(self.config.match_window, self._window_closed, own.seq)
        mpq.push(MatchQueueEntry(0, matched, match_quality(own.spec, matched), msg["qty"], [msg.sender]))
        if mpq.window_closed and own.active is None:
            self.select_trader_from_queue(own)

    def on_match_withdrawn(self, msg: Message) -> None:
        """A matchmaker retracts a Match whose resident order has closed."""
        order_id, matched_id = msg["order_id"], msg["matched_id"]
        own = self.orders.get(order_id.seq) if order_id.creator == self.id else None
        if own is None or own.mpq is None or matched_id not in own.mpq:
            return
        entry = own.mpq.known(matched_id)
        if msg.sender in entry.matchmakers:
            entry.matchmakers.remove(msg.sender)
            if not entry.matchmakers:
                own.mpq.discard(matched_id)

    def _window_closed(self, order_seq: int) -> None:
        own = self.orders.get(order_seq)
        if own is None or own.mpq is None:
            return
        own.mpq.timer = None
        own.mpq.window_closed = True
        self.select_trader_from_queue(own)

    def _drop_mpq(self, own: OwnOrder) -> None:
        if own.mpq is not None and own.mpq.timer is not None:
            self.rt.cancel(own.mpq.timer)
        if own.retry_timer is not None:
            self.rt.cancel(own.retry_timer)
            own.retry_timer = None
        if own.spread_timer is not None:
            self.rt.cancel(own.spread_timer)
            own.spread_timer = None
        own.mpq = None

    def _retry_select(self, order_seq: int) -> None:
        own = self.orders.get(order_seq)
        if own is not None:
            own.retry_timer = None
            self.select_trader_from_queue(own)

    # --- phase II: negotiation -----------------------------------------------------------

    def select_trader_from_queue(self, own: OwnOrder) -> None:
        mpq = own.mpq
        while mpq is not None and mpq.window_closed and own.active is None and own.retry_timer is None:
            if self._interest(own) is not None or own.spec.remaining <= 0:
                return
            head = mpq.peek()
            if head is None:
                return
            if head.retries > 0 and self.now < own.hold_until:
                own.retry_timer = self._schedule(own.hold_until - self.now, self._retry_select, own.seq)
                return
            entry = mpq.pop()
            if self.verify_trader(own, entry):
                return

    def verify_trader(self, own: OwnOrder, entry: MatchQueueEntry) -> bool:
        """Clear the counterparty and send a proposal.  False means: try the next entry."""
        matched = entry.matched
        if matched.is_expired(self.now):
            self._reject_match(entry.matchmakers, own.spec.id, matched.id, M.NEGOTIATION_FAILED)
            return False
        if not self.clearing.admits(matched.creator, self.auditor):
            self._record("counterparty_skipped", order=order_label(own.spec.id), counterparty=_hex(matched.creator))
            self._reject_match(entry.matchmakers, own.spec.id, matched.id, M.RESPONSIBILITY_HELD)
            return False
        qty = min(own.spec.remaining, matched.unfilled)
        quote = matched.pair.quote_for(qty)
        if qty <= 0 or quote <= 0:
            self._reject_match(entry.matchmakers, own.spec.id, matched.id, M.NEGOTIATION_FAILED)
            return False
        cid = self.requests.new_cid()
        trade_id = trade_id_for(self.id, cid)
        pair = AssetPair(own.spec.pair.base, own.spec.pair.quote, qty, quote)
        proposal = Proposal(trade_id, self.id, own.seq, matched.creator, matched.order_seq, own.spec.is_offer, pair)
        own.spec.reserved_qty += qty
        own.active = trade_id
        self.trades[trade_id] = TradeState(trade_id, INITIATOR, self.id, matched.creator, own.spec.id, proposal, qty,
                                           entry=entry, started_at=self.now)
        self._record("proposal", trade=trade_id.hex(), initiator=_hex(self.id), counterparty=_hex(matched.creator),
                     qty=qty, order=order_label(own.spec.id))
        msg = self._send(matched.creator, M.TRADE_PROPOSAL, {"proposal": proposal}, cid)
        self.requests.add(R.PROPOSAL, matched.creator, msg, cid=cid, context=trade_id,
                          timeout=self.config.request_timeout, retries=self.config.request_retries,
                          on_timeout=self._initiator_request_timeout)
        return True

    def _initiator_request_timeout(self, req: R.Request) -> None:
        trade = self.trades.get(req.context)
        if trade is None or trade.phase not in (NEGOTIATING, ACCEPTED):
            return
        self._record("request_timeout", trade=trade.trade_id.hex(), kind=req.kind)
        self._negotiation_failed(trade, M.NEGOTIATION_FAILED)

    def _release(self, trade: TradeState) -> None:
        own = self.orders.get(trade.own_order.seq)
        if own is not None:
            own.spec.reserved_qty -= trade.reserved
            if trade.reserved and self._interest(own) is None:
                own.stale = True
                self._arm_spread(own)
        trade.reserved = 0

    def _abort(self, trade: TradeState, reason: str) -> None:
        if not trade.open:
            return
        trade.phase = ABORTED
        self._release(trade)
        if trade.timer is not None:
            self.rt.cancel(trade.timer)
            trade.timer = None
        self._record("abort", trade=trade.trade_id.hex(), role=trade.role, reason=reason,
                     order=order_label(trade.own_order))
        own = self.orders.get(trade.own_order.seq)
        if own is not None and own.active == trade.trade_id:
            own.active = None
        if trade.role == COUNTERPARTY and own is not None and own.active is None:
            # the reservation is gone: resume our own search
            self.select_trader_from_queue(own)

    def _negotiation_failed(self, trade: TradeState, reason: str) -> None:
        """Initiator side: give up on this counterparty and select the next one."""
        self._abort(trade, reason)
        own = self.orders.get(trade.own_order.seq)
        entry = trade.entry
        if own is None:
            return
        if own.mpq is not None and entry is not None:
            if reason == M.ASSETS_RESERVED and entry.retries < self.config.max_retries:
                own.mpq.requeue(entry)
                own.hold_until = self.now + self.config.retry_delay
            else:
                self._reject_match(entry.matchmakers, own.spec.id, entry.matched_id, reason)
        self.select_trader_from_queue(own)

    def evaluate(self, own: OwnOrder | None, proposal: Proposal) -> tuple[str, Any]:
        """Counterparty evaluation: ('accept', qty), ('negotiate', proposal) or ('reject', reason)."""
        reason = self._interest(own)
        if reason is not None:
            return "reject", reason
        spec, pair = own.spec, proposal.pair
        if (pair.pair_id != spec.pair.pair_id or proposal.initiator_is_offer == spec.is_offer
                or pair.base_qty <= 0 or pair.quote_qty != spec.pair.quote_for(pair.base_qty)):
            return "reject", M.NEGOTIATION_FAILED
        if not self.clearing.admits(proposal.initiator, self.auditor):
            return "reject", M.RESPONSIBILITY_HELD
        remaining = spec.remaining
        if remaining >= pair.base_qty:
            return "accept", pair.base_qty
        if remaining > 0:
            quote = spec.pair.quote_for(remaining)
            if quote <= 0:
                return "reject", M.NEGOTIATION_FAILED
            return "negotiate", proposal.with_pair(AssetPair(pair.base, pair.quote, remaining, quote))
        return "reject", M.ASSETS_RESERVED

    def on_trade_proposal(self, msg: Message) -> None:
        p = msg["proposal"]
        if (msg.sender != p.initiator or p.counterparty != self.id or msg.cid is None
                or p.trade_id != trade_id_for(msg.sender, msg.cid) or p.trade_id in self.trades):
            return
        own = self.orders.get(p.counterparty_order)
        self._resolve_crossed(own, p)
        verdict, value = self.evaluate(own, p)
        if verdict == "reject":
            self._reply(msg, M.TRADE_REJECT, {"proposal": p, "reason": value})
            return
        terms = p if verdict == "accept" else value
        own.spec.reserved_qty += terms.qty
        trade = TradeState(p.trade_id, COUNTERPARTY, self.id, msg.sender, own.spec.id, terms, terms.qty,
                           phase=ACCEPTED if verdict == "accept" else NEGOTIATING, started_at=self.now)
        self.trades[p.trade_id] = trade
        trade.timer = self._schedule(self.config.agreement_wait, self._counterparty_wait_expired, p.trade_id)
        if verdict == "accept":
            self._reply(msg, M.TRADE_ACCEPT, {"proposal": p})
        else:
            self._reply(msg, M.NEGOTIATE, {"proposal": terms})

    def _resolve_crossed(self, own: OwnOrder | None, p: Proposal) -> None:
        """Two peers proposing to each other for the same pair of orders: the lower key initiates.

        Otherwise each side's own proposal holds the reservation the other needs and
        both back off and collide again in lockstep.
        """
        if own is None or own.active is None or not p.initiator < self.id:
            return
        mine = self.trades.get(own.active)
        if (mine is not None and mine.role == INITIATOR and mine.phase == NEGOTIATING
                and mine.other == p.initiator and mine.proposal.counterparty_order == p.initiator_order):
            self._record("proposal_yielded", trade=mine.trade_id.hex(), to=p.trade_id.hex())
            self._abort(mine, "crossed-proposal")

    def _counterparty_wait_expired(self, trade_id: bytes) -> None:
        trade = self.trades.get(trade_id)
        if trade is not None and trade.phase in (NEGOTIATING, ACCEPTED):
            trade.timer = None
            self._abort(trade, "no-agreement")

    def on_negotiate(self, msg: Message) -> None:
        req = self.requests.resolve(msg.cid, msg.sender, (R.PROPOSAL,))
        if req is None:
            return
        trade = self.trades.get(req.context)
        if trade is None or trade.phase != NEGOTIATING:
            return
        counter = msg["proposal"]
        mine = trade.proposal
        own = self.orders.get(trade.own_order.seq)
        acceptable = (
            counter.trade_id == mine.trade_id and counter.initiator == mine.initiator
            and counter.counterparty == mine.counterparty and counter.initiator_order == mine.initiator_order
            and counter.counterparty_order == mine.counterparty_order
            and counter.initiator_is_offer == mine.initiator_is_offer
            and counter.pair.pair_id == mine.pair.pair_id
            and 0 < counter.qty <= trade.reserved
            and counter.pair.quote_qty == trade.entry.matched.pair.quote_for(counter.qty)
            and own is not None and self._interest(own) is None
        )
        if not acceptable:
            self._send(msg.sender, M.TRADE_REJECT, {"proposal": counter, "reason": M.NEGOTIATION_FAILED}, msg.cid)
            self._negotiation_failed(trade, M.NEGOTIATION_FAILED)
            return
        own.spec.reserved_qty -= trade.reserved - counter.qty
        trade.reserved = counter.qty
        trade.proposal = counter
        self._send(msg.sender, M.TRADE_ACCEPT, {"proposal": counter}, msg.cid)
        self.construct_trade_agreement(trade)

    def on_trade_accept(self, msg: Message) -> None:
        req = self.requests.resolve(msg.cid, msg.sender, (R.PROPOSAL,))
        if req is not None:
            trade = self.trades.get(req.context)
            if trade is not None and trade.phase == NEGOTIATING:
                self.construct_trade_agreement(trade)
            return
        # the initiator accepted our counter-proposal
        p = msg["proposal"]
        trade = self.trades.get(p.trade_id)
        if (trade is not None and trade.role == COUNTERPARTY and trade.other == msg.sender
                and trade.phase == NEGOTIATING and p == trade.proposal):
            trade.phase = ACCEPTED

    def on_trade_reject(self, msg: Message) -> None:
        p = msg["proposal"]
        reason = msg["reason"] if msg["reason"] in M.REASONS else M.NEGOTIATION_FAILED
        trade = self.trades.get(p.trade_id)
        if trade is None or trade.other != msg.sender:
            return
        if trade.role == INITIATOR:
            req = self.requests.resolve(msg.cid, msg.sender, (R.PROPOSAL, R.AGREEMENT))
            if req is not None and trade.phase in (NEGOTIATING, ACCEPTED):
                self._negotiation_failed(trade, reason)
        elif trade.phase in (NEGOTIATING, ACCEPTED, AGREED):
            self._abort(trade, reason)

    # --- phase III: agreement ------------------------------------------------------------------

    def construct_trade_agreement(self, trade: TradeState) -> None:
        p = trade.proposal
        n = max(1, min(self.config.incset, p.pair.base_qty, p.pair.quote_qty))
        receives = p.pair.quote if p.initiator_is_offer else p.pair.base
        agreement = AgreementPayload(
            trade.trade_id, self.id, trade.other, p.initiator_order, p.counterparty_order, p.pair,
            p.initiator_is_offer, n, self.now + self.config.publication_deadline,
            ((INITIATOR, self.receive_address(receives)), (COUNTERPARTY, None)),
        )
        trade.agreement = agreement
        trade.phase = ACCEPTED
        cid = self.requests.new_cid()
        msg = self._send(trade.other, M.PARTIAL_AGREEMENT, {"agreement": agreement}, cid)
        self.requests.add(R.AGREEMENT, trade.other, msg, cid=cid, context=trade.trade_id,
                          timeout=self.config.request_timeout, retries=self.config.request_retries,
                          on_timeout=self._initiator_request_timeout)

    def on_partial_agreement(self, msg: Message) -> None:
        a = msg["agreement"]
        if not isinstance(a, AgreementPayload):
            return
        trade = self.trades.get(a.trade_id)
        if trade is None or trade.role != COUNTERPARTY or trade.other != msg.sender:
            return
        p = trade.proposal
        receives = p.pair.base if p.initiator_is_offer else p.pair.quote
        pays = p.pair.quote if p.initiator_is_offer else p.pair.base
        initiator_wallet = a.wallet(INITIATOR)
        valid = (
            trade.phase in (NEGOTIATING, ACCEPTED)
            and a.initiator == msg.sender and a.counterparty == self.id
            and a.initiator_order == p.initiator_order and a.counterparty_order == p.counterparty_order
            and a.pair == p.pair and a.initiator_is_offer == p.initiator_is_offer
            and 1 <= a.payments_per_side <= min(p.pair.base_qty, p.pair.quote_qty)
            and a.publication_deadline > self.now
            and initiator_wallet is not None and initiator_wallet.chain_id == pays
            and a.wallet(COUNTERPARTY) is None
        )
        if not valid:
            self._reply(msg, M.TRADE_REJECT, {"proposal": p, "reason": M.NEGOTIATION_FAILED})
            self._abort(trade, M.NEGOTIATION_FAILED)
            return
        full = a.with_wallet(COUNTERPARTY, self.receive_address(receives))
        signature = self.identity.sign(full.signing_bytes())
        trade.agreement = full
        trade.phase = AGREED
        if trade.timer is not None:
            self.rt.cancel(trade.timer)
        delay = full.publication_deadline + self.config.agreement_grace - self.now
        trade.timer = self._schedule(delay, self._publication_expired, trade.trade_id)
        self._reply(msg, M.AGREEMENT, {"agreement": full, "signature": signature})

    def _publication_expired(self, trade_id: bytes) -> None:
        trade = self.trades.get(trade_id)
        if trade is not None and trade.phase == AGREED:
            trade.timer = None
            self._abort(trade, "publication-deadline")

    def on_agreement(self, msg: Message) -> None:
        req = self.requests.resolve(msg.cid, msg.sender, (R.AGREEMENT,))
        if req is None:
            return
        trade = self.trades.get(req.context)
        if trade is None or trade.phase != ACCEPTED:
            return
        a, sig = msg["agreement"], msg["signature"]
        p = trade.proposal
        pays = p.pair.base if p.initiator_is_offer else p.pair.quote
        wallet = a.wallet(COUNTERPARTY) if isinstance(a, AgreementPayload) else None
        valid = (
            wallet is not None and wallet.chain_id == pays
            and a.with_wallet(COUNTERPARTY, None) == trade.agreement
            and sig is not None and sig.signer == trade.other and sig.verify(a.signing_bytes())
        )
        if not valid:
            self._send(trade.other, M.TRADE_REJECT, {"proposal": p, "reason": M.NEGOTIATION_FAILED}, msg.cid)
            self._negotiation_failed(trade, M.NEGOTIATION_FAILED)
            return
        if self.now > a.publication_deadline:
            self._send(trade.other, M.TRADE_REJECT, {"proposal": p, "reason": M.EXPIRED}, msg.cid)
            self._negotiation_failed(trade, M.NEGOTIATION_FAILED)
            return
        if not self.clearing.may_pay(trade.other, trade.trade_id, self.auditor):
            self._send(trade.other, M.TRADE_REJECT, {"proposal": p, "reason": M.RESPONSIBILITY_HELD}, msg.cid)
            self._negotiation_failed(trade, M.RESPONSIBILITY_HELD)
            return
        trade.agreement = a
        self.publish_agreement(trade)

    def publish_agreement(self, trade: TradeState) -> None:
        a = trade.agreement
        part = self.ledger.initiate_bilateral(trade.other, a)
        self._block(part)
        trade.agreement_partition = part
        trade.phase = EXECUTING
        self._record(
            "agreement", trade=trade.trade_id.hex(), initiator=_hex(a.initiator), counterparty=_hex(a.counterparty),
            n=a.payments_per_side, initiator_total=a.side_total(a.initiator),
            counterparty_total=a.side_total(a.counterparty), qty=a.pair.base_qty,
        )
        cid = self.requests.new_cid()
        msg = self._send(trade.other, M.BLOCK_PROPOSAL, {"partition": part}, cid)
        self.requests.add(R.BLOCK, trade.other, msg, cid=cid, context=("agreement", trade.trade_id),
                          timeout=self.config.request_timeout, retries=self.config.request_retries)
        own = self.orders.get(trade.own_order.seq)
        self.send_payment(trade)
        if own is not None and own.active == trade.trade_id:
            own.active = None
            self.select_trader_from_queue(own)

    def on_block_proposal(self, msg: Message) -> None:
        part = msg["partition"]
        payload = part.payload
        trade = self.trades.get(getattr(payload, "trade_id", None))
        if (trade is None or trade.role != COUNTERPARTY or part.creator != msg.sender
                or trade.other != msg.sender or part.counterparty != self.id):
            return
        if isinstance(payload, AgreementPayload):
            if trade.phase != AGREED or payload != trade.agreement:
                return
            if part.timestamp > payload.publication_deadline or self.now > payload.publication_deadline:
                self._abort(trade, "publication-deadline")
                return
            if not self._countersign_and_reply(msg, part):
                return
            trade.agreement_partition = part
            trade.phase = EXECUTING
            if trade.timer is not None:
                self.rt.cancel(trade.timer)
                trade.timer = None
        elif isinstance(payload, TradeDonePayload):
            if trade.phase != FINALIZING or payload != trade.done_payload:
                return
            if self._countersign_and_reply(msg, part):
                trade.done_partition = part
                self._finish_trade(trade)

    def _countersign_and_reply(self, msg: Message, part: BlockPartition, external=None) -> bool:
        try:
            own, sig = self.ledger.countersign(part, external=external)
        except LedgerError as exc:
            self._record("countersign_refused", creator=_hex(part.creator), seq=part.seq, reason=str(exc))
            return False
        self._block(own)
        self._reply(msg, M.BLOCK_REPLY, {"partition": own, "countersignature": sig})
        return True

    def on_block_reply(self, msg: Message) -> None:
        req = self.requests.resolve(msg.cid, msg.sender, (R.BLOCK, R.PAYMENT))
        if req is None:
            return
        own_hash = req.message["partition"].hash
        try:
            self.ledger.accept_reply(own_hash, msg["partition"], msg["countersignature"])
        except LedgerError as exc:
            self._record("reply_refused", reason=str(exc))
            return
        tag, trade_id = req.context
        trade = self.trades.get(trade_id)
        if tag == "done" and trade is not None and trade.phase == FINALIZING:
            self._finish_trade(trade)

    # --- phase IV: payments ----------------------------------------------------------------------

    def should_pay(self, trade: TradeState) -> bool:
        """Hook for adversaries that stop paying."""
        return True

    def send_payment(self, trade: TradeState) -> None:
        if trade.phase != EXECUTING or not trade.my_turn():
            return
        if trade.is_initiator and not self.clearing.may_pay(trade.other, trade.trade_id, self.auditor):
            if trade.blocked_since is None:
                trade.blocked_since = self.now
                self._record("payment_blocked", trade=trade.trade_id.hex(), counterparty=_hex(trade.other))
            trade.timer = self._schedule(self.config.poll_interval, self._retry_payment, trade.trade_id)
            return
        trade.blocked_since = None
        if not self.should_pay(trade):
            return
        a = trade.agreement
        index = len(trade.sent) + 1
        amount = a.increment(self.id, index)
        asset = a.pay_asset(self.id)
        try:
            txid = self.wallets[asset].transfer(a.receive_wallet(trade.other), amount)
        except TransferError as exc:
            trade.transfer_attempts += 1
            if trade.transfer_attempts < self.config.transfer_attempts:
                delay = self.config.transfer_backoff * 2 ** (trade.transfer_attempts - 1)
                trade.timer = self._schedule(delay, self._retry_payment, trade.trade_id)
            else:
                self._record("payment_stalled", trade=trade.trade_id.hex(), reason=str(exc))
            return
        trade.transfer_attempts = 0
        payload = PaymentPayload(trade.trade_id, trade.agreement_ref, self.id, amount, txid, index)
        part = self.ledger.initiate_bilateral(trade.other, payload)
        self._block(part)
        trade.sent.append(part)
        self._record("payment", trade=trade.trade_id.hex(), payer=_hex(self.id), index=index, amount=amount,
                     asset=asset)
        cid = self.requests.new_cid()
        msg = self._send(trade.other, M.PAYMENT, {"partition": part}, cid)
        self.requests.add(R.PAYMENT, trade.other, msg, cid=cid, context=("payment", trade.trade_id),
                          timeout=self.config.request_timeout, retries=self.config.request_retries)
        if trade.complete() and trade.is_initiator:
            self.construct_trade_done(trade)

    def _retry_payment(self, trade_id: bytes) -> None:
        trade = self.trades.get(trade_id)
        if trade is not None:
            trade.timer = None
            self.send_payment(trade)

    def on_payment(self, msg: Message) -> None:
        part = msg["partition"]
        payload = part.payload
        if not isinstance(payload, PaymentPayload):
            return
        trade = self.trades.get(payload.trade_id)
        if trade is None or trade.phase != EXECUTING or trade.abort_flag or trade.pending_payment is not None:
            return
        other_turn = (len(trade.received) == len(trade.sent)) if trade.role == COUNTERPARTY else (
            len(trade.received) < len(trade.sent))
        if (msg.sender != trade.other or part.creator != trade.other or payload.payer != trade.other
                or part.counterparty != self.id or payload.trade_ref != trade.agreement_ref
                or payload.payment_index != len(trade.received) + 1 or not other_turn
                or not part.signature_valid()):
            self._record("payment_rejected", trade=trade.trade_id.hex(), index=payload.payment_index)
            return
        trade.pending_payment = part
        trade.pending_message = msg
        trade.pending_since = self.now
        self._check_payment(trade.trade_id)

    def _check_payment(self, trade_id: bytes) -> None:
        trade = self.trades.get(trade_id)
        if trade is None or trade.pending_payment is None:
            return
        trade.timer = None
        part = trade.pending_payment
        payload = part.payload
        a = trade.agreement
        status = self.chains.lookup(payload.external_txid)
        if not status.confirmed:
            if self.now - trade.pending_since >= self.config.payment_wait:
                self._flag(trade, "payment-unconfirmed")
                return
            trade.timer = self._schedule(self.config.poll_interval, self._check_payment, trade_id)
            return
        tx = status.tx
        expected = a.increment(trade.other, payload.payment_index)
        if (payload.amount != expected or tx.amount != payload.amount or tx.receiver != a.receive_wallet(self.id)
                or payload.external_txid.chain_id != a.pay_asset(trade.other)):
            self._flag(trade, "payment-invalid")
            return
        msg = trade.pending_message
        trade.pending_payment = None
        trade.pending_message = None
        if not self._countersign_and_reply(msg, part, external=self.chains):
            self._flag(trade, "payment-invalid")
            return
        trade.received.append(part)
        self._record("payment_verified", trade=trade.trade_id.hex(), payer=_hex(trade.other),
                     index=payload.payment_index)
        if not trade.complete():
            self.send_payment(trade)
        elif trade.is_initiator:
            self.construct_trade_done(trade)

    def _flag(self, trade: TradeState, reason: str) -> None:
        trade.abort_flag = True
        trade.pending_payment = None
        self._record("abort_flag", trade=trade.trade_id.hex(), reason=reason)
        self._abort(trade, reason)

    # --- phase V: finalisation -----------------------------------------------------------------------

    def construct_trade_done(self, trade: TradeState) -> None:
        done = TradeDonePayload(trade.trade_id, trade.agreement_ref, trade.payment_refs())
        trade.done_payload = done
        trade.phase = FINALIZING
        signature = self.identity.sign(done.signing_bytes())
        cid = self.requests.new_cid()
        msg = self._send(trade.other, M.PARTIAL_TRADE_DONE, {"done": done, "signature": signature}, cid)
        self.requests.add(R.DONE, trade.other, msg, cid=cid, context=trade.trade_id,
                          timeout=self.config.request_timeout, retries=self.config.request_retries,
                          on_timeout=self._finalization_timeout)

    def _finalization_timeout(self, req: R.Request) -> None:
        self._record("request_timeout", trade=req.context.hex(), kind=req.kind)

    def on_partial_trade_done(self, msg: Message) -> None:
        done, isig = msg["done"], msg["signature"]
        if not isinstance(done, TradeDonePayload):
            return
        trade = self.trades.get(done.trade_id)
        if (trade is None or trade.role != COUNTERPARTY or trade.other != msg.sender
                or trade.phase != EXECUTING or not trade.complete()):
            return
        if (done.trade_ref != trade.agreement_ref or done.payment_refs != trade.payment_refs()
                or isig is None or isig.signer != trade.other or not isig.verify(done.signing_bytes())):
            return
        signature = self.identity.sign(done.signing_bytes())
        trade.done_payload = done
        trade.phase = FINALIZING
        body = {"done": done, "agreement": trade.agreement, "signature": signature, "initiator_signature": isig}
        own = self.orders.get(trade.own_order.seq)
        for mm in (own.matchmakers if own is not None else ()):
            self._send(mm, M.TRADE_DONE, body)
        self._reply(msg, M.TRADE_DONE, body)

    def on_trade_done(self, msg: Message) -> None:
        req = self.requests.resolve(msg.cid, msg.sender, (R.DONE,))
        if req is None:
            self._matchmaker_trade_done(msg)
            return
        trade = self.trades.get(req.context)
        done, sig = msg["done"], msg["signature"]
        if (trade is None or trade.phase != FINALIZING or done != trade.done_payload
                or sig is None or sig.signer != trade.other or not sig.verify(done.signing_bytes())):
            return
        part = self.ledger.initiate_bilateral(trade.other, done)
        self._block(part)
        trade.done_partition = part
        cid = self.requests.new_cid()
        block = self._send(trade.other, M.BLOCK_PROPOSAL, {"partition": part}, cid)
        self.requests.add(R.BLOCK, trade.other, block, cid=cid, context=("done", trade.trade_id),
                          timeout=self.config.request_timeout, retries=self.config.request_retries)
        own = self.orders.get(trade.own_order.seq)
        body = dict(msg.body)
        for mm in (own.matchmakers if own is not None else ()):
            self._send(mm, M.TRADE_DONE, body)

    def _finish_trade(self, trade: TradeState) -> None:
        trade.phase = DONE
        if trade.timer is not None:
            self.rt.cancel(trade.timer)
            trade.timer = None
        own = self.orders.get(trade.own_order.seq)
        qty = trade.reserved
        self._record("trade_done", trade=trade.trade_id.hex(), role=trade.role, qty=qty,
                     order=order_label(trade.own_order))
        if own is None:
            return
        own.spec.reserved_qty -= qty
        own.spec.traded_qty += qty
        if own.spec.is_fulfilled and own.fulfilled_at is None:
            own.fulfilled_at = self.now
            self._drop_mpq(own)
            self._record("order_fulfilled", order=order_label(own.spec.id),
                         latency=self.now - own.spec.created_at)
        else:
            self.select_trader_from_queue(own)

    # --- introspection ----------------------------------------------------------------------------------

    def open_trades(self) -> list[TradeState]:
        return [t for t in self.trades.values() if t.open]

    def live_requests(self) -> int:
        return len(self.requests)
