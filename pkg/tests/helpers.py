"""Builders shared by the tests: identities, funded wallets and hand-made trades."""
from __future__ import annotations

from dataclasses import dataclass, field

from xchange.assets import ChainRegistry, MockChain, Wallet, WalletAddress
from xchange.crypto import Identity
from xchange.ledger import (
    COUNTERPARTY, INITIATOR, AgreementPayload, BlockPartition, BlockRef, Ledger, LedgerStore, PaymentPayload,
    TradeDonePayload,
)
from xchange.orderbook import AssetPair, OrderSpec

UNIT = 100_000_000


def identity(name: str) -> Identity:
    return Identity.from_seed(f"test-{name}")


def order(ident: Identity, seq: int, is_offer: bool, base_qty=1, quote_qty=1, created_at=0, timeout=10**9,
          base="BTC", quote="ETH", sign=True) -> OrderSpec:
    spec = OrderSpec(ident.peer_id, seq, created_at, timeout, is_offer, AssetPair(base, quote, base_qty, quote_qty))
    return spec.sign(ident) if sign else spec


class Clock:
    def __init__(self):
        self.t = 0

    def __call__(self) -> int:
        return self.t


@dataclass
class Party:
    name: str
    ident: Identity
    ledger: Ledger
    wallets: dict[str, Wallet]

    @property
    def id(self):
        return self.ident.peer_id


@dataclass
class Trade:
    agreement: AgreementPayload
    partition: BlockPartition
    initiator: Party
    counterparty: Party
    payments: list[BlockPartition] = field(default_factory=list)
    done: BlockPartition | None = None

    @property
    def ref(self) -> BlockRef:
        return self.partition.ref


class Market:
    """Two mock chains, a shared ledger view and helpers to script trades by hand."""

    def __init__(self, confirmation_delay: int = 0, funding: int = 1000 * UNIT):
        self.clock = Clock()
        self.chains = ChainRegistry([MockChain("BTC", self.clock, confirmation_delay),
                                     MockChain("ETH", self.clock, confirmation_delay)])
        self.union = LedgerStore()
        self.funding = funding
        self.parties: dict[str, Party] = {}
        self._trades = 0

    def party(self, name: str) -> Party:
        if name in self.parties:
            return self.parties[name]
        ident = identity(name)
        wallets = {}
        for asset in ("BTC", "ETH"):
            chain = self.chains[asset]
            wallet = Wallet(chain, WalletAddress.derive(asset, ident.peer_id.key))
            chain.faucet(wallet.address, self.funding)
            wallets[asset] = wallet
        party = Party(name, ident, Ledger(ident, LedgerStore(), clock=self.clock, mirror=self.union), wallets)
        self.parties[name] = party
        return party

    def agree(self, initiator: Party, counterparty: Party, n: int = 1, base_qty: int = 2 * UNIT,
              quote_qty: int = 3 * UNIT, initiator_is_offer: bool = True, deadline: int = 10**12) -> Trade:
        self._trades += 1
        pair = AssetPair("BTC", "ETH", base_qty, quote_qty)
        i_gets, c_gets = ("ETH", "BTC") if initiator_is_offer else ("BTC", "ETH")
        agreement = AgreementPayload(
            self._trades.to_bytes(16, "big"), initiator.id, counterparty.id, 1, 1, pair, initiator_is_offer, n,
            deadline, ((INITIATOR, initiator.wallets[i_gets].address),
                       (COUNTERPARTY, counterparty.wallets[c_gets].address)),
        )
        part = self._bilateral(initiator, counterparty, agreement)
        return Trade(agreement, part, initiator, counterparty)

    def _bilateral(self, creator: Party, other: Party, payload) -> BlockPartition:
        part = creator.ledger.initiate_bilateral(other.id, payload)
        reply, sig = other.ledger.countersign(part, external=self.chains)
        return creator.ledger.accept_reply(part.hash, reply, sig)

    def pay(self, trade: Trade, payer: Party, index: int, amount: int | None = None,
            countersign: bool = True) -> BlockPartition:
        a = trade.agreement
        other = trade.counterparty if payer is trade.initiator else trade.initiator
        amount = a.increment(payer.id, index) if amount is None else amount
        txid = payer.wallets[a.pay_asset(payer.id)].transfer(a.receive_wallet(other.id), amount)
        payload = PaymentPayload(a.trade_id, trade.ref, payer.id, amount, txid, index)
        if countersign:
            part = self._bilateral(payer, other, payload)
        else:
            part = payer.ledger.initiate_bilateral(other.id, payload)
        trade.payments.append(part)
        return part

    def pay_prefix(self, trade: Trade, k: int) -> None:
        """Make the first ``k`` scheduled payments."""
        by_id = {trade.initiator.id: trade.initiator, trade.counterparty.id: trade.counterparty}
        for payer, index in trade.agreement.schedule()[:k]:
            self.pay(trade, by_id[payer], index)

    def finish(self, trade: Trade) -> BlockPartition:
        payload = TradeDonePayload(trade.agreement.trade_id, trade.ref, tuple(p.ref for p in trade.payments))
        trade.done = self._bilateral(trade.initiator, trade.counterparty, payload)
        return trade.done


def schedule_walker(n: int, paid: int, initiator, counterparty):
    """Reference: who owes the next payment after ``paid`` alternating payments, initiator first."""
    if paid >= 2 * n:
        return None
    return initiator if paid % 2 == 0 else counterparty
