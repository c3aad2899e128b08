"""Adversarial peer behaviours.

Each profile is a :class:`Peer` subclass that overrides a few of its own
outgoing decisions.  None of them can forge signatures or touch another
peer's state.
"""
from __future__ import annotations

from ..orderbook import ConfigError, OrderSpec
from ..protocol import messages as M
from ..protocol.peer import Peer
from ..protocol.trade import TradeState


class PaymentWithholder(Peer):
    """Accepts incoming payments but stops paying after ``pays_before_withholding`` increments per trade."""

    profile = "payment-withholder"

    def __init__(self, *args, pays_before_withholding: int = 0, **kwargs):
        super().__init__(*args, **kwargs)
        self.pays_before_withholding = pays_before_withholding
        self.withheld: set[bytes] = set()

    def should_pay(self, trade: TradeState) -> bool:
        if len(trade.sent) >= self.pays_before_withholding:
            if trade.trade_id not in self.withheld:
                self.withheld.add(trade.trade_id)
                self._record("withhold", trade=trade.trade_id.hex())
            return False
        return True


class AgreementWithholder(Peer):
    """Never lets an agreement reach the ledger.

    As initiator it keeps the dual-signed agreement to itself; as
    counterparty it never returns its signature.
    """

    profile = "agreement-withholder"

    def publish_agreement(self, trade: TradeState) -> None:
        self._record("withhold", trade=trade.trade_id.hex())

    def on_partial_agreement(self, msg) -> None:
        a = msg["agreement"]
        self._record("withhold", trade=getattr(a, "trade_id", b"").hex())


class NegotiationStaller(Peer):
    """Goes silent once a negotiation starts and never initiates trades itself."""

    profile = "negotiation-staller"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        for kind in (M.TRADE_PROPOSAL, M.NEGOTIATE, M.PARTIAL_AGREEMENT, M.MATCH):
            self.handlers[kind] = self._ignore

    def _ignore(self, msg) -> None:
        self._record("stall", kind=msg.kind, sender=msg.sender.hex()[:16])


class BiasedMatchmaker(Peer):
    """Only reports matches whose resident order was created by a favoured peer."""

    profile = "biased-matchmaker"

    def __init__(self, *args, favoured=(), **kwargs):
        super().__init__(*args, **kwargs)
        self.favoured = set(favoured)
        self.favoured.add(self.id)

    def reports_match(self, incoming: OrderSpec, resident: OrderSpec) -> bool:
        return resident.creator in self.favoured


PROFILES = {cls.profile: cls for cls in (PaymentWithholder, AgreementWithholder, NegotiationStaller, BiasedMatchmaker)}


def adversary_class(profile: str) -> type[Peer]:
    try:
        return PROFILES[profile]
    except KeyError:
        raise ConfigError(f"unknown adversary profile {profile!r}; expected one of {', '.join(PROFILES)}") from None
