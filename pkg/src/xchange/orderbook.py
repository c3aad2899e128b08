"""Orders, limit order books, matching and validation policies.

Prices are exact rationals (quote units per base unit).  An *offer* sells
``base_qty`` of the base asset for ``quote_qty`` of the quote asset; a
*request* buys ``base_qty`` of the base asset paying ``quote_qty`` of the
quote asset.  Offers rest on the ask side, requests on the bid side.
"""
from __future__ import annotations

import bisect
import copy
import functools
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, NamedTuple

from .crypto import Identity, PeerId, Signature
from .encoding import encode

logger = logging.getLogger(__name__)

REJECT_BAD_SIGNATURE = "bad-signature"
REJECT_NONPOSITIVE_QUANTITY = "nonpositive-quantity"
REJECT_EXPIRED = "expired"
REJECT_INVALID_PAIR = "invalid-pair"


class OrderBookError(Exception):
    pass


class DuplicateOrder(OrderBookError):
    pass


class OrderRejected(OrderBookError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class ConfigError(Exception):
    """Invalid configuration detected at startup."""


@dataclass(frozen=True)
class AssetPair:
    base: str
    quote: str
    base_qty: int
    quote_qty: int

    def validate(self) -> None:
        if self.base == self.quote:
            raise OrderRejected(REJECT_INVALID_PAIR)
        if self.base_qty <= 0 or self.quote_qty <= 0:
            raise OrderRejected(REJECT_NONPOSITIVE_QUANTITY)

    @functools.cached_property
    def price(self) -> Fraction:
        return Fraction(self.quote_qty, self.base_qty)

    @property
    def pair_id(self) -> tuple[str, str]:
        return (self.base, self.quote)

    @property
    def is_normalized(self) -> bool:
        return self.base < self.quote

    def flipped(self) -> "AssetPair":
        return AssetPair(self.quote, self.base, self.quote_qty, self.base_qty)

    def quote_for(self, base_units: int) -> int:
        """Quote units owed for ``base_units`` at this pair's price, rounded down."""
        return base_units * self.quote_qty // self.base_qty

    def to_wire(self) -> list:
        return [self.base, self.quote, self.base_qty, self.quote_qty]

    @classmethod
    def from_wire(cls, data) -> "AssetPair":
        base, quote, base_qty, quote_qty = data
        return cls(base, quote, base_qty, quote_qty)

    def __str__(self) -> str:
        return f"({self.base_qty} {self.base}, {self.quote_qty} {self.quote})"


class OrderId(NamedTuple):
    creator: PeerId
    seq: int

    def __str__(self) -> str:
        return f"{self.creator}:{self.seq}"

    def to_wire(self) -> list:
        return [self.creator.key, self.seq]

    @classmethod
    def from_wire(cls, data) -> "OrderId":
        creator, seq = data
        return cls(PeerId(bytes(creator)), seq)


@dataclass
class OrderSpec:
    creator: PeerId
    order_seq: int
    created_at: int
    timeout: int
    is_offer: bool
    pair: AssetPair
    traded_qty: int = 0
    reserved_qty: int = 0
    signature: Signature | None = None

    @property
    def id(self) -> OrderId:
        return OrderId(self.creator, self.order_seq)

    @property
    def price(self) -> Fraction:
        return self.pair.price

    @property
    def remaining(self) -> int:
        return self.pair.base_qty - self.traded_qty - self.reserved_qty

    @property
    def unfilled(self) -> int:
        return self.pair.base_qty - self.traded_qty

    @property
    def is_fulfilled(self) -> bool:
        return self.traded_qty >= self.pair.base_qty

    @property
    def expires_at(self) -> int:
        return self.created_at + self.timeout

    def is_expired(self, now: int) -> bool:
        return now > self.created_at + self.timeout

    def time_key(self) -> tuple:
        return (self.created_at, self.creator.key, self.order_seq)

    def signing_bytes(self) -> bytes:
        return _order_signing_bytes(self.creator.key, self.order_seq, self.created_at, self.timeout, self.is_offer,
                                    self.pair)

    def sign(self, identity: Identity) -> "OrderSpec":
        if identity.peer_id != self.creator:
            raise ValueError("only the creator can sign an order")
        self.signature = identity.sign(self.signing_bytes())
        return self

    def verify_signature(self) -> bool:
        return (
            self.signature is not None
            and self.signature.signer == self.creator
            and self.signature.verify(self.signing_bytes())
        )

    def normalized(self) -> "OrderSpec":
        """Equivalent order whose pair lists the lexicographically smaller asset first."""
        if self.pair.is_normalized:
            return self
        if self.traded_qty or self.reserved_qty:
            raise OrderBookError("cannot normalise a partially filled order")
        return replace(self, pair=self.pair.flipped(), is_offer=not self.is_offer, signature=None)

    def copy(self) -> "OrderSpec":
        return copy.copy(self)

    def to_wire(self) -> list:
        return [
            self.creator.key, self.order_seq, self.created_at, self.timeout, self.is_offer,
            self.pair.to_wire(), self.traded_qty, self.reserved_qty,
            None if self.signature is None else self.signature.to_wire(),
        ]

    @classmethod
    def from_wire(cls, data) -> "OrderSpec":
        creator, seq, created_at, timeout, is_offer, pair, traded, reserved, sig = data
        return cls(
            PeerId(bytes(creator)), seq, created_at, timeout, is_offer,
            AssetPair.from_wire(pair), traded, reserved,
            None if sig is None else Signature.from_wire(sig),
        )


@functools.lru_cache(maxsize=65536)
def _order_signing_bytes(creator: bytes, seq: int, created_at: int, timeout: int, is_offer: bool,
                         pair: AssetPair) -> bytes:
    return encode([b"order", creator, seq, created_at, timeout, is_offer, pair.to_wire()])


def order_price_ok(order: OrderSpec, other: OrderSpec) -> bool:
    """Price compatibility of an offer/request couple (symmetric)."""
    if order.is_offer == other.is_offer or order.pair.pair_id != other.pair.pair_id:
        return False
    ask, bid = (order, other) if order.is_offer else (other, order)
    return ask.price <= bid.price


# --- validation policies ---------------------------------------------------

class ValidationPolicy:
    name = "base"

    def check(self, order: OrderSpec, now: int) -> str | None:
        raise NotImplementedError


class SignaturePolicy(ValidationPolicy):
    name = "signature"

    def check(self, order, now):
        return None if order.verify_signature() else REJECT_BAD_SIGNATURE


class QuantityPolicy(ValidationPolicy):
    name = "quantity"

    def check(self, order, now):
        pair = order.pair
        if pair.base_qty <= 0 or pair.quote_qty <= 0:
            return REJECT_NONPOSITIVE_QUANTITY
        if pair.base == pair.quote:
            return REJECT_INVALID_PAIR
        return None


class ExpiryPolicy(ValidationPolicy):
    name = "expiry"

    def check(self, order, now):
        return REJECT_EXPIRED if order.is_expired(now) else None


DEFAULT_VALIDATION = (SignaturePolicy(), QuantityPolicy(), ExpiryPolicy())


@dataclass(frozen=True)
class Validation:
    accepted: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.accepted


def validate(order: OrderSpec, now: int, policies: Iterable[ValidationPolicy] = DEFAULT_VALIDATION) -> Validation:
    for policy in policies:
        reason = policy.check(order, now)
        if reason is not None:
            return Validation(False, reason)
    return Validation(True)


# --- limit order book --------------------------------------------------------

@dataclass
class PriceLevel:
    price: Fraction
    orders: list[OrderSpec] = field(default_factory=list)

    def add(self, order: OrderSpec) -> None:
        bisect.insort(self.orders, order, key=OrderSpec.time_key)

    def discard(self, order_id: OrderId) -> bool:
        for i, resident in enumerate(self.orders):
            if resident.id == order_id:
                del self.orders[i]
                return True
        return False

    def __len__(self) -> int:
        return len(self.orders)


class _Side:
    def __init__(self):
        self.levels: dict[Fraction, PriceLevel] = {}
        self.prices: list[Fraction] = []  # ascending

    def add(self, order: OrderSpec) -> None:
        price = order.price
        level = self.levels.get(price)
        if level is None:
            level = self.levels[price] = PriceLevel(price)
            bisect.insort(self.prices, price)
        level.add(order)

    def discard(self, order: OrderSpec) -> None:
        price = order.price
        level = self.levels[price]
        level.discard(order.id)
        if not level.orders:
            del self.levels[price]
            self.prices.pop(bisect.bisect_left(self.prices, price))

    def __len__(self) -> int:
        return sum(len(level) for level in self.levels.values())


class LimitOrderBook:
    """Orders for one normalised asset pair, grouped in price levels."""

    def __init__(self, pair_id: tuple[str, str]):
        self.pair_id = pair_id
        self.asks = _Side()
        self.bids = _Side()
        self.orders: dict[OrderId, OrderSpec] = {}

    def __contains__(self, order_id: OrderId) -> bool:
        return order_id in self.orders

    def __len__(self) -> int:
        return len(self.orders)

    def get(self, order_id: OrderId) -> OrderSpec | None:
        return self.orders.get(order_id)

    def insert(self, order: OrderSpec, now: int | None = None) -> None:
        if order.pair.pair_id != self.pair_id:
            raise OrderBookError(f"order pair {order.pair.pair_id} does not belong in book {self.pair_id}")
        if order.id in self.orders:
            raise DuplicateOrder(str(order.id))
        if now is not None and order.is_expired(now):
            raise OrderRejected(REJECT_EXPIRED)
        self.orders[order.id] = order
        (self.asks if order.is_offer else self.bids).add(order)

    def remove(self, order_id: OrderId) -> bool:
        """Remove a resident order; returns False (and logs) for an unknown order."""
        order = self.orders.pop(order_id, None)
        if order is None:
            logger.debug("remove of unknown order %s ignored", order_id)
            return False
        (self.asks if order.is_offer else self.bids).discard(order)
        return True

    def best_ask(self) -> Fraction | None:
        return self.asks.prices[0] if self.asks.prices else None

    def best_bid(self) -> Fraction | None:
        return self.bids.prices[-1] if self.bids.prices else None

    def iter_counter_side(self, incoming: OrderSpec):
        """Counter-side residents, best price first, oldest first within a level."""
        if incoming.is_offer:
            for price in reversed(self.bids.prices):
                if price < incoming.price:
                    break
                yield from self.bids.levels[price].orders
        else:
            for price in self.asks.prices:
                if price > incoming.price:
                    break
                yield from self.asks.levels[price].orders

    def match(self, incoming: OrderSpec, now: int | None = None) -> list[tuple[OrderSpec, int]]:
        """Price-compatible residents with their matchable quantity; the book is not mutated."""
        if incoming.pair.pair_id != self.pair_id:
            return []
        wanted = incoming.remaining
        if wanted <= 0:
            return []
        result = []
        for resident in self.iter_counter_side(incoming):
            if resident.id == incoming.id:
                continue
            if now is not None and resident.is_expired(now):
                continue
            qty = min(wanted, resident.remaining)
            if qty > 0:
                result.append((resident, qty))
        return result

    def snapshot(self) -> list[dict]:
        rows = []
        for side_name, side, prices in (
            ("ask", self.asks, self.asks.prices),
            ("bid", self.bids, list(reversed(self.bids.prices))),
        ):
            for price in prices:
                level = side.levels[price]
                rows.append({
                    "side": side_name,
                    "price": str(price),
                    "orders": [
                        {"id": f"{o.creator.hex()[:16]}:{o.order_seq}", "remaining": o.remaining}
                        for o in level.orders
                    ],
                })
        return rows

    def dump(self) -> str:
        """Human-readable text snapshot, one line per price level."""
        lines = [f"book {self.pair_id[0]}/{self.pair_id[1]}"]
        for row in self.snapshot():
            orders = " ".join(f"{o['id']}[{o['remaining']}]" for o in row["orders"])
            lines.append(f"{row['side']} {row['price']}: {orders}")
        return "\n".join(lines) + "\n"


# --- matching policies ---------------------------------------------------------

class MatchPolicy:
    name = "base"

    def match(self, order: OrderSpec, book: LimitOrderBook, now: int | None = None) -> list[tuple[OrderSpec, int]]:
        raise NotImplementedError


class PriceTimePolicy(MatchPolicy):
    """Best price first, older orders first among equal prices."""

    name = "price-time"

    def match(self, order, book, now=None):
        return book.match(order, now)


MATCH_POLICIES: dict[str, MatchPolicy] = {PriceTimePolicy.name: PriceTimePolicy()}


def register_match_policy(policy: MatchPolicy) -> None:
    MATCH_POLICIES[policy.name] = policy


def get_match_policy(policy_id: str) -> MatchPolicy:
    try:
        return MATCH_POLICIES[policy_id]
    except KeyError:
        raise ConfigError(f"unknown match policy {policy_id!r}") from None


def apply_match_policy(policy_id: str, order: OrderSpec, book: LimitOrderBook, now: int | None = None):
    return get_match_policy(policy_id).match(order, book, now)


def pair_key(base: str, quote: str) -> tuple[str, str]:
    return (base, quote) if base < quote else (quote, base)
