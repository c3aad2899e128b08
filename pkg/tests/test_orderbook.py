from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from helpers import identity, order
from reference import NaiveBook, run_book_sequence
from xchange.orderbook import (
    REJECT_BAD_SIGNATURE, REJECT_EXPIRED, REJECT_INVALID_PAIR, REJECT_NONPOSITIVE_QUANTITY, AssetPair,
    ConfigError, DuplicateOrder, LimitOrderBook, OrderBookError, OrderRejected, OrderSpec, apply_match_policy,
    get_match_policy, order_price_ok, pair_key, validate,
)

ALICE, BOB, CAROL = identity("alice"), identity("bob"), identity("carol")
PAIR = ("BTC", "ETH")


def test_price_is_exact_fraction():
    o = order(ALICE, 1, True, base_qty=3, quote_qty=7)
    assert o.price == Fraction(7, 3)
    assert o.remaining == 3 and o.unfilled == 3 and not o.is_fulfilled


def test_validation_reasons():
    good = order(ALICE, 1, True)
    assert validate(good, now=0)
    unsigned = order(ALICE, 2, True, sign=False)
    assert validate(unsigned, 0).reason == REJECT_BAD_SIGNATURE
    zero = order(ALICE, 3, True, base_qty=0)
    assert validate(zero, 0).reason == REJECT_NONPOSITIVE_QUANTITY
    same = order(ALICE, 4, True, base="BTC", quote="BTC")
    assert validate(same, 0).reason == REJECT_INVALID_PAIR
    old = order(ALICE, 5, True, created_at=0, timeout=10)
    assert validate(old, 10)
    assert validate(old, 11).reason == REJECT_EXPIRED


def test_signature_binds_every_field():
    o = order(ALICE, 1, True, base_qty=2, quote_qty=3)
    assert o.verify_signature()
    tampered = OrderSpec(o.creator, o.order_seq, o.created_at, o.timeout, o.is_offer,
                         AssetPair("BTC", "ETH", 2, 4), signature=o.signature)
    assert not tampered.verify_signature()
    stolen = OrderSpec(BOB.peer_id, 1, o.created_at, o.timeout, o.is_offer, o.pair, signature=o.signature)
    assert not stolen.verify_signature()
    with pytest.raises(ValueError):
        o.sign(BOB)


def test_wire_roundtrip():
    o = order(ALICE, 9, False, base_qty=5, quote_qty=11, created_at=42, timeout=99)
    o.traded_qty, o.reserved_qty = 1, 2
    back = OrderSpec.from_wire(o.to_wire())
    assert back == o and back.verify_signature()


def test_normalized_flips_side_and_pair():
    o = order(ALICE, 1, True, base="ETH", quote="BTC", base_qty=4, quote_qty=2, sign=False)
    n = o.normalized()
    assert n.pair.pair_id == ("BTC", "ETH") and not n.is_offer
    assert (n.pair.base_qty, n.pair.quote_qty) == (2, 4)
    assert pair_key("ETH", "BTC") == ("BTC", "ETH")
    o.traded_qty = 1
    with pytest.raises(OrderBookError):
        o.normalized()


def test_price_compatibility_is_symmetric():
    ask = order(ALICE, 1, True, base_qty=1, quote_qty=5)
    bid = order(BOB, 1, False, base_qty=1, quote_qty=6)
    assert order_price_ok(ask, bid) and order_price_ok(bid, ask)
    cheap_bid = order(BOB, 2, False, base_qty=1, quote_qty=4)
    assert not order_price_ok(ask, cheap_bid) and not order_price_ok(cheap_bid, ask)
    assert not order_price_ok(ask, order(CAROL, 1, True, quote_qty=5))


def test_duplicate_and_wrong_pair_rejected():
    book = LimitOrderBook(PAIR)
    o = order(ALICE, 1, True)
    book.insert(o)
    with pytest.raises(DuplicateOrder):
        book.insert(o)
    with pytest.raises(OrderBookError):
        book.insert(order(ALICE, 2, True, base="BTC", quote="XMR"))
    with pytest.raises(OrderRejected) as info:
        book.insert(order(ALICE, 3, True, created_at=0, timeout=5), now=6)
    assert info.value.reason == REJECT_EXPIRED
    assert len(book) == 1 and o.id in book


def test_price_time_priority():
    book = LimitOrderBook(PAIR)
    late_cheap = order(ALICE, 1, True, base_qty=1, quote_qty=2, created_at=5)
    early_cheap = order(BOB, 1, True, base_qty=1, quote_qty=2, created_at=1)
    dear = order(CAROL, 1, True, base_qty=1, quote_qty=3, created_at=0)
    too_dear = order(CAROL, 2, True, base_qty=1, quote_qty=9, created_at=0)
    for o in (late_cheap, dear, early_cheap, too_dear):
        book.insert(o)
    bid = order(CAROL, 3, False, base_qty=1, quote_qty=4)
    assert [r.id for r, _ in book.match(bid)] == [early_cheap.id, late_cheap.id, dear.id]
    assert book.best_ask() == 2 and book.best_bid() is None


def test_match_quantities_respect_reservations():
    book = LimitOrderBook(PAIR)
    resident = order(ALICE, 1, True, base_qty=5, quote_qty=5)
    book.insert(resident)
    bid = order(BOB, 1, False, base_qty=3, quote_qty=3)
    assert [(r.id, q) for r, q in book.match(bid)] == [(resident.id, 3)]
    resident.reserved_qty = 4
    assert [q for _, q in book.match(bid)] == [1]
    resident.traded_qty = 1
    assert book.match(bid) == []
    bid.reserved_qty = 3
    resident.reserved_qty = 0
    assert book.match(bid) == []


def test_match_skips_expired_residents_and_self():
    book = LimitOrderBook(PAIR)
    stale = order(ALICE, 1, True, created_at=0, timeout=5)
    book.insert(stale)
    bid = order(BOB, 1, False, quote_qty=2)
    assert book.match(bid, now=5) and not book.match(bid, now=6)
    assert book.match(stale) == []


def test_remove_and_dump():
    book = LimitOrderBook(PAIR)
    a, b = order(ALICE, 1, True, quote_qty=2), order(BOB, 1, False, quote_qty=1)
    book.insert(a)
    book.insert(b)
    text = book.dump()
    assert text.startswith("book BTC/ETH") and "ask 2:" in text and "bid 1:" in text
    assert book.remove(a.id) and not book.remove(a.id)
    assert len(book) == 1 and book.best_ask() is None


def test_match_policy_registry():
    book = LimitOrderBook(PAIR)
    book.insert(order(ALICE, 1, True))
    assert apply_match_policy("price-time", order(BOB, 1, False), book)
    assert get_match_policy("price-time").name == "price-time"
    with pytest.raises(ConfigError):
        get_match_policy("pro-rata")


def test_naive_model_on_fixed_seeds():
    for seed in range(25):
        run_book_sequence(seed)


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=2**32), st.integers(min_value=1, max_value=60))
def test_naive_model_property(seed, ops):
    run_book_sequence(seed, max_ops=ops)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(1, 4), st.integers(1, 8), st.integers(0, 20)),
                min_size=1, max_size=30),
       st.tuples(st.booleans(), st.integers(1, 4), st.integers(1, 8)))
def test_every_reported_match_is_price_compatible(residents, incoming):
    book, model = LimitOrderBook(PAIR), NaiveBook(PAIR)
    for seq, (is_offer, b, q, t) in enumerate(residents):
        o = order(ALICE, seq, is_offer, base_qty=b, quote_qty=q, created_at=t, sign=False)
        book.insert(o)
        model.insert(o)
    is_offer, b, q = incoming
    inc = order(BOB, 0, is_offer, base_qty=b, quote_qty=q, sign=False)
    got = book.match(inc)
    for resident, qty in got:
        assert order_price_ok(inc, resident)
        assert 0 < qty <= min(inc.remaining, resident.remaining)
    assert [(r.id, q) for r, q in got] == [(r.id, q) for r, q in model.match(inc)]
