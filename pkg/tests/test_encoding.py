import pytest
from hypothesis import given, strategies as st

from xchange.clock import SECOND, seconds, to_seconds
from xchange.crypto import GENESIS_HASH, Identity, PeerId
from xchange.encoding import EncodingError, decode, digest, encode, hash_value

primitives = st.none() | st.booleans() | st.integers() | st.binary(max_size=40) | st.text(max_size=20)
trees = st.recursive(primitives, lambda inner: st.lists(inner, max_size=5), max_leaves=25)


@given(trees)
def test_roundtrip(value):
    assert decode(encode(value)) == value


@given(trees, trees)
def test_injective(a, b):
    if a != b:
        assert encode(a) != encode(b)


@given(st.dictionaries(st.text(max_size=8), st.integers(), max_size=6))
def test_dict_encoding_ignores_insertion_order(d):
    reversed_d = dict(reversed(list(d.items())))
    assert encode(d) == encode(reversed_d)
    assert decode(encode(d)) == d


def test_bool_and_int_are_distinct():
    assert encode(True) != encode(1)
    assert encode(0) != encode(False)
    assert encode(0) != encode(None)


def test_tuple_decodes_as_list():
    assert decode(encode((1, b"x"))) == [1, b"x"]


@pytest.mark.parametrize("bad", [b"", b"Z\x00\x00\x00\x00", b"I\x00\x00\x00\x05ab", encode(1) + b"\x00"])
def test_decode_rejects_garbage(bad):
    with pytest.raises(EncodingError):
        decode(bad)


def test_unsupported_type():
    with pytest.raises(EncodingError):
        encode(1.5)


def test_hash_helpers():
    assert len(digest(b"abc")) == 32
    assert hash_value([1, 2]) == digest(encode([1, 2]))


def test_signatures():
    alice, bob = Identity.from_seed("alice"), Identity.from_seed("bob")
    sig = alice.sign(b"hello")
    assert sig.signer == alice.peer_id
    assert sig.verify(b"hello")
    assert not sig.verify(b"hellO")
    forged = type(sig)(bob.peer_id, sig.value)
    assert not forged.verify(b"hello")


def test_identity_from_seed_is_deterministic():
    assert Identity.from_seed("x").peer_id == Identity.from_seed("x").peer_id
    assert Identity.from_seed("x").peer_id != Identity.from_seed("y").peer_id


def test_peer_id_size():
    with pytest.raises(ValueError):
        PeerId(b"short")
    assert len(GENESIS_HASH) == 32


def test_clock_units():
    assert seconds(1.5) == 3 * SECOND // 2
    assert to_seconds(seconds(0.25)) == 0.25
