"""Peer identities and Ed25519 signatures."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

KEY_SIZE = 32
HASH_SIZE = 32
GENESIS_HASH = bytes(HASH_SIZE)


@dataclass(frozen=True, order=True)
class PeerId:
    """Raw Ed25519 public key; ordering is lexicographic on the key bytes."""

    key: bytes

    def __post_init__(self):
        if len(self.key) != KEY_SIZE:
            raise ValueError(f"peer id must be {KEY_SIZE} bytes, got {len(self.key)}")

    def __str__(self) -> str:
        return self.key.hex()[:8]

    def __repr__(self) -> str:
        return f"PeerId({self.key.hex()[:8]})"

    def hex(self) -> str:
        return self.key.hex()

    def to_wire(self) -> bytes:
        return self.key

    @classmethod
    def from_wire(cls, data: bytes) -> "PeerId":
        return cls(bytes(data))


@lru_cache(maxsize=1 << 17)
def _public_key(key: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(key)


@lru_cache(maxsize=1 << 18)
def _verify(key: bytes, signature: bytes, data: bytes) -> bool:
    try:
        _public_key(key).verify(signature, data)
    except (InvalidSignature, ValueError):
        return False
    return True


@dataclass(frozen=True)
class Signature:
    signer: PeerId
    value: bytes

    def verify(self, data: bytes) -> bool:
        return _verify(self.signer.key, self.value, data)

    def to_wire(self) -> list:
        return [self.signer.key, self.value]

    @classmethod
    def from_wire(cls, data) -> "Signature":
        key, value = data
        return cls(PeerId(bytes(key)), bytes(value))


class Identity:
    """A key pair.  ``from_seed`` derives keys deterministically for simulations."""

    def __init__(self, private_key: Ed25519PrivateKey):
        self._private_key = private_key
        raw = private_key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        self.peer_id = PeerId(raw)

    @classmethod
    def generate(cls) -> "Identity":
        return cls(Ed25519PrivateKey.generate())

    @classmethod
    def from_seed(cls, seed: bytes | str) -> "Identity":
        if isinstance(seed, str):
            seed = seed.encode("utf-8")
        return cls(Ed25519PrivateKey.from_private_bytes(hashlib.sha256(seed).digest()))

    def sign(self, data: bytes) -> Signature:
        return Signature(self.peer_id, self._private_key.sign(data))

    def __repr__(self) -> str:
        return f"Identity({self.peer_id})"
