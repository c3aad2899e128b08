"""Canonical, length-prefixed binary encoding.

Every hashed or signed structure in the package is first reduced to a tree of
primitives (``None``, ``bool``, ``int``, ``bytes``, ``str``, ``list``/``tuple``
and ``dict``) and then serialised with :func:`encode`.  Each value is written as

    tag (1 byte) | length (4 bytes, big endian) | body

with the following tags:

    N  None         body empty
    T  True         body empty
    F  False        body empty
    I  int          two's complement, big endian, minimal length
    B  bytes        raw
    S  str          UTF-8
    L  list/tuple   concatenation of encoded items
    D  dict         concatenation of encoded (key, value) pairs, sorted by encoded key

The encoding is injective and deterministic, so equal trees always produce
equal bytes and :func:`decode` inverts :func:`encode` (tuples decode as lists).
"""
from __future__ import annotations

import hashlib
import struct
from typing import Any

_LEN = struct.Struct(">I")


class EncodingError(ValueError):
    pass


def _int_bytes(value: int) -> bytes:
    if value == 0:
        return b""
    length = (value + (value < 0)).bit_length() // 8 + 1
    return value.to_bytes(length, "big", signed=True)


def _frame(tag: bytes, body: bytes) -> bytes:
    return tag + _LEN.pack(len(body)) + body


def encode(value: Any) -> bytes:
    if value is None:
        return b"N\x00\x00\x00\x00"
    if value is True:
        return b"T\x00\x00\x00\x00"
    if value is False:
        return b"F\x00\x00\x00\x00"
    if isinstance(value, int):
        return _frame(b"I", _int_bytes(value))
    if isinstance(value, (bytes, bytearray)):
        return _frame(b"B", bytes(value))
    if isinstance(value, str):
        return _frame(b"S", value.encode("utf-8"))
    if isinstance(value, (list, tuple)):
        return _frame(b"L", b"".join(encode(item) for item in value))
    if isinstance(value, dict):
        pairs = sorted((encode(k), encode(v)) for k, v in value.items())
        return _frame(b"D", b"".join(k + v for k, v in pairs))
    to_wire = getattr(value, "to_wire", None)
    if to_wire is not None:
        return encode(to_wire())
    raise EncodingError(f"cannot encode value of type {type(value).__name__}")


def _decode_at(data: bytes, pos: int) -> tuple[Any, int]:
    if pos + 5 > len(data):
        raise EncodingError(f"truncated header at offset {pos}")
    tag = data[pos:pos + 1]
    (length,) = _LEN.unpack_from(data, pos + 1)
    start = pos + 5
    end = start + length
    if end > len(data):
        raise EncodingError(f"truncated body at offset {pos}")
    body = data[start:end]
    if tag == b"N":
        value: Any = None
    elif tag == b"T":
        value = True
    elif tag == b"F":
        value = False
    elif tag == b"I":
        value = int.from_bytes(body, "big", signed=True) if body else 0
    elif tag == b"B":
        value = bytes(body)
    elif tag == b"S":
        try:
            value = body.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise EncodingError(f"invalid utf-8 at offset {pos}") from exc
    elif tag == b"L":
        items = []
        inner = start
        while inner < end:
            item, inner = _decode_at(data, inner)
            items.append(item)
        if inner != end:
            raise EncodingError(f"list overrun at offset {pos}")
        value = items
    elif tag == b"D":
        value = {}
        inner = start
        while inner < end:
            key, inner = _decode_at(data, inner)
            item, inner = _decode_at(data, inner)
            if isinstance(key, list):
                key = tuple(key)
            value[key] = item
        if inner != end:
            raise EncodingError(f"dict overrun at offset {pos}")
    else:
        raise EncodingError(f"unknown tag {tag!r} at offset {pos}")
    return value, end


def decode(data: bytes) -> Any:
    value, end = _decode_at(data, 0)
    if end != len(data):
        raise EncodingError(f"{len(data) - end} trailing bytes")
    return value


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def hash_value(value: Any) -> bytes:
    return digest(encode(value))
