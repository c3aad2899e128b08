"""Request stores: outstanding requests keyed by correlation id."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Any, Callable

from ..crypto import PeerId

logger = logging.getLogger(__name__)

PROPOSAL = "proposal"
AGREEMENT = "agreement"
BLOCK = "block"
PAYMENT = "payment"
DONE = "done"


@dataclass
class Request:
    cid: bytes
    kind: str
    peer: PeerId
    message: Any
    context: Any = None
    timeout: int | None = None
    retries_left: int = 0
    on_timeout: Callable[["Request"], None] | None = None
    timer: Any = None
    attempts: int = 1
    meta: dict = field(default_factory=dict)


class RequestStore:
    """Tracks requests until a response arrives or the final timeout fires.

    ``resend`` retransmits a request; ``schedule``/``cancel`` come from the
    runtime.  A timeout fires exactly once per armed timer and the request is
    deleted when retries are exhausted.
    """

    def __init__(self, owner: PeerId, schedule, cancel, resend):
        self.owner = owner
        self._schedule = schedule
        self._cancel = cancel
        self._resend = resend
        self._counter = 0
        self.live: dict[bytes, Request] = {}

    def __len__(self) -> int:
        return len(self.live)

    def new_cid(self) -> bytes:
        self._counter += 1
        return hashlib.sha256(self.owner.key + self._counter.to_bytes(8, "big")).digest()[:12]

    def add(self, kind: str, peer: PeerId, message, *, cid: bytes, context=None, timeout: int | None = None,
            retries: int = 0, on_timeout=None) -> Request:
        req = Request(cid, kind, peer, message, context, timeout, retries, on_timeout)
        self.live[cid] = req
        self._arm(req)
        return req

    def _arm(self, req: Request) -> None:
        if req.timeout is not None:
            req.timer = self._schedule(req.timeout, self._expire, req.cid)

    def _expire(self, cid: bytes) -> None:
        req = self.live.get(cid)
        if req is None:
            return
        req.timer = None
        if req.retries_left > 0:
            req.retries_left -= 1
            req.attempts += 1
            logger.debug("%s retransmits %s %s", self.owner, req.kind, cid.hex()[:6])
            self._resend(req)
            self._arm(req)
            return
        del self.live[cid]
        if req.on_timeout is not None:
            req.on_timeout(req)

    def resolve(self, cid: bytes | None, sender: PeerId, kinds: tuple[str, ...] = ()) -> Request | None:
        """Remove and return the request answered by a response, or None to discard it."""
        if cid is None:
            return None
        req = self.live.get(cid)
        if req is None or req.peer != sender or (kinds and req.kind not in kinds):
            return None
        del self.live[cid]
        if req.timer is not None:
            self._cancel(req.timer)
            req.timer = None
        return req

    def peek(self, cid: bytes | None) -> Request | None:
        return None if cid is None else self.live.get(cid)

    def drop(self, cid: bytes) -> None:
        req = self.live.pop(cid, None)
        if req is not None and req.timer is not None:
            self._cancel(req.timer)

    def by_kind(self, kind: str) -> list[Request]:
        return [r for r in self.live.values() if r.kind == kind]
