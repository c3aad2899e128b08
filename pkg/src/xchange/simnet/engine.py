"""Deterministic discrete-event loop with simulated message transport.

Events fire in ``(fire_at, seq)`` order, where ``seq`` is assigned when the
event is scheduled.  Messages travel over per-link FIFO channels: a message
never overtakes an earlier one on the same (sender, receiver) link.
"""
from __future__ import annotations

import hashlib
import heapq
import json
import logging
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from ..crypto import PeerId

logger = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    """A logic error inside the simulation, such as scheduling in the past."""


@dataclass
class LatencyModel:
    """Uniform per-hop delay in ``[min_delay, max_delay]`` microseconds plus independent loss."""

    min_delay: int = 5_000
    max_delay: int = 15_000
    loss: float = 0.0

    def __post_init__(self):
        if not 0 <= self.min_delay <= self.max_delay:
            raise ValueError("latency bounds must satisfy 0 <= min <= max")
        if not 0.0 <= self.loss <= 1.0:
            raise ValueError("loss probability must lie in [0, 1]")

    def sample(self, rng: random.Random) -> int | None:
        """Delay for one transmission, or None when the message is lost."""
        if self.loss and rng.random() < self.loss:
            return None
        return rng.randint(self.min_delay, self.max_delay)


@dataclass
class Timer:
    owner: PeerId | None
    fire_at: int
    callback: Callable
    args: tuple
    cancelled: bool = False
    fired: bool = False


@dataclass
class Delivery:
    sender: PeerId
    receiver: PeerId
    message: Any
    digest: str


@dataclass(order=True)
class SimEvent:
    fire_at: int
    seq: int
    kind: str = field(compare=False)
    payload: Any = field(compare=False)


class Trace:
    """Ordered event records with a running hash over their canonical JSON lines.

    With ``full=False`` records only reach the listeners: nothing is kept or
    hashed and message digests are omitted, which is what metric-only sweeps use.
    """

    def __init__(self, keep: bool = True, listeners: Iterable[Callable[[dict], None]] = (), full: bool = True):
        self.full = full
        self.keep = keep and full
        self.records: list[dict] = []
        self.listeners = list(listeners)
        self._hash = hashlib.sha256()
        self.count = 0

    @staticmethod
    def line(record: dict) -> str:
        return json.dumps(record, sort_keys=True, separators=(",", ":"))

    def emit(self, record: dict) -> None:
        self.count += 1
        if self.full:
            self._hash.update(self.line(record).encode())
            self._hash.update(b"\n")
        if self.keep:
            self.records.append(record)
        for listener in self.listeners:
            listener(record)

    def hexdigest(self) -> str:
        return self._hash.hexdigest() if self.full else ""

    def dumps(self) -> str:
        return "".join(self.line(r) + "\n" for r in self.records)


def _label(peer: PeerId) -> str:
    return peer.hex()[:16]


def message_digest(message) -> str:
    cached = getattr(message, "_digest", None)
    if cached is None:
        cached = message.digest()
        try:
            message._digest = cached
        except AttributeError:
            pass
    return cached


class Simulator:
    """Virtual clock, event queue and the runtime interface used by peers."""

    def __init__(self, latency: LatencyModel | None = None, rng: random.Random | None = None,
                 trace: Trace | None = None):
        self.latency = latency or LatencyModel()
        self.rng = rng or random.Random(0)
        self.trace = trace or Trace()
        self.time = 0
        self._seq = 0
        self._queue: list[tuple[int, int, SimEvent]] = []
        self._link_tail: dict[tuple[PeerId, PeerId], int] = {}
        self.peers: dict[PeerId, Any] = {}
        self.live_timers = 0
        self.in_flight = 0
        self.processed = 0

    # --- runtime interface -------------------------------------------------------

    def now(self) -> int:
        return self.time

    def record(self, record_type: str, /, **fields) -> None:
        fields["t"] = self.time
        fields["type"] = record_type
        self.trace.emit(fields)

    def _push(self, fire_at: int, kind: str, payload) -> SimEvent:
        if fire_at < self.time:
            raise SimulationError(f"cannot schedule at {fire_at}, clock is at {self.time}")
        self._seq += 1
        event = SimEvent(fire_at, self._seq, kind, payload)
        heapq.heappush(self._queue, (fire_at, self._seq, event))
        return event

    def schedule(self, owner: PeerId | None, delay: int, callback: Callable, *args) -> Timer:
        if delay < 0:
            raise SimulationError(f"negative timer delay {delay}")
        return self.schedule_at(owner, self.time + delay, callback, *args)

    def schedule_at(self, owner: PeerId | None, fire_at: int, callback: Callable, *args) -> Timer:
        timer = Timer(owner, fire_at, callback, args)
        self._push(fire_at, "timer", timer)
        self.live_timers += 1
        return timer

    def cancel(self, timer: Timer | None) -> None:
        if timer is not None and not timer.cancelled and not timer.fired:
            timer.cancelled = True
            self.live_timers -= 1

    def send(self, sender: PeerId, receiver: PeerId, message) -> None:
        digest = message_digest(message) if self.trace.full else None
        self.record("send", src=_label(sender), dst=_label(receiver), kind=message.kind, msg=digest)
        if receiver not in self.peers:
            self.record("drop", src=_label(sender), dst=_label(receiver), kind=message.kind, msg=digest,
                        reason="unknown-peer")
            return
        delay = self.latency.sample(self.rng)
        if delay is None:
            self.record("drop", src=_label(sender), dst=_label(receiver), kind=message.kind, msg=digest,
                        reason="loss")
            return
        link = (sender, receiver)
        fire_at = max(self.time + delay, self._link_tail.get(link, 0))
        self._link_tail[link] = fire_at
        self.in_flight += 1
        self._push(fire_at, "deliver", Delivery(sender, receiver, message, digest))

    # --- loop --------------------------------------------------------------------------

    def add_peer(self, peer) -> None:
        self.peers[peer.id] = peer

    def pending(self) -> int:
        return len(self._queue)

    def step(self) -> bool:
        if not self._queue:
            return False
        event = heapq.heappop(self._queue)[2]
        if event.fire_at < self.time:
            raise SimulationError("event queue went backwards")
        if event.kind == "timer":
            timer = event.payload
            if timer.cancelled:
                return True
            self.time = event.fire_at
            timer.fired = True
            self.live_timers -= 1
            timer.callback(*timer.args)
        else:
            self.time = event.fire_at
            delivery = event.payload
            self.in_flight -= 1
            self.record("deliver", src=_label(delivery.sender), dst=_label(delivery.receiver),
                        kind=delivery.message.kind, msg=delivery.digest)
            self.peers[delivery.receiver].deliver(delivery.message)
        self.processed += 1
        return True

    def run(self, until: int | None = None) -> int:
        """Process events up to and including time ``until`` (all events when None)."""
        processed = 0
        while self._queue:
            if until is not None and self._queue[0][0] > until:
                break
            if self.step():
                processed += 1
        if until is not None and until > self.time:
            self.time = until
        return processed
