"""Protocol configuration plus dissemination and clearing policies."""
from __future__ import annotations

from dataclasses import dataclass

from ..clock import SECOND, seconds
from ..crypto import PeerId
from ..ledger import COUNTERPARTY, ExternalChainQuery, LedgerStore, audit_responsibilities, responsible_trades
from ..orderbook import ConfigError


@dataclass
class ProtocolConfig:
    """Per-peer protocol settings.  Durations are simulated microseconds."""

    restrict: int | None = 1
    incset: int = 1
    match_window: int = 1 * SECOND
    publication_deadline: int = 10 * SECOND
    order_timeout: int = 3600 * SECOND
    request_timeout: int = 1 * SECOND
    request_retries: int = 2
    poll_interval: int = seconds(0.05)
    agreement_grace: int = 2 * SECOND
    payment_wait: int = 10 * SECOND
    retry_delay: int = seconds(0.2)
    max_retries: int = 10
    transfer_attempts: int = 3
    transfer_backoff: int = 1 * SECOND
    fanout: int = 4
    redisseminate_interval: int = 2 * SECOND
    at_own_risk: bool = False
    sign_messages: bool = True
    match_policy: str = "price-time"

    def validate(self) -> None:
        if self.restrict is not None and self.restrict < 1:
            raise ConfigError("restrict threshold must be at least 1")
        if self.incset < 1:
            raise ConfigError("incset must be at least 1")
        if self.fanout < 1:
            raise ConfigError("fanout must be at least 1")
        for name in ("match_window", "publication_deadline", "order_timeout", "request_timeout",
                     "poll_interval", "agreement_grace", "transfer_backoff", "payment_wait", "retry_delay",
                     "max_retries", "redisseminate_interval"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.order_timeout == 0 or self.request_timeout == 0 or self.poll_interval == 0:
            raise ConfigError("timeouts and poll interval must be positive")

    @property
    def agreement_wait(self) -> int:
        """How long an accepting counterparty waits for the partial agreement."""
        return self.request_timeout * (self.request_retries + 2)


class Auditor:
    """Responsibility queries over a ledger view and the external chains."""

    def __init__(self, store: LedgerStore, external: ExternalChainQuery):
        self.store = store
        self.external = external

    def responsibilities(self, subject: PeerId, exclude: bytes | None = None) -> int:
        return audit_responsibilities(subject, self.store, self.external, exclude)

    def unreciprocated(self, subject: PeerId, exclude: bytes | None = None) -> list[bytes]:
        """Trades in which ``subject`` received an increment it has not paid back."""
        return responsible_trades(subject, self.store, self.external, exclude, role=COUNTERPARTY)


class ClearingPolicy:
    name = "none"

    def admits(self, subject: PeerId, auditor: Auditor) -> bool:
        """Whether to engage in a new trade with ``subject``."""
        return True

    def may_pay(self, counterparty: PeerId, trade_id: bytes, auditor: Auditor) -> bool:
        """Whether an initiator may pay its next increment to ``counterparty``."""
        return True


class Restrict(ClearingPolicy):
    """RESTRICT(t): refuse counterparties responsible in t or more ongoing trades.

    Before each initiator payment the guard also refuses to pay a counterparty
    that currently holds unreciprocated assets in any other trade.  Checking
    and paying happen in the same event, which keeps an adversary from
    collecting unreciprocated increments in two trades at once.
    """

    def __init__(self, threshold: int = 1):
        if threshold < 1:
            raise ConfigError("restrict threshold must be at least 1")
        self.threshold = threshold
        self.name = f"restrict({threshold})"

    def admits(self, subject, auditor):
        return auditor.responsibilities(subject) < self.threshold

    def may_pay(self, counterparty, trade_id, auditor):
        return not auditor.unreciprocated(counterparty, exclude=trade_id)


def clearing_policy(config: ProtocolConfig) -> ClearingPolicy:
    if config.restrict is None or config.at_own_risk:
        return ClearingPolicy()
    return Restrict(config.restrict)


class DisseminationPolicy:
    """Fanout dissemination to a fixed subset of matchmakers.

    An order that stays idle can later be sent to further matchmakers, taken
    in order from ``fallback``.
    """

    def __init__(self, matchmakers: list[PeerId], fanout: int, fallback: list[PeerId] = ()):
        self.matchmakers = list(matchmakers)
        self.fanout = fanout
        self.fallback = list(fallback)

    def targets(self) -> list[PeerId]:
        return self.matchmakers[: self.fanout]

    def more_targets(self, used: list[PeerId]) -> list[PeerId]:
        return [m for m in self.fallback if m not in used][: self.fanout]
