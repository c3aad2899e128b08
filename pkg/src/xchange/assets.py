"""Wallets and mock external blockchains.

A :class:`MockChain` stands in for a settlement platform such as Bitcoin.  A
transfer is escrowed from the sender when submitted and credited to the
receiver once the chain's fixed confirmation delay has elapsed, so at every
instant ``sum(balances) + sum(pending) == sum(faucet credits)``.
"""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass
from typing import Callable, Iterable

from .encoding import encode, hash_value


class TransferError(Exception):
    pass


class InsufficientFunds(TransferError):
    pass


class SetupClosed(Exception):
    pass


@dataclass(frozen=True, order=True)
class WalletAddress:
    chain_id: str
    address: bytes

    @classmethod
    def derive(cls, chain_id: str, owner: bytes) -> "WalletAddress":
        return cls(chain_id, hashlib.sha256(b"wallet:" + chain_id.encode() + b":" + owner).digest()[:20])

    def to_wire(self) -> list:
        return [self.chain_id, self.address]

    @classmethod
    def from_wire(cls, data) -> "WalletAddress":
        chain_id, address = data
        return cls(chain_id, bytes(address))

    def __str__(self) -> str:
        return f"{self.chain_id}:{self.address.hex()[:10]}"


@dataclass(frozen=True, order=True)
class ExternalTxId:
    chain_id: str
    txid: bytes

    def to_wire(self) -> list:
        return [self.chain_id, self.txid]

    @classmethod
    def from_wire(cls, data) -> "ExternalTxId":
        chain_id, txid = data
        return cls(chain_id, bytes(txid))

    def __str__(self) -> str:
        return f"{self.chain_id}:{self.txid.hex()[:12]}"


@dataclass
class ExternalTx:
    txid: bytes
    chain_id: str
    sender: WalletAddress
    receiver: WalletAddress
    amount: int
    submitted_at: int
    confirmed_at: int | None = None

    def record(self) -> dict:
        return {
            "txid": self.txid.hex(),
            "chain": self.chain_id,
            "from": self.sender.address.hex(),
            "to": self.receiver.address.hex(),
            "amount": self.amount,
            "submitted_at": self.submitted_at,
            "confirmed_at": self.confirmed_at,
        }


class TxStatus(enum.Enum):
    UNKNOWN = "unknown"
    PENDING = "pending"
    CONFIRMED = "confirmed"


@dataclass(frozen=True)
class Lookup:
    status: TxStatus
    tx: ExternalTx | None = None

    @property
    def confirmed(self) -> bool:
        return self.status is TxStatus.CONFIRMED


class MockChain:
    def __init__(self, chain_id: str, clock: Callable[[], int], confirmation_delay: int = 0):
        if confirmation_delay < 0:
            raise ValueError("confirmation delay must be non-negative")
        self.chain_id = chain_id
        self.clock = clock
        self.confirmation_delay = confirmation_delay
        self.balances: dict[WalletAddress, int] = {}
        self.log: list[ExternalTx] = []
        self.txs: dict[bytes, ExternalTx] = {}
        self.credits: dict[WalletAddress, list[ExternalTx]] = {}
        self.minted = 0
        self.setup_open = True
        self._pending: list[ExternalTx] = []

    # -- bookkeeping --------------------------------------------------------

    def _settle(self) -> None:
        if not self._pending:
            return
        now = self.clock()
        still = []
        for tx in self._pending:
            if tx.submitted_at + self.confirmation_delay <= now:
                tx.confirmed_at = tx.submitted_at + self.confirmation_delay
                self.balances[tx.receiver] = self.balances.get(tx.receiver, 0) + tx.amount
                self.credits.setdefault(tx.receiver, []).append(tx)
            else:
                still.append(tx)
        self._pending = still

    def pending_total(self) -> int:
        self._settle()
        return sum(tx.amount for tx in self._pending)

    def close_setup(self) -> None:
        self.setup_open = False

    # -- operations ----------------------------------------------------------

    def faucet(self, address: WalletAddress, amount: int) -> None:
        if not self.setup_open:
            raise SetupClosed("faucet is only available during simulation setup")
        if amount <= 0:
            raise ValueError("faucet amount must be positive")
        self.balances[address] = self.balances.get(address, 0) + amount
        self.minted += amount

    def balance(self, address: WalletAddress) -> int:
        self._settle()
        return self.balances.get(address, 0)

    def transfer(self, sender: WalletAddress, receiver: WalletAddress, amount: int) -> bytes:
        self._settle()
        if sender.chain_id != self.chain_id or receiver.chain_id != self.chain_id:
            raise TransferError("wallet belongs to a different chain")
        if amount <= 0:
            raise TransferError("transfer amount must be positive")
        if self.balances.get(sender, 0) < amount:
            raise InsufficientFunds(f"{sender} holds {self.balances.get(sender, 0)}, needs {amount}")
        now = self.clock()
        txid = hash_value([self.chain_id, sender.to_wire(), receiver.to_wire(), amount, now, len(self.log)])
        tx = ExternalTx(txid, self.chain_id, sender, receiver, amount, now)
        self.balances[sender] -= amount
        self.log.append(tx)
        self.txs[txid] = tx
        self._pending.append(tx)
        self._settle()
        return txid

    def lookup(self, txid: bytes) -> Lookup:
        self._settle()
        tx = self.txs.get(txid)
        if tx is None:
            return Lookup(TxStatus.UNKNOWN)
        if tx.confirmed_at is None:
            return Lookup(TxStatus.PENDING, tx)
        return Lookup(TxStatus.CONFIRMED, tx)

    def incoming(self, address: WalletAddress) -> list[ExternalTx]:
        self._settle()
        return self.credits.get(address, [])

    def export_log(self) -> str:
        self._settle()
        return "".join(json.dumps(tx.record(), sort_keys=True) + "\n" for tx in self.log)

    def canonical_log(self) -> bytes:
        return encode([[tx.txid, tx.amount, tx.submitted_at, tx.confirmed_at] for tx in self.log])


class ChainRegistry:
    """Full-node style access to every mock chain, keyed by chain id."""

    def __init__(self, chains: Iterable[MockChain] = ()):
        self.chains: dict[str, MockChain] = {}
        for chain in chains:
            self.add(chain)

    def add(self, chain: MockChain) -> MockChain:
        self.chains[chain.chain_id] = chain
        return chain

    def __getitem__(self, chain_id: str) -> MockChain:
        return self.chains[chain_id]

    def __contains__(self, chain_id: str) -> bool:
        return chain_id in self.chains

    def lookup(self, txid: ExternalTxId) -> Lookup:
        chain = self.chains.get(txid.chain_id)
        if chain is None:
            return Lookup(TxStatus.UNKNOWN)
        return chain.lookup(txid.txid)

    def close_setup(self) -> None:
        for chain in self.chains.values():
            chain.close_setup()


class Wallet:
    """One address on one chain, with a poll cursor over confirmed credits."""

    def __init__(self, chain: MockChain, address: WalletAddress):
        self.chain = chain
        self.address = address
        self._cursor = 0

    @property
    def chain_id(self) -> str:
        return self.chain.chain_id

    def balance(self) -> int:
        return self.chain.balance(self.address)

    def transfer(self, receiver: WalletAddress, amount: int) -> ExternalTxId:
        return ExternalTxId(self.chain.chain_id, self.chain.transfer(self.address, receiver, amount))

    def poll_incoming(self) -> list[ExternalTx]:
        """Confirmed credits since the previous poll; each credit is returned once."""
        credits = self.chain.incoming(self.address)
        fresh = credits[self._cursor:]
        self._cursor = len(credits)
        return list(fresh)
