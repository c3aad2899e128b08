"""Trading protocol: messages, match priority queues, request stores and the peer engine."""

from .messages import Message, Proposal
from .mpq import MatchPriorityQueue, MatchQueueEntry, match_quality
from .peer import OwnOrder, Peer, Runtime
from .policies import Auditor, ClearingPolicy, DisseminationPolicy, ProtocolConfig, Restrict, clearing_policy
from .requests import RequestStore
from .trade import TradeState, trade_id_for

__all__ = [
    "Message", "Proposal", "MatchPriorityQueue", "MatchQueueEntry", "match_quality", "OwnOrder", "Peer",
    "Runtime", "Auditor", "ClearingPolicy", "DisseminationPolicy", "ProtocolConfig", "Restrict",
    "clearing_policy", "RequestStore", "TradeState", "trade_id_for",
]
