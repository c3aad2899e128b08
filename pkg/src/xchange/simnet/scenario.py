"""Scenario files: schema, defaults, validation with line context, overrides.

A scenario is a YAML mapping::

    name: two-peer
    seed: 7
    peers: 2                    # peers are numbered 1..peers
    matchmakers: [1]            # "all" (default) or a list of peer numbers
    fanout: 4
    network: {latency_min: 0.005, latency_max: 0.015, loss: 0.0}
    chains: {BTC: {confirmation_delay: 0}, ETH: {confirmation_delay: 0}}
    funding: 1000000000000000   # faucet credit per wallet and chain
    policy: {restrict: 1, incset: 1, match_window: 1.0, publication_deadline: 10.0,
             order_timeout: 3600, at_own_risk: false, sign_messages: true}
    workload: {kind: synthetic, rate: 2.0, duration: 10, base: BTC, quote: ETH,
               base_qty: 1, quote_qty: 1, unit: 100000000}
    actions:                    # chronologically ordered scripted actions
      - {at: 0.0, peer: 1, action: create_order, side: offer, base_qty: 1, quote_qty: 1}
      - {at: 5.0, peer: 1, action: cancel_order, order: 1}
    adversaries:
      - {peer: 2, profile: payment-withholder, pays_before_withholding: 0}
    drain: 20.0
    audit_view: oracle          # or gossip

Times are simulated seconds; quantities in ``workload`` and ``actions`` are
whole assets that are multiplied by ``unit`` to obtain integer base units.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields

import yaml

from ..clock import seconds
from ..orderbook import ConfigError
from ..protocol.policies import ProtocolConfig

ADVERSARY_PROFILES = ("payment-withholder", "agreement-withholder", "negotiation-staller", "biased-matchmaker")
ACTIONS = ("create_order", "cancel_order")
WORKLOADS = ("synthetic", "none")
AUDIT_VIEWS = ("oracle", "gossip")

# policy keys given in seconds, converted to microseconds for ProtocolConfig
_POLICY_SECONDS = ("match_window", "publication_deadline", "order_timeout", "request_timeout", "poll_interval",
                   "agreement_grace", "payment_wait", "retry_delay", "transfer_backoff", "redisseminate_interval")
_POLICY_PLAIN = ("restrict", "incset", "request_retries", "max_retries", "transfer_attempts", "at_own_risk",
                 "sign_messages", "match_policy")


class ScenarioError(ConfigError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        where = ""
        if source or line:
            where = f"{source or '<scenario>'}:{line}: " if line else f"{source}: "
        super().__init__(where + message)
        self.line = line


@dataclass
class NetworkSpec:
    latency_min: float = 0.005
    latency_max: float = 0.015
    loss: float = 0.0


@dataclass
class ChainSpec:
    confirmation_delay: float = 0.0


@dataclass
class WorkloadSpec:
    kind: str = "synthetic"
    rate: float = 2.0
    duration: float = 10.0
    base: str = "BTC"
    quote: str = "ETH"
    base_qty: int = 1
    quote_qty: int = 1
    unit: int = 100_000_000
    timeout: float | None = None


@dataclass
class AdversarySpec:
    peer: int
    profile: str
    params: dict = field(default_factory=dict)


@dataclass
class ActionSpec:
    at: float
    peer: int
    action: str
    params: dict = field(default_factory=dict)


@dataclass
class Scenario:
    name: str = "scenario"
    seed: int = 0
    peers: int = 2
    matchmakers: list[int] | None = None
    fanout: int = 4
    network: NetworkSpec = field(default_factory=NetworkSpec)
    chains: dict[str, ChainSpec] = field(default_factory=dict)
    funding: int = 10 ** 15
    policy: dict = field(default_factory=dict)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    actions: list[ActionSpec] = field(default_factory=list)
    adversaries: list[AdversarySpec] = field(default_factory=list)
    drain: float = 20.0
    audit_view: str = "oracle"

    @property
    def matchmaker_ids(self) -> list[int]:
        return list(range(1, self.peers + 1)) if self.matchmakers is None else list(self.matchmakers)

    @property
    def assets(self) -> list[str]:
        names = set(self.chains)
        if self.workload.kind == "synthetic":
            names.update((self.workload.base, self.workload.quote))
        for action in self.actions:
            if action.action == "create_order":
                names.update((action.params.get("base", self.workload.base),
                              action.params.get("quote", self.workload.quote)))
        return sorted(names)

    def chain_spec(self, asset: str) -> ChainSpec:
        return self.chains.get(asset, ChainSpec())

    @property
    def end_of_activity(self) -> float:
        last = max((a.at for a in self.actions), default=0.0)
        if self.workload.kind == "synthetic":
            last = max(last, self.workload.duration)
        return last

    @property
    def horizon(self) -> float:
        return self.end_of_activity + self.drain

    def protocol_config(self) -> ProtocolConfig:
        config = ProtocolConfig(fanout=self.fanout)
        for key, value in self.policy.items():
            if key in _POLICY_SECONDS:
                value = seconds(value)
            setattr(config, key, value)
        return config

    def adversary_of(self, peer: int) -> AdversarySpec | None:
        for spec in self.adversaries:
            if spec.peer == peer:
                return spec
        return None

    def to_dict(self) -> dict:
        data = asdict(self)
        data["chains"] = {k: asdict(v) for k, v in sorted(self.chains.items())}
        data["actions"] = [dict(at=a.at, peer=a.peer, action=a.action, **a.params) for a in self.actions]
        data["adversaries"] = [dict(peer=a.peer, profile=a.profile, **a.params) for a in self.adversaries]
        if self.matchmakers is None:
            data["matchmakers"] = "all"
        return data

    def with_overrides(self, seed: int | None = None, load: float | None = None,
                       policy: dict | None = None) -> "Scenario":
        out = copy.deepcopy(self)
        if seed is not None:
            out.seed = seed
        if load is not None:
            if load <= 0:
                raise ScenarioError("load must be positive")
            out.peers = max(2, int(round(load / out.workload.rate)))
            if out.matchmakers is not None:
                out.matchmakers = [m for m in out.matchmakers if m <= out.peers] or None
        if policy:
            merged = dict(out.policy)
            merged.update(policy)
            out.policy = merged
        validate_scenario(out)
        return out


# --- loading ------------------------------------------------------------------------

def _line_index(node, path=(), index=None) -> dict:
    """Map key paths to 1-based source lines using the composed YAML node tree."""
    if index is None:
        index = {}
    index[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            key = key_node.value
            index[path + (key,)] = key_node.start_mark.line + 1
            _line_index(value_node, path + (key,), index)
            index[path + (key,)] = key_node.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            _line_index(item, path + (i,), index)
    return index


class _Reader:
    def __init__(self, lines: dict, source: str | None):
        self.lines = lines
        self.source = source

    def fail(self, path: tuple, message: str):
        line = None
        probe = tuple(path)
        while probe and line is None:
            line = self.lines.get(probe)
            probe = probe[:-1]
        dotted = ".".join(str(p) for p in path) or "<root>"
        raise ScenarioError(f"{dotted}: {message}", line, self.source)

    def number(self, value, path, *, integer=False, minimum=None, exclusive=False):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(path, f"expected a number, got {value!r}")
        if integer and not (isinstance(value, int) or float(value).is_integer()):
            self.fail(path, f"expected an integer, got {value!r}")
        if isinstance(value, float) and not math.isfinite(value):
            self.fail(path, "must be finite")
        if minimum is not None and (value <= minimum if exclusive else value < minimum):
            self.fail(path, f"must be {'>' if exclusive else '>='} {minimum}")
        return int(value) if integer else value

    def mapping(self, value, path):
        if not isinstance(value, dict):
            self.fail(path, f"expected a mapping, got {type(value).__name__}")
        return value

    def known(self, mapping: dict, allowed, path):
        for key in mapping:
            if key not in allowed:
                self.fail(path + (key,), f"unknown key {key!r}")


def parse_scenario(text: str, source: str | None = None) -> Scenario:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ScenarioError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                            mark.line + 1 if mark else None, source) from exc
    if node is None or data is None:
        raise ScenarioError("empty scenario", None, source)
    reader = _Reader(_line_index(node), source)
    return _build(reader, data)


def load_scenario(path) -> Scenario:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc}", None, str(path)) from exc
    return parse_scenario(text, str(path))


def scenario_from_dict(data: dict) -> Scenario:
    return _build(_Reader({}, None), copy.deepcopy(data))


_TOP = ("name", "seed", "peers", "matchmakers", "fanout", "network", "chains", "funding", "policy", "workload",
        "actions", "adversaries", "drain", "audit_view")


def _build(r: _Reader, data) -> Scenario:
    r.mapping(data, ())
    r.known(data, _TOP, ())
    sc = Scenario()
    sc.name = str(data.get("name", sc.name))
    sc.seed = r.number(data.get("seed", 0), ("seed",), integer=True)
    sc.peers = r.number(data.get("peers", 2), ("peers",), integer=True, minimum=2)
    mm = data.get("matchmakers", "all")
    if mm == "all":
        sc.matchmakers = None
    elif isinstance(mm, list) and mm:
        ids = [r.number(v, ("matchmakers", i), integer=True, minimum=1) for i, v in enumerate(mm)]
        for i, v in enumerate(ids):
            if v > sc.peers:
                r.fail(("matchmakers", i), f"peer {v} does not exist")
        if len(set(ids)) != len(ids):
            r.fail(("matchmakers",), "duplicate matchmaker")
        sc.matchmakers = ids
    else:
        r.fail(("matchmakers",), "expected 'all' or a non-empty list of peer numbers")
    sc.fanout = r.number(data.get("fanout", 4), ("fanout",), integer=True, minimum=1)

    net = r.mapping(data.get("network", {}) or {}, ("network",))
    r.known(net, [f.name for f in fields(NetworkSpec)], ("network",))
    sc.network = NetworkSpec(**{k: r.number(v, ("network", k), minimum=0) for k, v in net.items()})
    if sc.network.latency_min > sc.network.latency_max:
        r.fail(("network", "latency_min"), "latency_min exceeds latency_max")
    if sc.network.loss > 1:
        r.fail(("network", "loss"), "loss must be a probability")

    chains = r.mapping(data.get("chains", {}) or {}, ("chains",))
    for name, spec in chains.items():
        spec = r.mapping(spec or {}, ("chains", name))
        r.known(spec, ("confirmation_delay",), ("chains", name))
        sc.chains[str(name)] = ChainSpec(r.number(spec.get("confirmation_delay", 0.0),
                                                  ("chains", name, "confirmation_delay"), minimum=0))
    sc.funding = r.number(data.get("funding", sc.funding), ("funding",), integer=True, minimum=0)

    policy = r.mapping(data.get("policy", {}) or {}, ("policy",))
    r.known(policy, _POLICY_SECONDS + _POLICY_PLAIN, ("policy",))
    for key, value in policy.items():
        path = ("policy", key)
        if key == "restrict":
            if value is None or value is False or value in ("none", "off"):
                value = None
            else:
                value = r.number(value, path, integer=True, minimum=1)
        elif key in ("incset", "request_retries", "max_retries", "transfer_attempts"):
            value = r.number(value, path, integer=True, minimum=1 if key in ("incset", "transfer_attempts") else 0)
        elif key in ("at_own_risk", "sign_messages"):
            if not isinstance(value, bool):
                r.fail(path, "expected true or false")
        elif key == "match_policy":
            value = str(value)
        else:
            value = r.number(value, path, minimum=0)
        sc.policy[key] = value

    wl = r.mapping(data.get("workload", {"kind": "none"}) or {"kind": "none"}, ("workload",))
    r.known(wl, [f.name for f in fields(WorkloadSpec)], ("workload",))
    kind = wl.get("kind", "synthetic")
    if kind not in WORKLOADS:
        r.fail(("workload", "kind"), f"unknown workload {kind!r}; expected one of {', '.join(WORKLOADS)}")
    w = WorkloadSpec(kind=kind)
    for key in ("rate", "duration"):
        if key in wl:
            setattr(w, key, r.number(wl[key], ("workload", key), minimum=0, exclusive=True))
    for key in ("base_qty", "quote_qty", "unit"):
        if key in wl:
            setattr(w, key, r.number(wl[key], ("workload", key), integer=True, minimum=1))
    for key in ("base", "quote"):
        if key in wl:
            setattr(w, key, str(wl[key]))
    if wl.get("timeout") is not None:
        w.timeout = r.number(wl["timeout"], ("workload", "timeout"), minimum=0, exclusive=True)
    if w.base == w.quote:
        r.fail(("workload", "quote"), "base and quote assets must differ")
    sc.workload = w

    actions = data.get("actions", []) or []
    if not isinstance(actions, list):
        r.fail(("actions",), "expected a list")
    previous = 0.0
    for i, item in enumerate(actions):
        path = ("actions", i)
        item = dict(r.mapping(item, path))
        at = r.number(item.pop("at", None), path + ("at",), minimum=0)
        if at < previous:
            r.fail(path + ("at",), "actions must be chronologically ordered")
        previous = at
        peer = r.number(item.pop("peer", None), path + ("peer",), integer=True, minimum=1)
        if peer > sc.peers:
            r.fail(path + ("peer",), f"peer {peer} does not exist")
        action = item.pop("action", None)
        if action not in ACTIONS:
            r.fail(path + ("action",), f"unknown action {action!r}; expected one of {', '.join(ACTIONS)}")
        if action == "create_order":
            r.known(item, ("side", "base", "quote", "base_qty", "quote_qty", "timeout"), path)
            if item.get("side") not in ("offer", "request"):
                r.fail(path + ("side",), "side must be 'offer' or 'request'")
            for key in ("base_qty", "quote_qty"):
                if key in item:
                    item[key] = r.number(item[key], path + (key,), integer=True, minimum=1)
            if "timeout" in item:
                item["timeout"] = r.number(item["timeout"], path + ("timeout",), minimum=0, exclusive=True)
            if item.get("base", w.base) == item.get("quote", w.quote):
                r.fail(path, "base and quote assets must differ")
        else:
            r.known(item, ("order",), path)
            item["order"] = r.number(item.get("order"), path + ("order",), integer=True, minimum=1)
        sc.actions.append(ActionSpec(at, peer, action, item))

    adversaries = data.get("adversaries", []) or []
    if not isinstance(adversaries, list):
        r.fail(("adversaries",), "expected a list")
    seen = set()
    for i, item in enumerate(adversaries):
        path = ("adversaries", i)
        item = dict(r.mapping(item, path))
        peer = r.number(item.pop("peer", None), path + ("peer",), integer=True, minimum=1)
        if peer > sc.peers:
            r.fail(path + ("peer",), f"peer {peer} does not exist")
        if peer in seen:
            r.fail(path + ("peer",), f"peer {peer} already has an adversary profile")
        seen.add(peer)
        profile = item.pop("profile", None)
        if profile not in ADVERSARY_PROFILES:
            r.fail(path + ("profile",), f"unknown adversary profile {profile!r}")
        if profile == "payment-withholder":
            r.known(item, ("pays_before_withholding",), path)
            if "pays_before_withholding" in item:
                item["pays_before_withholding"] = r.number(item["pays_before_withholding"],
                                                           path + ("pays_before_withholding",), integer=True, minimum=0)
        elif profile == "biased-matchmaker":
            r.known(item, ("favoured",), path)
            favoured = item.get("favoured", [])
            if not isinstance(favoured, list):
                r.fail(path + ("favoured",), "expected a list of peer numbers")
            item["favoured"] = [r.number(v, path + ("favoured", j), integer=True, minimum=1)
                                for j, v in enumerate(favoured)]
            if peer not in sc.matchmaker_ids:
                r.fail(path + ("peer",), "a biased matchmaker must be a matchmaker")
        else:
            r.known(item, (), path)
        sc.adversaries.append(AdversarySpec(peer, profile, item))

    sc.drain = r.number(data.get("drain", sc.drain), ("drain",), minimum=0)
    view = data.get("audit_view", "oracle")
    if view not in AUDIT_VIEWS:
        r.fail(("audit_view",), f"unknown audit view {view!r}")
    sc.audit_view = view
    try:
        validate_scenario(sc)
    except ScenarioError as exc:
        raise ScenarioError(str(exc), None, r.source) from None
    return sc


def validate_scenario(sc: Scenario) -> None:
    if sc.peers < 2:
        raise ScenarioError("a scenario needs at least two peers")
    if sc.workload.kind == "synthetic" and (sc.workload.rate <= 0 or sc.workload.duration <= 0):
        raise ScenarioError("workload rate and duration must be positive")
    try:
        sc.protocol_config().validate()
    except ConfigError as exc:
        raise ScenarioError(f"policy: {exc}") from None


def parse_policy_override(text: str) -> dict:
    """Parse ``restrict=<t>`` / ``incset=<n>`` command-line overrides."""
    key, sep, value = text.partition("=")
    key = key.strip().lower()
    if not sep:
        raise ScenarioError(f"policy override {text!r} must look like key=value")
    value = value.strip().lower()
    if key == "restrict":
        if value in ("none", "off", "false"):
            return {"restrict": None}
        if not value.isdigit() or int(value) < 1:
            raise ScenarioError(f"restrict threshold must be a positive integer or 'none', got {value!r}")
        return {"restrict": int(value)}
    if key == "incset":
        if not value.isdigit() or int(value) < 1:
            raise ScenarioError(f"incset must be a positive integer, got {value!r}")
        return {"incset": int(value)}
    raise ScenarioError(f"unknown policy override {key!r}; expected restrict or incset")
