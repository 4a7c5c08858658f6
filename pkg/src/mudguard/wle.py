"""Whitelist enforcement at the on-path border router."""

from __future__ import annotations

import ipaddress
import itertools
import json
import threading
from dataclasses import dataclass, field
from typing import Callable

from .net import ConnKey, Packet


@dataclass(frozen=True)
class ConnectionScope:
    key: ConnKey
    bidirectional: bool = True

    def matches(self, k: ConnKey) -> bool:
        return k == self.key or (self.bidirectional and k == self.key.reverse())

    def params(self) -> dict:
        return {"conn": list(self.key), "bidirectional": self.bidirectional}


@dataclass(frozen=True)
class AggregateScope:
    network: ipaddress.IPv4Network
    direction: str = "both"  # to | from | both

    def __post_init__(self):
        if self.direction not in ("to", "from", "both"):
            raise ValueError(f"bad direction {self.direction!r}")

    @classmethod
    def of(cls, cidr: str, direction: str = "both") -> AggregateScope:
        return cls(ipaddress.IPv4Network(cidr, strict=False), direction)

    def matches(self, k: ConnKey) -> bool:
        net = self.network
        if self.direction in ("to", "both") and ipaddress.IPv4Address(k.dst_ip) in net:
            return True
        if self.direction in ("from", "both") and ipaddress.IPv4Address(k.src_ip) in net:
            return True
        return False

    def params(self) -> dict:
        return {"network": str(self.network), "direction": self.direction}


Scope = ConnectionScope | AggregateScope


@dataclass(frozen=True)
class AclRequest:
    scope: Scope
    requester: str = "control_plane"
    reason: str = ""


@dataclass(eq=False)
class AclRule:
    rule_id: int
    scope: Scope
    installed_at: int
    hit_counter: int = 0
    last_hit: int = 0

    def export(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "scope": "connection" if isinstance(self.scope, ConnectionScope) else "aggregate",
            "params": self.scope.params(),
            "installed_at": self.installed_at,
            "hits": self.hit_counter,
        }


@dataclass(frozen=True)
class Delivered:
    packet: Packet


@dataclass(frozen=True)
class Blocked:
    rule_id: int


class BorderRouter:
    """Forwards live traffic, mirrors monitored outbound packets, applies ACLs.

    Mirroring happens before ACL evaluation, so copies of blocked packets
    still reach the monitor. Device marks are internal to the ISP, so with
    ``clear_dscp`` set outbound packets leave with DSCP 0.
    """

    def __init__(self, clock: Callable[[], int] = lambda: 0, idle_expiry: int | None = None):
        self.clock = clock
        self.idle_expiry = idle_expiry
        self.acls: list[AclRule] = []  # most recent first
        self._by_scope: dict[Scope, AclRule] = {}
        self.mirror_targets: list[Callable[[Packet], None]] = []
        self.monitored: set[str] = set()
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self.enforce = True
        self.clear_dscp = True
        self.mirrored = 0

    def apply_acl(self, req: AclRequest) -> AclRule:
        with self._lock:
            rule = self._by_scope.get(req.scope)
            if rule is not None:
                return rule
            rule = AclRule(next(self._ids), req.scope, self.clock(), last_hit=self.clock())
            self._by_scope[req.scope] = rule
            self.acls = [rule] + self.acls
        return rule

    def remove_acl(self, rule_id: int) -> bool:
        with self._lock:
            for rule in self.acls:
                if rule.rule_id == rule_id:
                    del self._by_scope[rule.scope]
                    self.acls = [r for r in self.acls if r is not rule]
                    return True
        return False

    def expire_idle(self) -> list[int]:
        if self.idle_expiry is None:
            return []
        now = self.clock()
        stale = [r.rule_id for r in self.acls if now - r.last_hit > self.idle_expiry]
        for rule_id in stale:
            self.remove_acl(rule_id)
        return stale

    def forward(self, p: Packet, outbound: bool = True) -> Delivered | Blocked:
        if outbound and p.src_ip in self.monitored:
            self.mirrored += 1
            for target in self.mirror_targets:
                target(p)
        if self.enforce:
            k = p.key
            for rule in self.acls:  # snapshot: list is replaced, never mutated
                if rule.scope.matches(k):
                    rule.hit_counter += 1
                    rule.last_hit = self.clock()
                    return Blocked(rule.rule_id)
        if outbound and self.clear_dscp and p.dscp:
            p = p.with_(dscp=0)
        return Delivered(p)

    def export(self) -> list[dict]:
        return [r.export() for r in sorted(self.acls, key=lambda r: r.rule_id)]

    def export_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.export())
