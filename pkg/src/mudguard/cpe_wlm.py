"""Lightweight whitelist monitor/enforcer running on the CPE.

It owns only P2P and LAN-internal rules, kept per device. Upstream
packets it permits get the pass mark, which the CPE then resets to 0 so
the VNF ignores them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable

from .alerts import Alert
from .errors import NxDomain, ResolverFailure
from .dns import ResolverView
from .mud import AclEntry, Direction
from .net import Packet, PASS_MARK

log = logging.getLogger(__name__)

PERMIT = "permit"
BLOCK = "block"


@dataclass(frozen=True)
class LocalRule:
    """A peer the device may talk to. ``port`` is on the device side when
    ``port_side == "device"`` and on the peer side otherwise."""

    peer_domain: str | None = None
    peer_ip: str | None = None
    peer_mac: str | None = None
    port: int | None = None
    protocol: int | None = None
    port_side: str = "device"

    @classmethod
    def from_entry(cls, entry: AclEntry) -> LocalRule:
        side = "device" if entry.direction is Direction.CLOUD_TO_DEVICE else "peer"
        return cls(entry.dns_name, entry.ip_literal, None, entry.dst_port, entry.protocol, side)


class LocalAgent:
    def __init__(
        self,
        cpe,
        resolver: ResolverView,
        *,
        bypass_suffixes: Iterable[str] = (),
        alert_only: bool = False,
        sink: Callable[[Alert], None] | None = None,
        customer_id: str | None = None,
    ):
        self.cpe = cpe
        self.resolver = resolver
        self.bypass_suffixes = tuple(bypass_suffixes)
        self.alert_only = alert_only
        self.sink = sink
        self.customer_id = customer_id or cpe.cpe_id
        self.enabled = True
        self.whitelist: dict[str, set[LocalRule]] = {}
        self.alerts: list[Alert] = []
        self.decisions: list[tuple[tuple, str]] = []
        cpe.local_agent = self

    def install_rules(self, mac: str, rules: Iterable[LocalRule]) -> None:
        self.whitelist.setdefault(mac.lower(), set()).update(rules)

    def install_entries(self, mac: str, entries: Iterable[AclEntry]) -> None:
        self.install_rules(mac, (LocalRule.from_entry(e) for e in entries))

    def _addresses(self, domain: str) -> frozenset[str]:
        bypass = any(domain == s or domain.endswith("." + s) for s in self.bypass_suffixes)
        try:
            return self.resolver.resolve(domain, bypass_cache=bypass)
        except (NxDomain, ResolverFailure):
            return frozenset()

    def _peer_addresses(self, mac: str) -> set[str]:
        addrs = set()
        for rule in self.whitelist.get(mac, ()):
            if rule.peer_domain:
                addrs |= self._addresses(rule.peer_domain)
            elif rule.peer_ip:
                addrs.add(rule.peer_ip)
        return addrs

    def _rule_matches(self, rule: LocalRule, peer_ip, peer_mac, device_port, peer_port, protocol) -> bool:
        if rule.protocol is not None and rule.protocol != protocol:
            return False
        if rule.port is not None:
            if rule.port != (device_port if rule.port_side == "device" else peer_port):
                return False
        if rule.peer_mac is not None:
            return peer_mac == rule.peer_mac
        if rule.peer_ip is not None:
            return peer_ip == rule.peer_ip
        if rule.peer_domain is not None:
            return peer_ip in self._addresses(rule.peer_domain)
        return True

    def _allows(self, mac, peer_ip, peer_mac, device_port, peer_port, protocol) -> bool:
        return any(
            self._rule_matches(r, peer_ip, peer_mac, device_port, peer_port, protocol)
            for r in self.whitelist.get(mac, ())
        )

    def _decide(self, p: Packet, decision: str | None, mac: str | None) -> str | None:
        if decision is None:
            return None
        self.decisions.append((tuple(p.key), decision))
        if decision == BLOCK:
            alert = Alert(p.ts, self.customer_id, mac, None, p.key, "local_violation")
            self.alerts.append(alert)
            if self.sink:
                self.sink(alert)
            if self.alert_only:
                return None
        return decision

    def check_local(self, p: Packet) -> str | None:
        """Judge a LAN-originated packet. None means "not ours to judge"."""
        if not self.enabled:
            return None
        src = p.src_mac
        if self.cpe.is_lan(p.dst_ip):
            dst_host = self.cpe.host_by_ip(p.dst_ip)
            dst = dst_host.mac if dst_host else None
            src_prot, dst_prot = src in self.whitelist, dst in self.whitelist
            if not (src_prot or dst_prot):
                return None
            ok = (src_prot and self._allows(src, p.dst_ip, dst, p.src_port, p.dst_port, p.protocol)) or (
                dst_prot and self._allows(dst, p.src_ip, src, p.dst_port, p.src_port, p.protocol)
            )
            return self._decide(p, PERMIT if ok else BLOCK, dst if dst_prot else src)
        if src not in self.whitelist or p.dst_ip not in self._peer_addresses(src):
            return None
        ok = self._allows(src, p.dst_ip, None, p.src_port, p.dst_port, p.protocol)
        return self._decide(p, PERMIT if ok else BLOCK, src)

    def check_inbound(self, p: Packet, mac: str, forwarded: bool = False) -> str | None:
        """Judge a WAN packet already rewritten to its LAN destination."""
        if not self.enabled or mac not in self.whitelist:
            return None
        if p.src_ip in self._peer_addresses(mac):
            ok = self._allows(mac, p.src_ip, None, p.dst_port, p.src_port, p.protocol)
            return self._decide(p, PERMIT if ok else BLOCK, mac)
        if forwarded:
            return self._decide(p, BLOCK, mac)
        return None


def check_local(agent: LocalAgent, p: Packet) -> str | None:
    return agent.check_local(p)


def reset_dscp_on_match(p: Packet, reset_value: int) -> Packet:
    """Two-step upstream handling of a permitted packet: pass mark, then reset."""
    marked = p.with_(dscp=PASS_MARK)
    return marked.with_(dscp=0) if reset_value == PASS_MARK else marked
