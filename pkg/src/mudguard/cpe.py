"""Home gateway (CPE) simulation and the TR-069-style configuration surface.

The parameter tree is a flat ``path -> value`` map with names borrowed from
the TR-098/TR-181 data models::

    WANIPConnection.ExternalIPAddress
    WANIPConnection.PortMapping.{i}.ExternalPort | InternalClient | InternalPort | Protocol
    Hosts.HostNumberOfEntries
    Hosts.Host.{i}.PhysAddress | HostName | InterfaceType | IPAddress | Active | DHCPOption161
    QueueManagement.Classification.{i}.SourceMACAddress | DSCPMark
    QueueManagement.DefaultDSCPMark
    QueueManagement.X_PassMarkReset
    QueueManagement.X_SelfDSCPMark
    LANHostConfigManagement.DNSServers

DSCP-valued parameters use -1 for "disabled / leave unchanged".
"""

from __future__ import annotations

import enum
import heapq
import itertools
import logging
import re
from dataclasses import dataclass, field
from typing import Callable

from .errors import ConfigUnreachable, CpeError, NatExhausted, UnknownMac, UnknownPath
from .net import COMMON_DSCP, DEFAULT_MARK, NO_CHANGE, PASS_MARK, ConnKey, Packet, PayloadKind

log = logging.getLogger(__name__)

EXTERNAL_IP = "WANIPConnection.ExternalIPAddress"
HOST_COUNT = "Hosts.HostNumberOfEntries"
DEFAULT_DSCP = "QueueManagement.DefaultDSCPMark"
PASS_MARK_RESET = "QueueManagement.X_PassMarkReset"
SELF_DSCP = "QueueManagement.X_SelfDSCPMark"
DNS_SERVERS = "LANHostConfigManagement.DNSServers"
CLASSIFICATION = "QueueManagement.Classification."

NAT_PORT_BASE = 40000
NAT_PORT_LIMIT = 65535

_CLASS_PARAM = re.compile(r"^QueueManagement\.Classification\.(\d+)\.(SourceMACAddress|DSCPMark)$")
_WRITABLE = {DEFAULT_DSCP, PASS_MARK_RESET, SELF_DSCP, DNS_SERVERS}


class Medium(str, enum.Enum):
    WIRED = "wired"
    WIRELESS = "wireless"


@dataclass
class HostRecord:
    mac: str
    hostname: str
    medium: Medium
    ip: str
    instance: int
    mud_url: str | None = None
    active: bool = True
    first_seen: int = 0


@dataclass(frozen=True)
class Notification:
    cpe_id: str
    path: str
    value: object
    ts: int


@dataclass(frozen=True)
class Dropped:
    reason: str


class Cpe:
    def __init__(
        self,
        cpe_id: str,
        external_ip: str,
        *,
        lan_prefix: str = "192.168.1.",
        clock: Callable[[], int] = lambda: 0,
        default_mark_window: int | None = None,
    ):
        self.cpe_id = cpe_id
        self.lan_prefix = lan_prefix
        self.lan_ip = lan_prefix + "1"
        self.clock = clock
        self.default_mark_window = default_mark_window
        self.hosts: dict[str, HostRecord] = {}
        self.marking_rules: dict[str, int] = {}
        self._class_mac: dict[int, str] = {}
        self._class_ids = itertools.count(1)
        self.nat_out: dict[ConnKey, ConnKey] = {}
        self.nat_in: dict[ConnKey, ConnKey] = {}
        self.forwarded: set[ConnKey] = set()
        self._next_port = NAT_PORT_BASE
        self.port_forwards: dict[tuple[int, int], tuple[str, int]] = {}
        self.params: dict[str, list] = {}
        self.subscribers: list[Callable[[Notification], None]] = []
        self.local_agent = None
        self.external_ip = external_ip
        self._reset_params()

    def _reset_params(self) -> None:
        self.params = {
            EXTERNAL_IP: [self.external_ip, False],
            HOST_COUNT: [len(self.hosts), False],
            DEFAULT_DSCP: [NO_CHANGE, False],
            PASS_MARK_RESET: [NO_CHANGE, False],
            SELF_DSCP: [NO_CHANGE, False],
            DNS_SERVERS: [self.lan_ip, False],
        }
        for h in self.hosts.values():
            self._host_params(h)
        for ext_port, proto in self.port_forwards:
            self._forward_params(ext_port, proto)

    # -- parameter surface -------------------------------------------------

    @property
    def default_mark_enabled(self) -> bool:
        return self.params[DEFAULT_DSCP][0] != NO_CHANGE

    @property
    def dns_direct(self) -> bool:
        return self.params[DNS_SERVERS][0] != self.lan_ip

    @property
    def pass_mark_reset(self) -> int:
        return self.params[PASS_MARK_RESET][0]

    def subscribe(self, callback: Callable[[Notification], None]) -> None:
        self.subscribers.append(callback)

    def get_param(self, path: str):
        try:
            return self.params[path][0]
        except KeyError:
            raise UnknownPath(path) from None

    def set_notification(self, path: str, active: bool = True) -> None:
        if path not in self.params:
            raise UnknownPath(path)
        self.params[path][1] = active

    def notification_flag(self, path: str) -> bool:
        if path not in self.params:
            raise UnknownPath(path)
        return self.params[path][1]

    def _store(self, path: str, value, cause: str) -> None:
        entry = self.params.setdefault(path, [None, False])
        changed = entry[0] != value
        entry[0] = value
        if changed and cause != "acs" and entry[1]:
            note = Notification(self.cpe_id, path, value, self.clock())
            for cb in list(self.subscribers):
                cb(note)

    def set_param(self, path: str, value, cause: str = "acs") -> None:
        """Write a parameter. ``cause`` other than "acs" may trigger a notification."""
        m = _CLASS_PARAM.match(path)
        if m:
            self._set_classification(int(m.group(1)), m.group(2), value, path)
        elif path in _WRITABLE:
            if path in (DEFAULT_DSCP, PASS_MARK_RESET, SELF_DSCP):
                value = int(value)
                if value != NO_CHANGE and not 0 <= value <= 63:
                    raise CpeError(f"{path}: DSCP out of range: {value}")
        elif path in self.params:
            if cause == "acs":
                raise CpeError(f"{path} is read-only")
        else:
            raise UnknownPath(path)
        self._store(path, value, cause)

    def add_object(self, prefix: str) -> int:
        if prefix != CLASSIFICATION:
            raise UnknownPath(prefix)
        i = next(self._class_ids)
        self.params[f"{CLASSIFICATION}{i}.SourceMACAddress"] = ["", False]
        self.params[f"{CLASSIFICATION}{i}.DSCPMark"] = [NO_CHANGE, False]
        return i

    def _set_classification(self, i: int, leaf: str, value, path: str) -> None:
        if path not in self.params:
            raise UnknownPath(path)
        if leaf == "SourceMACAddress":
            old = self._class_mac.get(i)
            if old is not None and old != value:
                self.marking_rules.pop(old, None)
            self._class_mac[i] = value
            mark = self.params[f"{CLASSIFICATION}{i}.DSCPMark"][0]
        else:
            mark = int(value)
            if mark != NO_CHANGE and (
                not 0 <= mark <= 63 or mark in COMMON_DSCP or mark in (DEFAULT_MARK, PASS_MARK)
            ):
                raise CpeError(f"DSCP {mark} is not usable as a device mark")
            value = mark
        mac = self._class_mac.get(i) if leaf == "DSCPMark" else value
        if not mac:
            return
        if mark != NO_CHANGE:
            for other, v in self.marking_rules.items():
                if other != mac and v == mark:
                    raise CpeError(f"DSCP {mark} already marks {other}")
        self.marking_rules[mac] = mark

    def classification_instance(self, mac: str) -> int | None:
        for i, m in self._class_mac.items():
            if m == mac:
                return i
        return None

    # -- events from the LAN / WAN side --------------------------------------

    def _host_params(self, h: HostRecord) -> None:
        base = f"Hosts.Host.{h.instance}."
        for leaf, value in (
            ("PhysAddress", h.mac),
            ("HostName", h.hostname),
            ("InterfaceType", "802.11" if h.medium is Medium.WIRELESS else "Ethernet"),
            ("IPAddress", h.ip),
            ("Active", h.active),
            ("DHCPOption161", h.mud_url or ""),
        ):
            self.params.setdefault(base + leaf, [value, False])[0] = value

    def connect_device(
        self, mac: str, hostname: str = "", medium: Medium | str = Medium.WIRED, mud_url: str | None = None
    ) -> HostRecord:
        mac = mac.lower()
        h = self.hosts.get(mac)
        if h is not None:
            h.active = True
            self._store(f"Hosts.Host.{h.instance}.Active", True, "external")
            return h
        n = len(self.hosts) + 1
        h = HostRecord(
            mac=mac,
            hostname=hostname or f"host{n}",
            medium=Medium(medium),
            ip=f"{self.lan_prefix}{99 + n}",
            instance=n,
            mud_url=mud_url,
            first_seen=self.clock(),
        )
        self.hosts[mac] = h
        self._host_params(h)
        self._store(HOST_COUNT, len(self.hosts), "external")
        return h

    def disconnect_device(self, mac: str) -> None:
        h = self._host(mac)
        h.active = False
        self._store(f"Hosts.Host.{h.instance}.Active", False, "external")

    def set_external_ip(self, ip: str) -> None:
        """DHCP lease renewal on the WAN side; live NAT bindings are lost."""
        if ip == self.external_ip:
            return
        self.external_ip = ip
        self.nat_out.clear()
        self.nat_in.clear()
        self._store(EXTERNAL_IP, ip, "external")

    def add_port_forward(self, ext_port: int, mac: str, int_port: int, protocol: int = 6) -> None:
        self._host(mac)
        self.port_forwards[(ext_port, protocol)] = (mac.lower(), int_port)
        self._forward_params(ext_port, protocol)

    def _forward_params(self, ext_port: int, protocol: int) -> None:
        mac, int_port = self.port_forwards[(ext_port, protocol)]
        i = sorted(self.port_forwards).index((ext_port, protocol)) + 1
        base = f"WANIPConnection.PortMapping.{i}."
        for leaf, value in (
            ("ExternalPort", ext_port),
            ("InternalClient", self.hosts[mac].ip),
            ("InternalPort", int_port),
            ("Protocol", "TCP" if protocol == 6 else "UDP"),
        ):
            self.params[base + leaf] = [value, False]

    def factory_reset(self) -> None:
        self.marking_rules.clear()
        self._class_mac.clear()
        self.port_forwards.clear()
        self.nat_out.clear()
        self.nat_in.clear()
        self.params = {}
        self._reset_params()

    def remove_mark(self, mac: str) -> None:
        """Local equivalent of setting the device's DSCPMark to -1."""
        self._host(mac)
        i = self.classification_instance(mac.lower())
        if i is None:
            i = self.add_object(CLASSIFICATION)
            self.set_param(f"{CLASSIFICATION}{i}.SourceMACAddress", mac.lower())
        self.set_param(f"{CLASSIFICATION}{i}.DSCPMark", NO_CHANGE)

    def _host(self, mac: str) -> HostRecord:
        try:
            return self.hosts[mac.lower()]
        except KeyError:
            raise UnknownMac(mac) from None

    def host_by_ip(self, ip: str) -> HostRecord | None:
        for h in self.hosts.values():
            if h.ip == ip:
                return h
        return None

    def is_lan(self, ip: str) -> bool:
        return ip.startswith(self.lan_prefix)

    # -- data path -------------------------------------------------------------

    def _mark(self, p: Packet) -> int:
        mac = p.src_mac
        rule = self.marking_rules.get(mac)
        if rule is not None:
            return p.dscp if rule == NO_CHANGE else rule
        if self.default_mark_enabled:
            h = self.hosts.get(mac)
            recent = h is None or (
                self.default_mark_window is None or self.clock() - h.first_seen <= self.default_mark_window
            )
            if recent:
                return self.params[DEFAULT_DSCP][0]
        return p.dscp

    def _nat(self, inner: ConnKey) -> ConnKey:
        outer = self.nat_out.get(inner)
        if outer is None:
            if self._next_port > NAT_PORT_LIMIT:
                raise NatExhausted(self.cpe_id)
            outer = ConnKey(self.external_ip, self._next_port, inner.dst_ip, inner.dst_port, inner.protocol)
            self._next_port += 1
            self.nat_out[inner] = outer
            self.nat_in[outer] = inner
        return outer

    def egress(self, p: Packet, trace: list | None = None) -> Packet | Dropped:
        """LAN -> WAN. ``trace`` (if given) collects ``(stage, packet)`` pairs."""
        if p.src_mac is None:
            raise ValueError("LAN packets carry a source MAC")
        if p.src_mac in self.hosts:
            self.hosts[p.src_mac].active = True

        if p.kind is PayloadKind.DNS_QUERY and not self.dns_direct:
            # resolved by the CPE's own stub; leaves as CPE traffic, unmarked
            out = p.with_(src_ip=self.lan_ip, src_port=53, dscp=0)
        else:
            out = p.with_(dscp=self._mark(p))
        if trace is not None:
            trace.append(("mark", out))

        if self.local_agent is not None and out.src_ip != self.lan_ip:
            decision = self.local_agent.check_local(out)
            if decision == "block":
                return Dropped("local_violation")
            if decision == "permit":
                out = out.with_(dscp=PASS_MARK)
                if trace is not None:
                    trace.append(("wle", out))

        reset = self.pass_mark_reset
        if reset != NO_CHANGE and out.dscp == reset:
            out = out.with_(dscp=0)
            if trace is not None:
                trace.append(("reset", out))

        outer = self._nat(out.key)
        out = out.with_(src_ip=outer.src_ip, src_port=outer.src_port, src_mac=None)
        if trace is not None:
            trace.append(("nat", out))
        return out

    def originate(self, dst_ip: str, dst_port: int, protocol: int = 6, ts: int | None = None) -> Packet:
        """A packet from the CPE's own stack (management, NTP, ...)."""
        mark = self.params[SELF_DSCP][0]
        inner = ConnKey(self.lan_ip, 7547, dst_ip, dst_port, protocol)
        outer = self._nat(inner)
        return Packet(
            outer.src_ip, dst_ip, outer.src_port, dst_port, protocol,
            dscp=0 if mark == NO_CHANGE else mark, ts=self.clock() if ts is None else ts,
        )

    def ingress(self, p: Packet) -> tuple[str, Packet] | Dropped:
        """WAN -> LAN. Returns ``(mac, rewritten packet)`` or :class:`Dropped`."""
        if p.dst_ip != self.external_ip:
            return Dropped("not_ours")
        inner = self.nat_in.get(p.key.reverse())
        if inner is None:
            fwd = self.port_forwards.get((p.dst_port, p.protocol))
            if fwd is None:
                return Dropped("no_binding")
            mac, int_port = fwd
            h = self.hosts[mac]
            inner = ConnKey(h.ip, int_port, p.src_ip, p.src_port, p.protocol)
            outer = ConnKey(self.external_ip, p.dst_port, p.src_ip, p.src_port, p.protocol)
            self.nat_out[inner] = outer
            self.nat_in[outer] = inner
            self.forwarded.add(outer)
        h = self.host_by_ip(inner.src_ip)
        if h is None:
            return Dropped("stale_binding")
        delivered = p.with_(dst_ip=inner.src_ip, dst_port=inner.src_port)
        if self.local_agent is not None:
            forwarded = p.key.reverse() in self.forwarded
            if self.local_agent.check_inbound(delivered, h.mac, forwarded) == "block":
                return Dropped("local_violation")
        return h.mac, delivered

    def lan_forward(self, p: Packet) -> tuple[str, Packet] | Dropped:
        """LAN -> LAN switching, judged by the local agent when present."""
        h = self.host_by_ip(p.dst_ip)
        if h is None:
            return Dropped("no_such_host")
        if self.local_agent is not None and self.local_agent.check_local(p) == "block":
            return Dropped("local_violation")
        return h.mac, p


class Acs:
    """Auto-configuration server: the controller's only path to CPEs.

    With ``apply_delay`` > 0 writes are queued and applied on a later tick,
    modelling the gap before a new marking rule takes effect.
    """

    def __init__(self, clock: Callable[[], int] = lambda: 0, apply_delay: int = 0):
        self.clock = clock
        self.apply_delay = apply_delay
        self.cpes: dict[str, Cpe] = {}
        self.unreachable: set[str] = set()
        self.subscribers: list[Callable[[Notification], None]] = []
        self._queue: list = []
        self._seq = itertools.count()
        self.requests = 0

    def register(self, cpe: Cpe) -> None:
        self.cpes[cpe.cpe_id] = cpe
        cpe.subscribe(self._relay)

    def subscribe(self, callback: Callable[[Notification], None]) -> None:
        self.subscribers.append(callback)

    def _relay(self, note: Notification) -> None:
        for cb in list(self.subscribers):
            cb(note)

    def _cpe(self, cpe_id: str) -> Cpe:
        if cpe_id in self.unreachable or cpe_id not in self.cpes:
            raise ConfigUnreachable(cpe_id)
        return self.cpes[cpe_id]

    def get_param(self, cpe_id: str, path: str):
        return self._cpe(cpe_id).get_param(path)

    def get_hosts(self, cpe_id: str) -> list[dict]:
        cpe = self._cpe(cpe_id)
        hosts = []
        for i in range(1, cpe.get_param(HOST_COUNT) + 1):
            base = f"Hosts.Host.{i}."
            hosts.append({
                "mac": cpe.get_param(base + "PhysAddress"),
                "hostname": cpe.get_param(base + "HostName"),
                "medium": "wireless" if cpe.get_param(base + "InterfaceType") == "802.11" else "wired",
                "ip": cpe.get_param(base + "IPAddress"),
                "active": cpe.get_param(base + "Active"),
                "mud_url": cpe.get_param(base + "DHCPOption161") or None,
            })
        return hosts

    def set_notification(self, cpe_id: str, path: str, active: bool = True) -> None:
        self._cpe(cpe_id).set_notification(path, active)

    def add_object(self, cpe_id: str, prefix: str) -> int:
        return self._cpe(cpe_id).add_object(prefix)

    def set_param(self, cpe_id: str, path: str, value, on_applied: Callable[[], None] | None = None) -> None:
        cpe = self._cpe(cpe_id)
        self.requests += 1
        if self.apply_delay <= 0:
            cpe.set_param(path, value, cause="acs")
            if on_applied:
                on_applied()
            return
        due = self.clock() + self.apply_delay
        heapq.heappush(self._queue, (due, next(self._seq), cpe_id, path, value, on_applied))

    def tick(self, now: int) -> int:
        applied = 0
        while self._queue and self._queue[0][0] <= now:
            _, _, cpe_id, path, value, on_applied = heapq.heappop(self._queue)
            self.cpes[cpe_id].set_param(path, value, cause="acs")
            applied += 1
            if on_applied:
                on_applied()
        return applied

    @property
    def pending(self) -> int:
        return len(self._queue)
