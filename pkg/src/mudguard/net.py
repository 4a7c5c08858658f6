"""Packets, connection keys and DSCP classes shared by every component.

Addresses are kept as dotted-quad strings; validation happens at the edges
(trace parsing, MUD parsing) so the hot path only does dict lookups.
"""

from __future__ import annotations

import enum
import ipaddress
from dataclasses import dataclass, replace
from typing import NamedTuple

TCP = 6
UDP = 17

# CS0..CS7, AF11..AF43, EF
COMMON_DSCP: frozenset[int] = frozenset(
    [0, 8, 16, 24, 32, 40, 48, 56]
    + [10, 12, 14, 18, 20, 22, 26, 28, 30, 34, 36, 38]
    + [46]
)
DEFAULT_MARK = 60
PASS_MARK = 58
NO_CHANGE = -1  # DSCPMark value meaning "leave the device's own DSCP alone"

DSCP_NAMES = {
    0: "CS0", 8: "CS1", 16: "CS2", 24: "CS3", 32: "CS4", 40: "CS5", 48: "CS6", 56: "CS7",
    10: "AF11", 12: "AF12", 14: "AF13", 18: "AF21", 20: "AF22", 22: "AF23",
    26: "AF31", 28: "AF32", 30: "AF33", 34: "AF41", 36: "AF42", 38: "AF43",
    46: "EF",
}


class DscpKind(enum.Enum):
    COMMONLY_USED = "commonly_used"
    DEFAULT_MARK = "default_mark"
    DEVICE_MARK = "device_mark"


class DscpClass(NamedTuple):
    kind: DscpKind
    value: int


def classify_dscp(dscp: int) -> DscpClass:
    if not 0 <= dscp <= 63:
        raise ValueError(f"DSCP out of range: {dscp}")
    if dscp in COMMON_DSCP:
        return DscpClass(DscpKind.COMMONLY_USED, dscp)
    if dscp == DEFAULT_MARK:
        return DscpClass(DscpKind.DEFAULT_MARK, dscp)
    return DscpClass(DscpKind.DEVICE_MARK, dscp)


def allocatable_marks() -> list[int]:
    """DSCP values a CPE may hand out as per-device marks, ascending."""
    return [v for v in range(64) if v not in COMMON_DSCP and v not in (DEFAULT_MARK, PASS_MARK)]


def allocate_mark(used) -> int | None:
    """Smallest free per-device mark, or None when the space is exhausted."""
    for v in allocatable_marks():
        if v not in used:
            return v
    return None


class ConnKey(NamedTuple):
    """Connection 5-tuple. Tuple ordering gives the total order."""

    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    protocol: int

    def reverse(self) -> ConnKey:
        return ConnKey(self.dst_ip, self.dst_port, self.src_ip, self.src_port, self.protocol)

    def to_list(self) -> list:
        return list(self)

    def __str__(self) -> str:
        return f"{self.src_ip}:{self.src_port}->{self.dst_ip}:{self.dst_port}/{self.protocol}"


def reverse(k: ConnKey) -> ConnKey:
    return k.reverse()


class PayloadKind(str, enum.Enum):
    DATA = "data"
    DNS_QUERY = "dns_query"
    DNS_RESPONSE = "dns_response"


@dataclass(frozen=True, slots=True)
class Packet:
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: int
    dscp: int = 0
    src_mac: str | None = None
    kind: PayloadKind = PayloadKind.DATA
    qname: str | None = None
    answers: tuple[str, ...] = ()
    ts: int = 0

    def __post_init__(self):
        if not 0 <= self.dscp <= 63:
            raise ValueError(f"DSCP out of range: {self.dscp}")
        if not (0 <= self.src_port <= 65535 and 0 <= self.dst_port <= 65535):
            raise ValueError("port out of range")
        if not 0 <= self.protocol <= 255:
            raise ValueError("protocol out of range")
        if self.kind is PayloadKind.DNS_RESPONSE and not self.answers:
            raise ValueError("dns_response needs at least one address")
        if self.kind is not PayloadKind.DATA and not self.qname:
            raise ValueError("dns payload needs a query name")

    @property
    def key(self) -> ConnKey:
        return ConnKey(self.src_ip, self.src_port, self.dst_ip, self.dst_port, self.protocol)

    def with_(self, **changes) -> Packet:
        return replace(self, **changes)

    def encode(self) -> str:
        """One trace line: ts mac src sport dst dport proto dscp kind[:qname[:a,b]]."""
        payload = self.kind.value
        if self.qname:
            payload += ":" + self.qname
            if self.answers:
                payload += ":" + ",".join(self.answers)
        return " ".join(
            str(x)
            for x in (
                self.ts,
                self.src_mac or "-",
                self.src_ip,
                self.src_port,
                self.dst_ip,
                self.dst_port,
                self.protocol,
                self.dscp,
                payload,
            )
        )

    @classmethod
    def decode(cls, line: str) -> Packet:
        parts = line.split()
        if len(parts) != 9:
            raise ValueError(f"bad trace line: {line!r}")
        ts, mac, src, sport, dst, dport, proto, dscp, payload = parts
        kind, _, rest = payload.partition(":")
        qname, _, answers = rest.partition(":")
        return cls(
            src_ip=check_ipv4(src),
            dst_ip=check_ipv4(dst),
            src_port=int(sport),
            dst_port=int(dport),
            protocol=int(proto),
            dscp=int(dscp),
            src_mac=None if mac == "-" else check_mac(mac),
            kind=PayloadKind(kind),
            qname=qname or None,
            answers=tuple(a for a in answers.split(",") if a),
            ts=int(ts),
        )


def check_ipv4(addr: str) -> str:
    return str(ipaddress.IPv4Address(addr))


def check_mac(mac: str) -> str:
    parts = mac.lower().split(":")
    if len(parts) != 6 or not all(len(p) == 2 and int(p, 16) >= 0 for p in parts):
        raise ValueError(f"bad MAC address: {mac!r}")
    return ":".join(parts)


def in_network(addr: str, network: str) -> bool:
    return ipaddress.IPv4Address(addr) in ipaddress.IPv4Network(network, strict=False)
