"""MUD file subset: parsing, serialization, placeholders and resolved whitelists.

Supported ACE matches are the ones the VNF pipeline can act on: an IPv4
dns-name or /32 network for the remote side, an IP protocol, and a TCP/UDP
destination port. Anything else (eth, ipv6, icmp, MUD abstractions such as
``same-manufacturer``) is rejected with :class:`UnsupportedAcl`.
"""

from __future__ import annotations

import enum
import hashlib
import ipaddress
import json
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, NamedTuple
from urllib.parse import urlsplit, urlunsplit

from .errors import EmptyWhitelist, MalformedJson, NoPlaceholder, UnsupportedAcl
from .net import TCP, UDP, Packet

OWNER_DOMAIN_TOKEN = "$owner-unique-domain$"
# Not part of the published extension: our own token for the LAN-internal
# address record of the same owner.
OWNER_INTERNAL_TOKEN = "$owner-internal-id$"
PLACEHOLDER_TOKENS = (OWNER_DOMAIN_TOKEN, OWNER_INTERNAL_TOKEN)

_LABEL = re.compile(r"^(?!-)[a-z0-9-]{1,63}(?<!-)$")


class Direction(str, enum.Enum):
    DEVICE_TO_CLOUD = "device-to-cloud"
    CLOUD_TO_DEVICE = "cloud-to-device"


def valid_domain(name: str) -> bool:
    name = name.rstrip(".").lower()
    if not name or len(name) > 253:
        return False
    labels = name.split(".")
    return len(labels) >= 2 and all(_LABEL.match(label) for label in labels)


@dataclass(frozen=True)
class AclEntry:
    dns_name: str | None = None
    ip_literal: str | None = None
    dst_port: int | None = None
    protocol: int | None = None
    direction: Direction = Direction.DEVICE_TO_CLOUD

    def __post_init__(self):
        if self.dns_name is not None and self.ip_literal is not None:
            raise UnsupportedAcl("dns name and ip literal are mutually exclusive")
        if self.dns_name is None and self.ip_literal is None:
            if self.dst_port is None or self.protocol is None:
                raise UnsupportedAcl("entry needs a remote name, an address, or a (port, protocol) pair")
        if self.dst_port is not None and not 0 <= self.dst_port <= 65535:
            raise UnsupportedAcl(f"port out of range: {self.dst_port}")
        if self.protocol is not None and not 0 <= self.protocol <= 255:
            raise UnsupportedAcl(f"protocol out of range: {self.protocol}")

    @property
    def is_placeholder(self) -> bool:
        return self.dns_name in PLACEHOLDER_TOKENS

    @property
    def port_only(self) -> bool:
        return self.dns_name is None and self.ip_literal is None

    @property
    def device_port_side(self) -> str:
        """Which field of an outbound packet carries this entry's port.

        Cloud-to-device ACEs constrain the device's own port, which is the
        source port of the device's replies.
        """
        return "dst" if self.direction is Direction.DEVICE_TO_CLOUD else "src"

    def sort_key(self):
        return (
            self.direction.value,
            self.dns_name or "",
            self.ip_literal or "",
            -1 if self.dst_port is None else self.dst_port,
            -1 if self.protocol is None else self.protocol,
        )


def canonical_url(url: str) -> str:
    parts = urlsplit(url.strip())
    if not parts.scheme or not parts.netloc:
        raise ValueError(f"not an absolute URL: {url!r}")
    path = parts.path or "/"
    return urlunsplit((parts.scheme.lower(), parts.netloc.lower(), path, parts.query, ""))


def profile_id_for(mud_url: str, owner: str | None = None) -> str:
    key = canonical_url(mud_url)
    if owner:
        key += "#" + owner.lower()
    return hashlib.sha256(key.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class MudProfile:
    profile_id: str
    mud_url: str
    wld: frozenset[AclEntry]
    systeminfo: str = ""
    owner_domain: str | None = None

    @property
    def has_placeholder(self) -> bool:
        return any(e.is_placeholder for e in self.wld)

    @property
    def domains(self) -> frozenset[str]:
        """The resolvable domain list (placeholders excluded)."""
        return frozenset(e.dns_name for e in self.wld if e.dns_name and not e.is_placeholder)

    def entries(self) -> list[AclEntry]:
        return sorted(self.wld, key=AclEntry.sort_key)


# -- parsing ---------------------------------------------------------------

_MUD = "ietf-mud:mud"
_ACLS = "ietf-access-control-list:access-lists"
_IPV4_NAME = {"ietf-acldns:dst-dnsname": "dst", "ietf-acldns:src-dnsname": "src"}
_IPV4_NET = {"destination-ipv4-network": "dst", "source-ipv4-network": "src"}


def _policy_acl_names(mud: dict, key: str) -> list[str]:
    policy = mud.get(key)
    if policy is None:
        return []
    try:
        return [a["name"] for a in policy["access-lists"]["access-list"]]
    except (KeyError, TypeError) as exc:
        raise MalformedJson(f"bad {key}: {exc}") from exc


def _parse_port(spec: dict) -> int:
    if set(spec) - {"operator", "port"}:
        raise UnsupportedAcl(f"unsupported port match: {sorted(spec)}")
    if spec.get("operator", "eq") != "eq":
        raise UnsupportedAcl(f"port operator {spec['operator']!r} not supported")
    port = spec.get("port")
    if not isinstance(port, int):
        raise MalformedJson("port must be an integer")
    return port


def _parse_ace(ace: dict, direction: Direction) -> AclEntry:
    # remote side: dst for device-to-cloud, src for cloud-to-device
    remote = "dst" if direction is Direction.DEVICE_TO_CLOUD else "src"
    matches = ace.get("matches")
    if not isinstance(matches, dict):
        raise MalformedJson(f"ACE {ace.get('name')!r} has no matches")
    action = ace.get("actions", {}).get("forwarding", "accept")
    if action != "accept":
        raise UnsupportedAcl(f"ACE {ace.get('name')!r}: forwarding {action!r} not supported")
    extra = set(matches) - {"ipv4", "tcp", "udp"}
    if "eth" in extra:
        raise UnsupportedAcl("layer-2 (eth) matches are not visible outside the LAN")
    if extra:
        raise UnsupportedAcl(f"unsupported match fields: {sorted(extra)}")

    dns_name = ip_literal = None
    protocol = dst_port = None
    ipv4 = matches.get("ipv4", {})
    for k, v in ipv4.items():
        if k in _IPV4_NAME:
            if _IPV4_NAME[k] != remote:
                raise UnsupportedAcl(f"{k} does not name the remote side of a {direction.value} ACE")
            if not isinstance(v, str):
                raise MalformedJson(f"{k} must be a string")
            dns_name = v if v in PLACEHOLDER_TOKENS else v.lower().rstrip(".")
        elif k in _IPV4_NET:
            if _IPV4_NET[k] != remote:
                raise UnsupportedAcl(f"{k} does not name the remote side of a {direction.value} ACE")
            try:
                net = ipaddress.IPv4Network(v)
            except (ValueError, TypeError) as exc:
                raise MalformedJson(f"bad network {v!r}") from exc
            if net.prefixlen != 32:
                raise UnsupportedAcl("only /32 address literals are supported")
            ip_literal = str(net.network_address)
        elif k == "protocol":
            if not isinstance(v, int):
                raise MalformedJson("protocol must be an integer")
            protocol = v
        else:
            raise UnsupportedAcl(f"unsupported ipv4 match {k!r}")

    for l4, proto in (("tcp", TCP), ("udp", UDP)):
        if l4 not in matches:
            continue
        if protocol is not None and protocol != proto:
            raise UnsupportedAcl(f"{l4} match contradicts protocol {protocol}")
        protocol = proto
        spec = matches[l4]
        if set(spec) - {"destination-port"}:
            raise UnsupportedAcl(f"unsupported {l4} match: {sorted(spec)}")
        if "destination-port" in spec:
            dst_port = _parse_port(spec["destination-port"])

    if dns_name is not None and dns_name not in PLACEHOLDER_TOKENS and not valid_domain(dns_name):
        raise MalformedJson(f"invalid domain {dns_name!r}")
    return AclEntry(dns_name, ip_literal, dst_port, protocol, direction)


def parse_mud(file_bytes: bytes | str) -> MudProfile:
    try:
        doc = json.loads(file_bytes)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedJson(str(exc)) from exc
    if not isinstance(doc, dict) or _MUD not in doc:
        raise MalformedJson(f"missing {_MUD!r} container")
    mud = doc[_MUD]
    url = mud.get("mud-url")
    if not isinstance(url, str):
        raise MalformedJson("missing mud-url")
    try:
        canonical_url(url)
    except ValueError as exc:
        raise MalformedJson(str(exc)) from exc

    try:
        acls = {a["name"]: a for a in doc.get(_ACLS, {}).get("acl", [])}
    except (KeyError, TypeError, AttributeError) as exc:
        raise MalformedJson(f"bad access-lists: {exc}") from exc

    entries = set()
    for policy, direction in (
        ("from-device-policy", Direction.DEVICE_TO_CLOUD),
        ("to-device-policy", Direction.CLOUD_TO_DEVICE),
    ):
        for name in _policy_acl_names(mud, policy):
            if name not in acls:
                raise MalformedJson(f"policy references unknown ACL {name!r}")
            acl = acls[name]
            if acl.get("type", "ipv4-acl-type") != "ipv4-acl-type":
                raise UnsupportedAcl(f"ACL type {acl['type']!r} not supported")
            for ace in acl.get("aces", {}).get("ace", []):
                entries.add(_parse_ace(ace, direction))

    if not entries:
        raise EmptyWhitelist(f"{url}: no access-control entries")
    return MudProfile(
        profile_id=profile_id_for(url),
        mud_url=url,
        wld=frozenset(entries),
        systeminfo=mud.get("systeminfo", ""),
    )


def _ace_json(entry: AclEntry, idx: int) -> dict:
    remote = "dst" if entry.direction is Direction.DEVICE_TO_CLOUD else "src"
    ipv4 = {}
    if entry.dns_name is not None:
        ipv4[f"ietf-acldns:{remote}-dnsname"] = entry.dns_name
    if entry.ip_literal is not None:
        key = "destination-ipv4-network" if remote == "dst" else "source-ipv4-network"
        ipv4[key] = f"{entry.ip_literal}/32"
    if entry.protocol is not None:
        ipv4["protocol"] = entry.protocol
    matches: dict = {}
    if ipv4:
        matches["ipv4"] = ipv4
    if entry.dst_port is not None:
        l4 = {TCP: "tcp", UDP: "udp"}.get(entry.protocol)
        if l4 is None:
            raise UnsupportedAcl("ports need TCP or UDP")
        matches[l4] = {"destination-port": {"operator": "eq", "port": entry.dst_port}}
    return {"name": f"ace{idx}", "matches": matches, "actions": {"forwarding": "accept"}}


def serialize_mud(profile: MudProfile) -> bytes:
    frm = [e for e in profile.entries() if e.direction is Direction.DEVICE_TO_CLOUD]
    to = [e for e in profile.entries() if e.direction is Direction.CLOUD_TO_DEVICE]
    mud: dict = {"mud-version": 1, "mud-url": profile.mud_url, "systeminfo": profile.systeminfo}
    acl_list = []
    if frm:
        mud["from-device-policy"] = {"access-lists": {"access-list": [{"name": "from-device"}]}}
        acl_list.append(
            {"name": "from-device", "type": "ipv4-acl-type",
             "aces": {"ace": [_ace_json(e, i) for i, e in enumerate(frm)]}}
        )
    if to:
        mud["to-device-policy"] = {"access-lists": {"access-list": [{"name": "to-device"}]}}
        acl_list.append(
            {"name": "to-device", "type": "ipv4-acl-type",
             "aces": {"ace": [_ace_json(e, i) for i, e in enumerate(to)]}}
        )
    doc = {_MUD: mud, _ACLS: {"acl": acl_list}}
    return json.dumps(doc, indent=2, sort_keys=True).encode()


def internal_owner_domain(owner_domain: str) -> str:
    """``k7f3q.svm.example`` -> ``k7f3q.int.svm.example``."""
    label, _, parent = owner_domain.partition(".")
    return f"{label}.int.{parent}"


def substitute_placeholder(
    p: MudProfile, owner_domain: str, internal_domain: str | None = None
) -> MudProfile:
    """Replace every placeholder with the owner's domain(s).

    The result gets its own profile id (one per owner), since the
    substituted whitelist no longer describes the whole device type.
    """
    if not p.has_placeholder:
        raise NoPlaceholder(p.mud_url)
    owner_domain = owner_domain.lower().rstrip(".")
    if not valid_domain(owner_domain):
        raise ValueError(f"invalid owner domain {owner_domain!r}")
    internal_domain = internal_domain or internal_owner_domain(owner_domain)
    swap = {OWNER_DOMAIN_TOKEN: owner_domain, OWNER_INTERNAL_TOKEN: internal_domain}
    wld = frozenset(
        replace(e, dns_name=swap[e.dns_name]) if e.is_placeholder else e for e in p.wld
    )
    return MudProfile(
        profile_id=profile_id_for(p.mud_url, owner_domain),
        mud_url=p.mud_url,
        wld=wld,
        systeminfo=p.systeminfo,
        owner_domain=owner_domain,
    )


# -- resolved whitelists -----------------------------------------------------


class WhitelistRow(NamedTuple):
    """One matchable whitelist row. ``addr`` is None for port-only rows."""

    addr: str | None
    port: int | None
    protocol: int | None
    port_side: str = "dst"

    def matches(self, p: Packet) -> bool:
        if self.addr is not None and p.dst_ip != self.addr:
            return False
        if self.protocol is not None and p.protocol != self.protocol:
            return False
        if self.port is not None:
            port = p.dst_port if self.port_side == "dst" else p.src_port
            if port != self.port:
                return False
        return True

    def sort_key(self):
        return (self.addr or "", -1 if self.port is None else self.port,
                -1 if self.protocol is None else self.protocol, self.port_side)


def rows_for_entry(entry: AclEntry, answers: Mapping[str, Iterable[str]]) -> set[WhitelistRow]:
    side = entry.device_port_side
    if entry.is_placeholder:
        return set()
    if entry.dns_name is not None:
        return {WhitelistRow(a, entry.dst_port, entry.protocol, side) for a in answers.get(entry.dns_name, ())}
    return {WhitelistRow(entry.ip_literal, entry.dst_port, entry.protocol, side)}


@dataclass
class ResolvedWhitelist:
    profile_id: str
    wl: set[WhitelistRow] = field(default_factory=set)
    resolved_at: int = 0

    @classmethod
    def build(cls, profile: MudProfile, answers: Mapping[str, Iterable[str]], ts: int = 0) -> ResolvedWhitelist:
        rows: set[WhitelistRow] = set()
        for entry in profile.wld:
            rows |= rows_for_entry(entry, answers)
        return cls(profile.profile_id, rows, ts)

    def contains(self, p: Packet) -> bool:
        return any(row.matches(p) for row in self.wl)

    @property
    def addresses(self) -> set[str]:
        return {r.addr for r in self.wl if r.addr is not None}
