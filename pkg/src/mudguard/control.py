"""The VNF control plane.

Reacts to CPE notifications relayed by the ACS, keeps the pipeline in step
with customers, devices and resolved whitelists, analyzes devices that came
without a MUD file, and turns confirmed violations into ACL requests.
"""

from __future__ import annotations

import enum
import heapq
import ipaddress
import itertools
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Callable, Protocol
from urllib.parse import urlsplit

from .alerts import Alert
from .cpe import (
    CLASSIFICATION,
    DEFAULT_DSCP,
    DNS_SERVERS,
    EXTERNAL_IP,
    HOST_COUNT,
    PASS_MARK_RESET,
    SELF_DSCP,
    Acs,
    Notification,
)
from .config import Config
from .dns import ActiveResolver, WhitelistDiff
from .errors import MudError, MudFetchFailed, MudGuardError, UnknownCustomer
from .mud import (
    MudProfile,
    canonical_url,
    internal_owner_domain,
    parse_mud,
    substitute_placeholder,
)
from .net import DEFAULT_MARK, NO_CHANGE, PASS_MARK, Packet, PayloadKind, allocate_mark
from .pipeline import (
    FirstPacketFilter,
    Ignored,
    Legitimate,
    Pipeline,
    Unidentified,
    Verdict,
    Violation,
)
from .wle import AclRequest, AggregateScope, BorderRouter, ConnectionScope

log = logging.getLogger(__name__)

CPE_SELF_MAC = "cpe"


class DeviceStatus(str, enum.Enum):
    UNIDENTIFIED = "unidentified"
    IDENTIFIED = "identified"
    NON_IOT = "non_iot"


_ALLOWED = {
    (DeviceStatus.UNIDENTIFIED, DeviceStatus.IDENTIFIED),
    (DeviceStatus.UNIDENTIFIED, DeviceStatus.NON_IOT),
    (DeviceStatus.IDENTIFIED, DeviceStatus.IDENTIFIED),  # P2P substitution swaps profiles
}


class IllegalTransition(MudGuardError):
    pass


@dataclass
class DeviceState:
    customer_id: str
    mac: str
    mark: int
    status: DeviceStatus = DeviceStatus.UNIDENTIFIED
    profile_id: str | None = None
    mud_url: str | None = None
    joined_at: int = 0
    mark_pending: bool = True
    needs_profile: bool = False
    observed_domains: set[str] = field(default_factory=set)
    observed_endpoints: set[tuple[str, int, int]] = field(default_factory=set)
    fetch_attempts: int = 0
    transitions: list[tuple[str, str]] = field(default_factory=list)

    def move_to(self, status: DeviceStatus, profile_id: str | None = None) -> None:
        if (self.status, status) not in _ALLOWED:
            raise IllegalTransition(f"{self.mac}: {self.status.value} -> {status.value}")
        self.transitions.append((self.status.value, status.value))
        self.status = status
        self.profile_id = profile_id


@dataclass
class Customer:
    customer_id: str
    cpe_id: str
    external_ip: str
    devices: dict[str, DeviceState] = field(default_factory=dict)
    marks: dict[int, str] = field(default_factory=dict)
    iads: set[str] = field(default_factory=set)
    owner_domain: str | None = None
    internal_domain: str | None = None
    pending_placeholder: set[str] = field(default_factory=set)
    signup_errors: dict[str, MudGuardError] = field(default_factory=dict)


@dataclass(frozen=True)
class Decision:
    kind: str  # matched | new_iot | non_iot | undecided
    profile_id: str | None = None


@dataclass(frozen=True)
class Suppressed:
    profile_id: str
    refreshed: bool = True  # False: the whitelist already allowed it

    @property
    def outcome(self) -> str:
        return "suppressed" if self.refreshed else "suppressed_unchanged"


@dataclass(frozen=True)
class AlertOutcome:
    alert: Alert
    acl_rule_id: int | None


class Classifier(Protocol):
    def __call__(self, device: DeviceState) -> str: ...


def registered_domain(name: str) -> str:
    return ".".join(name.split(".")[-2:])


class DomainSpreadClassifier:
    """Default IoT/non-IoT oracle: general-purpose hosts talk to many sites."""

    def __init__(self, threshold: int = 10):
        self.threshold = threshold

    def __call__(self, device: DeviceState) -> str:
        spread = {registered_domain(d) for d in device.observed_domains}
        return "non_iot" if len(spread) > self.threshold else "new_iot"


class HintClassifier:
    """Per-MAC verdicts supplied by a scenario, falling back to another oracle."""

    def __init__(self, fallback: Classifier):
        self.fallback = fallback
        self.hints: dict[str, str] = {}

    def __call__(self, device: DeviceState) -> str:
        return self.hints.get(device.mac) or self.fallback(device)


MudFetcher = Callable[[str, str], bytes]


class Controller:
    def __init__(
        self,
        pipeline: Pipeline,
        acs: Acs,
        active: ActiveResolver,
        router: BorderRouter,
        fetch: MudFetcher,
        config: Config | None = None,
        *,
        clock: Callable[[], int] = lambda: 0,
        classifier: Classifier | None = None,
    ):
        self.pipeline = pipeline
        self.acs = acs
        self.active = active
        self.router = router
        self.fetch = fetch
        self.config = config or Config()
        self.clock = clock
        self.classifier = classifier or HintClassifier(
            DomainSpreadClassifier(self.config.non_iot_domain_threshold)
        )
        self.customers: dict[str, Customer] = {}
        self._by_cpe: dict[str, str] = {}
        self.profiles: dict[str, MudProfile] = {}
        self._type_profiles: dict[str, str] = {}  # canonical mud url -> profile id
        self.local_agents: dict[str, object] = {}
        self.alerts: list[Alert] = []
        self.alert_sinks: list[Callable[[Alert], None]] = []
        self.blocked: set = set()
        self.aggregated: set = set()
        self._violation_targets: dict[tuple, set[str]] = defaultdict(set)
        self._retries: list = []
        self._seq = itertools.count()
        self.stats: Counter[str] = Counter()
        self.last_refresh = None
        acs.subscribe(self.on_notification)

    # -- helpers ------------------------------------------------------------------

    def _emit(self, alert: Alert) -> Alert:
        self.alerts.append(alert)
        for sink in self.alert_sinks:
            sink(alert)
        return alert

    def customer(self, customer_id: str) -> Customer:
        try:
            return self.customers[customer_id]
        except KeyError:
            raise UnknownCustomer(customer_id) from None

    def customer_for_cpe(self, cpe_id: str) -> str | None:
        return self._by_cpe.get(cpe_id)

    def device(self, customer_id: str, mac: str) -> DeviceState:
        return self.customer(customer_id).devices[mac.lower()]

    def _is_svm_url(self, url: str) -> bool:
        return urlsplit(url).hostname == self.config.svm_parent

    def apply_diffs(self, diffs: list[WhitelistDiff]) -> int:
        """Push whitelist diffs into the pipeline, one filter per row."""
        n = 0
        for diff in diffs:
            if not self.pipeline.has_profile(diff.profile_id):
                continue
            for row in sorted(diff.removed, key=lambda r: r.sort_key()):
                self.pipeline.remove_whitelist_entry(diff.profile_id, row)
                n += 1
            for row in sorted(diff.added, key=lambda r: r.sort_key()):
                self.pipeline.install_whitelist_entry(diff.profile_id, row)
                n += 1
        return n

    def install_profile(self, profile: MudProfile) -> str:
        """Install a whitelist table for ``profile`` unless it is already there."""
        pid = profile.profile_id
        if self.pipeline.has_profile(pid):
            return pid
        self.profiles[pid] = profile
        self.pipeline.install_profile(pid)
        self.apply_diffs([self.active.add_profile(profile)])
        self.stats["profiles_installed"] += 1
        return pid

    def _profile_for_url(self, url: str, customer_id: str) -> MudProfile:
        key = canonical_url(url)
        pid = self._type_profiles.get(key)
        if pid is not None:
            return self.profiles[pid]
        profile = parse_mud(self.fetch(url, customer_id))
        self._type_profiles[key] = profile.profile_id
        self.install_profile(profile)
        return profile

    # -- CPE configuration events ---------------------------------------------

    def on_notification(self, note: Notification) -> None:
        customer_id = self._by_cpe.get(note.cpe_id)
        if customer_id is None:
            return
        if note.path == EXTERNAL_IP:
            self.on_ip_changed(customer_id, note.value)
        elif note.path == HOST_COUNT:
            cust = self.customers[customer_id]
            for host in self.acs.get_hosts(cust.cpe_id):
                if host["mac"] not in cust.devices and host["mac"] not in cust.iads:
                    self.on_new_device(customer_id, host)

    def on_new_customer(self, cpe_id: str, customer_id: str | None = None) -> str:
        existing = self._by_cpe.get(cpe_id)
        if existing is not None:
            return existing
        customer_id = customer_id or cpe_id
        ext_ip = self.acs.get_param(cpe_id, EXTERNAL_IP)
        self.pipeline.install_customer(ext_ip, customer_id)
        self.router.monitored.add(ext_ip)
        cust = Customer(customer_id, cpe_id, ext_ip)
        self.customers[customer_id] = cust
        self._by_cpe[cpe_id] = customer_id
        self.acs.set_notification(cpe_id, EXTERNAL_IP, True)
        self.acs.set_notification(cpe_id, HOST_COUNT, True)
        self.acs.set_param(cpe_id, DEFAULT_DSCP, DEFAULT_MARK)
        self.acs.set_param(cpe_id, DNS_SERVERS, self.config.isp_resolver)
        if self.config.hybrid:
            self.acs.set_param(cpe_id, PASS_MARK_RESET, PASS_MARK)
        if self.config.cpe_mud_url:
            self._register_cpe_itself(cust)
        for host in self.acs.get_hosts(cpe_id):
            if host["mac"] not in cust.devices:
                self.on_new_device(customer_id, host)
        return customer_id

    def _register_cpe_itself(self, cust: Customer) -> None:
        mark = allocate_mark(cust.marks)
        dev = DeviceState(cust.customer_id, CPE_SELF_MAC, mark, joined_at=self.clock(), mark_pending=False)
        cust.devices[CPE_SELF_MAC] = dev
        cust.marks[mark] = CPE_SELF_MAC
        self.acs.set_param(cust.cpe_id, SELF_DSCP, mark)
        profile = self._fetch_profile(cust, dev, self.config.cpe_mud_url)
        self.pipeline.install_device(cust.customer_id, mark, profile.profile_id if profile else None)
        if profile:
            dev.move_to(DeviceStatus.IDENTIFIED, profile.profile_id)

    def on_ip_changed(self, customer_id: str, new_ip: str) -> None:
        cust = self.customer(customer_id)
        if new_ip == cust.external_ip:
            return
        self.pipeline.update_customer_ip(cust.external_ip, new_ip)
        self.router.monitored.discard(cust.external_ip)
        self.router.monitored.add(new_ip)
        cust.external_ip = new_ip
        self.stats["ip_changes"] += 1

    def _fetch_profile(self, cust: Customer, dev: DeviceState, url: str) -> MudProfile | None:
        dev.fetch_attempts += 1
        try:
            profile = self._profile_for_url(url, cust.customer_id)
        except (MudFetchFailed, MudError) as exc:
            log.info("MUD fetch for %s failed (attempt %d): %s", dev.mac, dev.fetch_attempts, exc)
            self.stats["mud_fetch_failures"] += 1
            if dev.fetch_attempts < self.config.mud_retry_max:
                due = self.clock() + 2 ** (dev.fetch_attempts - 1)
                heapq.heappush(self._retries, (due, next(self._seq), cust.customer_id, dev.mac))
            return None
        if profile.has_placeholder:
            return self._owner_view(cust, dev, profile)
        return profile

    def _owner_view(self, cust: Customer, dev: DeviceState, profile: MudProfile) -> MudProfile:
        """Which profile the device should run under, given its placeholders."""
        if cust.owner_domain is None:
            cust.pending_placeholder.add(dev.mac)
            return profile
        owned = substitute_placeholder(profile, cust.owner_domain, cust.internal_domain)
        if self.config.hybrid:
            self._push_local_rules(cust, dev.mac, owned)
            return profile
        return self.profiles.get(owned.profile_id) or self._install_owned(owned)

    def _install_owned(self, owned: MudProfile) -> MudProfile:
        self.install_profile(owned)
        return owned

    def _push_local_rules(self, cust: Customer, mac: str, owned: MudProfile) -> None:
        agent = self.local_agents.get(cust.cpe_id)
        if agent is None:
            return
        mine = {cust.owner_domain, cust.internal_domain}
        agent.install_entries(mac, [e for e in owned.wld if e.dns_name in mine])

    def on_new_device(self, customer_id: str, host: dict) -> DeviceState | None:
        cust = self.customer(customer_id)
        mac = host["mac"].lower()
        if mac in cust.devices or mac in cust.iads:
            return cust.devices.get(mac)
        url = host.get("mud_url")
        if url and self._is_svm_url(url):
            cust.iads.add(mac)
            self._signup(cust, mac, url)
            return None

        mark = allocate_mark(cust.marks)
        if mark is None:
            raise MudGuardError(f"{customer_id}: no DSCP marks left")
        dev = DeviceState(customer_id, mac, mark, mud_url=url, joined_at=self.clock())
        cust.devices[mac] = dev
        cust.marks[mark] = mac

        def applied(dev=dev):
            dev.mark_pending = False

        i = self.acs.add_object(cust.cpe_id, CLASSIFICATION)
        self.acs.set_param(cust.cpe_id, f"{CLASSIFICATION}{i}.SourceMACAddress", mac)
        self.acs.set_param(cust.cpe_id, f"{CLASSIFICATION}{i}.DSCPMark", mark, on_applied=applied)

        profile = self._fetch_profile(cust, dev, url) if url else None
        self.pipeline.install_device(customer_id, mark, profile.profile_id if profile else None)
        if profile is not None:
            dev.move_to(DeviceStatus.IDENTIFIED, profile.profile_id)
        if self.config.alert_on_new_device:
            self._emit(Alert(self.clock(), customer_id, mac, dev.profile_id, None, "new_device"))
        self.stats["devices_joined"] += 1
        return dev

    def retry_mud(self, customer_id: str, mac: str) -> None:
        cust = self.customer(customer_id)
        if mac in cust.iads:
            url = self.acs.cpes[cust.cpe_id].hosts[mac].mud_url
            self._signup(cust, mac, url)
            return
        dev = cust.devices[mac]
        if dev.status is not DeviceStatus.UNIDENTIFIED or not dev.mud_url:
            return
        profile = self._fetch_profile(cust, dev, dev.mud_url)
        if profile is not None:
            self.pipeline.reassign_device(customer_id, dev.mark, profile.profile_id)
            dev.move_to(DeviceStatus.IDENTIFIED, profile.profile_id)

    # -- P2P owner domains ----------------------------------------------------------

    def _signup(self, cust: Customer, mac: str, url: str) -> None:
        try:
            doc = parse_mud(self.fetch(url, cust.customer_id))
        except MudGuardError as exc:
            cust.signup_errors[mac] = exc
            self.stats["signup_failures"] += 1
            return
        cust.signup_errors.pop(mac, None)
        names = sorted(e.dns_name for e in doc.wld if e.dns_name and not e.is_placeholder)
        external = [n for n in names if ".int." not in n]
        internal = [n for n in names if ".int." in n]
        if not external:
            cust.signup_errors[mac] = MudError("SVM reply carries no owner domain")
            return
        self.set_owner_domain(cust.customer_id, external[0], internal[0] if internal else None)

    def set_owner_domain(self, customer_id: str, owner: str, internal: str | None = None) -> None:
        cust = self.customer(customer_id)
        cust.owner_domain = owner
        cust.internal_domain = internal or internal_owner_domain(owner)
        for mac in sorted(cust.pending_placeholder):
            dev = cust.devices[mac]
            profile = self.profiles[dev.profile_id]
            view = self._owner_view(cust, dev, profile)
            if view.profile_id != dev.profile_id:
                self.pipeline.reassign_device(customer_id, dev.mark, view.profile_id)
                dev.move_to(DeviceStatus.IDENTIFIED, view.profile_id)
        cust.pending_placeholder.clear()

    def owner_domain(self, customer_id: str) -> str | None:
        return self.customer(customer_id).owner_domain

    # -- verdict handling ----------------------------------------------------------

    def on_verdict(self, v: Verdict, p: Packet) -> tuple[str, str | None]:
        """Act on a pipeline verdict; returns ``(outcome, profile_id)``."""
        if isinstance(v, Ignored):
            return "ignored", None
        if isinstance(v, Legitimate):
            return "legitimate", v.profile_id
        if isinstance(v, Violation):
            out = self.handle_violation(v)
            return (out.outcome if isinstance(out, Suppressed) else "alert"), v.profile_id
        return self.on_unidentified(v)

    def _attribute(self, cust: Customer, mark: int) -> DeviceState | None:
        if mark == DEFAULT_MARK:
            window = self.config.default_mark_window
            now = self.clock()
            recent = [
                d for d in cust.devices.values()
                if d.mark_pending and (window is None or now - d.joined_at <= window)
            ]
            if len(recent) != 1:
                self.stats["default_mark_ambiguous"] += 1
                return None
            return recent[0]
        mac = cust.marks.get(mark)
        return cust.devices.get(mac) if mac else None

    def on_unidentified(self, v: Unidentified) -> tuple[str, str | None]:
        cust = self.customers.get(v.customer)
        dev = self._attribute(cust, v.mark) if cust else None
        if dev is None:
            self.stats["unattributed"] += 1
            return "unidentified", None
        if dev.status is DeviceStatus.IDENTIFIED and v.mark == DEFAULT_MARK:
            # early packet of a device whose mark has not landed yet
            wl = self.active.whitelists.get(dev.profile_id)
            if wl is not None and wl.contains(v.packet):
                return "legitimate", dev.profile_id
            out = self.handle_violation(Violation(dev.profile_id, v.customer, v.mark, v.packet), mac=dev.mac)
            return (out.outcome if isinstance(out, Suppressed) else "alert"), dev.profile_id
        if dev.status is DeviceStatus.UNIDENTIFIED:
            self.observe(dev, v.packet)
        return "unidentified", None

    def observe(self, dev: DeviceState, p: Packet) -> Decision | None:
        if p.kind is PayloadKind.DNS_QUERY and p.qname:
            dev.observed_domains.add(p.qname.lower().rstrip("."))
        else:
            dev.observed_endpoints.add((p.dst_ip, p.dst_port, p.protocol))
        return self._maybe_analyze(dev)

    def _maybe_analyze(self, dev: DeviceState) -> Decision | None:
        if dev.status is not DeviceStatus.UNIDENTIFIED or dev.needs_profile:
            return None
        if len(dev.observed_domains) < self.config.min_observations:
            return None
        if self.clock() - dev.joined_at < self.config.dwell_ticks:
            return None
        return self.analyze_unidentified(dev)

    def analyze_unidentified(self, dev: DeviceState) -> Decision:
        if dev.status is not DeviceStatus.UNIDENTIFIED:
            raise IllegalTransition(f"{dev.mac} is already {dev.status.value}")
        observed = dev.observed_domains
        candidates = sorted(
            pid for pid in set(self._type_profiles.values())
            if observed and observed <= self.profiles[pid].domains
        )
        if len(candidates) == 1:
            pid = candidates[0]
            self.pipeline.reassign_device(dev.customer_id, dev.mark, pid)
            dev.move_to(DeviceStatus.IDENTIFIED, pid)
            self.stats["matched_profiles"] += 1
            return Decision("matched", pid)
        if len(candidates) > 1:
            return Decision("undecided")
        if self.classifier(dev) == "non_iot":
            self.reclassify_non_iot(dev)
            return Decision("non_iot")
        dev.needs_profile = True
        self._emit(Alert(self.clock(), dev.customer_id, dev.mac, None, None, "unidentified_endpoint"))
        return Decision("new_iot")

    def reclassify_non_iot(self, dev: DeviceState) -> None:
        cust = self.customer(dev.customer_id)
        i = self.acs.cpes[cust.cpe_id].classification_instance(dev.mac)
        if i is not None:
            self.acs.set_param(cust.cpe_id, f"{CLASSIFICATION}{i}.DSCPMark", NO_CHANGE)
        self.pipeline.remove_device(dev.customer_id, dev.mark)
        dev.move_to(DeviceStatus.NON_IOT)
        self.stats["non_iot"] += 1

    def handle_violation(self, v: Violation, mac: str | None = None) -> Suppressed | AlertOutcome:
        p = v.packet
        if self.config.triggered_resolution:
            changed = self.apply_diffs(self.active.refresh([v.profile_id], fresh=True))
            self.stats["triggered_refreshes"] += 1
            wl = self.active.whitelists.get(v.profile_id)
            if wl is not None and wl.contains(p):
                self.stats["suppressed"] += 1
                return Suppressed(v.profile_id, changed > 0)
        cust = self.customers.get(v.customer)
        if mac is None and cust is not None:
            mac = cust.marks.get(v.mark)
        alert = self._emit(Alert(self.clock(), v.customer, mac, v.profile_id, p.key, "whitelist_violation"))
        rule_id = None
        if p.key not in self.blocked:
            self.blocked.add(p.key)
            rule = self.router.apply_acl(AclRequest(ConnectionScope(p.key, True), reason="whitelist_violation"))
            rule_id = rule.rule_id
        self._maybe_aggregate(v)
        return AlertOutcome(alert, rule_id)

    def _maybe_aggregate(self, v: Violation) -> None:
        net = ipaddress.IPv4Network(f"{v.packet.dst_ip}/{self.config.aggregate_prefix}", strict=False)
        targets = self._violation_targets[(v.customer, v.mark, net)]
        targets.add(v.packet.dst_ip)
        if len(targets) >= self.config.aggregate_threshold and net not in self.aggregated:
            self.aggregated.add(net)
            self.router.apply_acl(AclRequest(AggregateScope(net, "both"), reason="scan"))
            self.stats["aggregate_acls"] += 1

    # -- periodic work ----------------------------------------------------------------

    def refresh(self) -> int:
        self.last_refresh = self.clock()
        return self.apply_diffs(self.active.refresh())

    def tick(self) -> None:
        now = self.clock()
        if self.last_refresh is None or now - self.last_refresh >= self.config.refresh_period:
            self.refresh()
        while self._retries and self._retries[0][0] <= now:
            _, _, customer_id, mac = heapq.heappop(self._retries)
            self.retry_mud(customer_id, mac)
        for cust in self.customers.values():
            for dev in list(cust.devices.values()):
                self._maybe_analyze(dev)


class Vnf:
    """Receives packet copies from the router tap and runs the pipeline."""

    def __init__(self, pipeline: Pipeline, controller: Controller, capacity: int = 1 << 20):
        self.pipeline = pipeline
        self.controller = controller
        self.first_packet = FirstPacketFilter(capacity)
        self.copies = 0
        self.verdict_log: list[dict] = []
        self.log_seq: Callable[[], int] | None = None
        self.annotate: Callable[[Packet], dict] | None = None

    def receive_copy(self, p: Packet) -> Verdict | None:
        self.copies += 1
        if not self.first_packet(p.key):
            return None
        v = self.pipeline.process(p)
        outcome, profile_id = self.controller.on_verdict(v, p)
        if p.kind is PayloadKind.DNS_QUERY and isinstance(v, (Legitimate, Violation)):
            self.controller.stats["dns_queries_seen"] += 1
        entry = {
            "seq": self.log_seq() if self.log_seq else len(self.verdict_log),
            "ts": p.ts,
            "conn": list(p.key),
            "dscp": p.dscp,
            "verdict": v.kind,
            "profile_id": profile_id,
            "customer": getattr(v, "customer", None),
            "outcome": outcome,
        }
        if self.annotate is not None:
            entry.update(self.annotate(p))
        self.verdict_log.append(entry)
        return v
