"""Deterministic simulation: wires every component together and replays a scenario.

Time is an integer tick counter. Housekeeping (ACS queue, SVM keep-alives,
periodic refresh, MUD retries, ACL expiry) runs once per tick while the
clock is advanced to the next event's ``ts``.
"""

from __future__ import annotations

import itertools
import json
import logging
import random
from dataclasses import dataclass, field
from urllib.parse import urlsplit

from ..alerts import Alert
from ..config import Config
from ..control import Controller, DeviceStatus, HintClassifier, Vnf
from ..cpe import Acs, Cpe, Dropped
from ..cpe_wlm import LocalAgent
from ..dns import ActiveResolver, DnsWorld, DnsZone, PoisonChannel, ResolverView
from ..errors import MudFetchFailed, NxDomain, ScenarioParseError, SvmError
from ..mud import canonical_url
from ..net import TCP, UDP, Packet, PayloadKind
from ..pipeline import Pipeline
from ..svm import AccountState, Attachment, MappingService, TrackingClient, report, signup_flow
from ..wle import Blocked, BorderRouter
from .scenario import Scenario

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1
PORT_BASE = 50000


@dataclass
class Trip:
    """What happened to one packet sent by the harness."""

    sent: Packet
    wan: Packet | None = None
    dropped: str | None = None
    delivered: bool = False
    verdict: dict | None = None
    local: str | None = None


@dataclass
class RunReport:
    scenario: str
    seed: int
    config: dict
    alerts: list[dict]
    local_alerts: list[dict]
    acls: list[dict]
    counters: dict
    verdict_log: list[dict]
    filter_count_history: list[list]
    zone_history: list[list]
    profiles: dict[str, dict]
    signups: list[dict]
    deliveries: list[str]
    drops: list[list]

    def to_dict(self) -> dict:
        d = {"schema": REPORT_SCHEMA}
        d.update(self.__dict__)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @property
    def violation_alerts(self) -> list[dict]:
        return [a for a in self.alerts if a["reason"] == "whitelist_violation"]

    @property
    def exit_code(self) -> int:
        return 2 if self.violation_alerts else 0


def _flatten(prefix: str, value, out: list[tuple[str, object]]) -> None:
    if isinstance(value, dict):
        for k in sorted(value, key=str):
            _flatten(f"{prefix}.{k}" if prefix else str(k), value[k], out)
    else:
        out.append((prefix, value))


def metrics_text(report: RunReport) -> str:
    """Flat ``key value`` lines for scraping."""
    items: list[tuple[str, object]] = [
        ("alerts", len(report.alerts)),
        ("alerts.whitelist_violation", len(report.violation_alerts)),
        ("local_alerts", len(report.local_alerts)),
        ("acls", len(report.acls)),
        ("verdicts", len(report.verdict_log)),
        ("deliveries", len(report.deliveries)),
        ("drops", len(report.drops)),
    ]
    _flatten("counters", report.counters, items)
    return "".join(f"{k} {json.dumps(v) if isinstance(v, (bool, type(None))) else v}\n" for k, v in items)


def _entry_dict(e) -> dict:
    return {
        "direction": e.direction.value,
        "dns_name": e.dns_name,
        "ip_literal": e.ip_literal,
        "port": e.dst_port,
        "protocol": e.protocol,
    }


class Simulation:
    def __init__(self, scenario: Scenario, config: Config | None = None):
        self.scenario = scenario
        self.config = config if config is not None else Config.from_dict(scenario.config)
        cfg = self.config
        self.now = 0
        self._seq = itertools.count()
        self._ports = itertools.count(PORT_BASE)
        clock = self.clock

        self.dns = DnsWorld()
        for z in scenario.zones:
            zone = DnsZone(z.origin, z.authority, clock=clock)
            for name, addrs in sorted(z.records.items()):
                zone.set_record(name, addrs, z.ttl or cfg.default_ttl)
            self.dns.add_zone(zone)
        try:
            self.svm_zone = self.dns.zone_for(cfg.svm_parent)
            self.svm_zone.strip_random_label = True
        except NxDomain:
            self.svm_zone = self.dns.add_zone(
                DnsZone(cfg.svm_parent, MappingService.AUTHORITY, strip_random_label=True, clock=clock)
            )
        self.poison = PoisonChannel()
        self.resolver = ResolverView(
            self.dns,
            secure=cfg.secure_resolver,
            clock=clock,
            rng=random.Random(f"{scenario.seed}/resolver"),
            poison=self.poison,
            direct_authority=cfg.direct_authority,
        )
        self.active = ActiveResolver(self.resolver, cfg.bypass_suffixes)
        self.pipeline = Pipeline(cfg.table_budget, cfg.fault_injection)
        self.acs = Acs(clock, cfg.acs_apply_delay)
        self.router = BorderRouter(clock, cfg.acl_idle_expiry)
        self.router.enforce = cfg.enforce_acls
        self.svm = MappingService(
            self.svm_zone,
            rng=random.Random(f"{scenario.seed}/svm"),
            dual_records=cfg.svm_dual_records,
            max_attempts=cfg.two_factor_attempts,
            ttl=cfg.svm_ttl,
        )
        self.mud_files = {canonical_url(u): b for u, b in scenario.mud_files.items()}
        self.controller = Controller(
            self.pipeline, self.acs, self.active, self.router, self._fetch, cfg, clock=clock
        )
        self.vnf = Vnf(self.pipeline, self.controller, cfg.first_packet_capacity)
        self.vnf.log_seq = lambda: next(self._seq)
        self.vnf.annotate = self._annotate
        if cfg.vnf_attached:
            self.router.mirror_targets.append(self.vnf.receive_copy)

        self.cpes: dict[str, Cpe] = {}  # by customer id
        self.agents: dict[str, LocalAgent] = {}
        self.clients: dict[str, TrackingClient] = {}
        self.local_alerts: list[Alert] = []
        self.signups: list[dict] = []
        self.deliveries: list[str] = []
        self.drops: list[list] = []
        self.filter_count_history: list[list] = []
        self.trips: list[Trip] = []
        self._origin: dict | None = None
        self.fetches = 0

    def clock(self) -> int:
        return self.now

    # -- plumbing -----------------------------------------------------------------

    def _fetch(self, url: str, customer_id: str) -> bytes:
        if urlsplit(url).hostname == self.config.svm_parent:
            return self.svm.serve_mud(url, customer_id)
        self.fetches += 1
        data = self.mud_files.get(canonical_url(url))
        if data is None:
            raise MudFetchFailed(f"{url}: not found")
        return data

    def _annotate(self, p: Packet) -> dict:
        return {"origin": self._origin}

    def _origin_of(self, customer: str, mac: str | None) -> dict:
        profile = None
        cust = self.controller.customers.get(customer)
        if cust is not None and mac is not None:
            dev = cust.devices.get(mac)
            if dev is not None and dev.status is DeviceStatus.IDENTIFIED:
                profile = dev.profile_id
        return {"customer": customer, "mac": mac, "profile": profile}

    def _cpe(self, customer: str) -> Cpe:
        try:
            return self.cpes[customer]
        except KeyError:
            raise ScenarioParseError(f"unknown customer {customer!r}") from None

    def _deliver(self, where: str, p: Packet) -> None:
        self.deliveries.append(f"{where} {p.encode()}")

    def _drop(self, where: str, reason: str, p: Packet) -> None:
        self.drops.append([self.now, where, reason, list(p.key)])

    def _cpe_at(self, ip: str) -> tuple[str, Cpe] | None:
        for customer, cpe in self.cpes.items():
            if cpe.external_ip == ip:
                return customer, cpe
        return None

    def _wan(self, p: Packet, from_cpe: bool, trip: Trip) -> None:
        n = len(self.vnf.verdict_log)
        r = self.router.forward(p, outbound=from_cpe)
        if len(self.vnf.verdict_log) > n:
            trip.verdict = self.vnf.verdict_log[n]
        if isinstance(r, Blocked):
            self._drop("router", f"acl:{r.rule_id}", p)
            trip.dropped = "acl"
            return
        q = r.packet
        hit = self._cpe_at(q.dst_ip)
        if hit is None:
            self._deliver(f"wan/{q.dst_ip}", q)
            trip.delivered = True
            return
        customer, cpe = hit
        res = cpe.ingress(q)
        if isinstance(res, Dropped):
            self._drop(cpe.cpe_id, res.reason, q)
            trip.dropped = res.reason
            return
        mac, inner = res
        self._deliver(f"{customer}/{mac}", inner)
        trip.delivered = True

    def _local_decision(self, cpe: Cpe, before: int) -> str | None:
        agent = cpe.local_agent
        if agent is None or len(agent.decisions) == before:
            return None
        return agent.decisions[-1][1]

    def send_lan(self, customer: str, p: Packet) -> Trip:
        """A LAN host emits ``p`` (must carry ``src_mac``)."""
        cpe = self._cpe(customer)
        trip = Trip(p)
        agent = cpe.local_agent
        before = len(agent.decisions) if agent else 0
        if cpe.is_lan(p.dst_ip):
            res = cpe.lan_forward(p)
            trip.local = self._local_decision(cpe, before)
            if isinstance(res, Dropped):
                self._drop(cpe.cpe_id, res.reason, p)
                trip.dropped = res.reason
            else:
                self._deliver(f"{customer}/{res[0]}", res[1])
                trip.delivered = True
            self.trips.append(trip)
            return trip
        out = cpe.egress(p)
        trip.local = self._local_decision(cpe, before)
        if isinstance(out, Dropped):
            self._drop(cpe.cpe_id, out.reason, p)
            trip.dropped = out.reason
            self.trips.append(trip)
            return trip
        trip.wan = out
        self._origin = self._origin_of(customer, p.src_mac if out.src_ip != cpe.lan_ip else None)
        try:
            self._wan(out, True, trip)
        finally:
            self._origin = None
        self.trips.append(trip)
        return trip

    def send_wan(self, p: Packet) -> Trip:
        """A packet injected from the internet side."""
        trip = Trip(p, wan=p)
        self._origin = None
        self._wan(p, False, trip)
        self.trips.append(trip)
        return trip

    def device_packet(
        self, customer: str, mac: str, dst: str, dport: int, *, proto: int = TCP,
        sport: int | None = None, kind: str = "data", qname: str | None = None,
        answers: tuple[str, ...] = (),
    ) -> Trip:
        cpe = self._cpe(customer)
        host = cpe.hosts.get(mac.lower())
        if host is None:
            raise ScenarioParseError(f"{customer}: no host {mac}")
        p = Packet(
            host.ip, dst, next(self._ports) if sport is None else sport, dport, proto,
            src_mac=host.mac, kind=PayloadKind(kind), qname=qname, answers=tuple(answers), ts=self.now,
        )
        return self.send_lan(customer, p)

    # -- time -----------------------------------------------------------------------

    def step(self) -> None:
        self.now += 1
        self.acs.tick(self.now)
        for name in sorted(self.clients):
            client = self.clients[name]
            if client.account.state is AccountState.ACTIVE and client.due(self.now):
                report(client, self.svm, self.now)
        self.controller.tick()
        self.router.expire_idle()

    def advance_to(self, ts: int) -> None:
        while self.now < ts:
            self.step()

    # -- events -----------------------------------------------------------------------

    def run(self) -> RunReport:
        for ev in self.scenario.events:
            self.apply(ev)
        return self.report()

    def apply(self, ev: dict) -> object:
        if ev.get("ts") is not None:
            self.advance_to(ev["ts"])
        handler = getattr(self, "_ev_" + ev["type"])
        try:
            out = handler(ev)
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioParseError(f"event {ev!r}: {exc}") from exc
        self.filter_count_history.append([self.now, self.pipeline.filter_count()])
        return out

    def _ev_customer_join(self, ev: dict) -> str:
        customer = ev["customer"]
        if customer in self.cpes:
            raise ScenarioParseError(f"customer {customer!r} joined twice")
        cfg = self.config
        cpe = Cpe(
            ev.get("cpe", customer), ev["external_ip"],
            lan_prefix=ev.get("lan_prefix", "192.168.1."),
            clock=self.clock, default_mark_window=cfg.default_mark_window,
        )
        for h in ev.get("hosts", []):
            cpe.connect_device(h["mac"], h.get("hostname", ""), h.get("medium", "wired"), h.get("mud_url"))
        self.cpes[customer] = cpe
        self.acs.register(cpe)
        if cfg.hybrid:
            agent = LocalAgent(
                cpe, self.resolver, bypass_suffixes=cfg.bypass_suffixes,
                alert_only=cfg.local_alert_only, sink=self.local_alerts.append, customer_id=customer,
            )
            self.agents[customer] = agent
            self.controller.local_agents[cpe.cpe_id] = agent
        return self.controller.on_new_customer(cpe.cpe_id, customer)

    def _ev_device_join(self, ev: dict) -> None:
        cpe = self._cpe(ev["customer"])
        cpe.connect_device(ev["mac"], ev.get("hostname", ""), ev.get("medium", "wired"), ev.get("mud_url"))

    def _ev_device_leave(self, ev: dict) -> None:
        self._cpe(ev["customer"]).disconnect_device(ev["mac"])

    def _ev_packet(self, ev: dict) -> list[Trip]:
        proto = {"tcp": TCP, "udp": UDP}.get(ev.get("proto", TCP), ev.get("proto", TCP))
        sport = ev.get("sport", next(self._ports))
        trips = []
        for _ in range(ev.get("count", 1)):
            trip = self.device_packet(
                ev["customer"], ev["mac"], ev["dst"], ev["dport"], proto=proto, sport=sport,
                kind=ev.get("kind", "data"), qname=ev.get("qname"), answers=tuple(ev.get("answers", ())),
            )
            trips.append(trip)
            if ev.get("reply") and trip.delivered and trip.wan is not None:
                w = trip.wan
                self.send_wan(Packet(w.dst_ip, w.src_ip, w.dst_port, w.src_port, w.protocol, ts=self.now))
        return trips

    def _ev_inbound(self, ev: dict) -> Trip:
        cpe = self._cpe(ev["customer"])
        p = Packet(
            ev["src"], cpe.external_ip, ev.get("sport", next(self._ports)), ev["dport"],
            ev.get("proto", TCP), ts=self.now,
        )
        return self.send_wan(p)

    def _ev_trace(self, ev: dict) -> list[Trip]:
        path = self.scenario.trace_path(ev["file"])
        try:
            lines = path.read_text().splitlines()
        except OSError as exc:
            raise ScenarioParseError(f"trace {path}: {exc}") from exc
        trips = []
        for line in lines:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            p = Packet.decode(line)
            if p.ts < self.now:
                raise ScenarioParseError(f"trace {path}: ts {p.ts} goes backwards")
            self.advance_to(p.ts)
            trips.append(self.send_lan(ev["customer"], p))
        return trips

    def _ev_p2p(self, ev: dict) -> tuple[Trip, Trip | None]:
        """A peer (usually an IAD) opens a connection to a LAN device, which answers."""
        customer = ev["customer"]
        cpe = self._cpe(customer)
        dev = cpe.hosts[ev["mac"].lower()]
        port, proto = ev.get("port", 554), ev.get("proto", TCP)
        sport = ev.get("sport", next(self._ports))
        client = self.clients.get(ev["client"]) if "client" in ev else None
        if client is not None and client.current_network.cpe_id == cpe.cpe_id and "peer_ip" not in ev:
            src = cpe.hosts[client.mac].ip if client.mac in cpe.hosts else client.current_network.internal_ip
            hello = Packet(src, dev.ip, sport, port, proto, src_mac=client.mac, ts=self.now)
            first = self.send_lan(customer, hello)
            if not first.delivered:
                return first, None
            back = Packet(dev.ip, src, port, sport, proto, src_mac=dev.mac, ts=self.now)
            return first, self.send_lan(customer, back)
        peer = ev.get("peer_ip") or (client.current_network.external_ip if client else None)
        if peer is None:
            raise ScenarioParseError("p2p needs a client or a peer_ip")
        if (port, proto) not in cpe.port_forwards:
            cpe.add_port_forward(port, dev.mac, port, proto)
        first = self.send_wan(Packet(peer, cpe.external_ip, sport, port, proto, ts=self.now))
        if not first.delivered:
            return first, None
        back = Packet(dev.ip, peer, port, sport, proto, src_mac=dev.mac, ts=self.now)
        return first, self.send_lan(customer, back)

    def _ev_tick(self, ev: dict) -> None:
        self.advance_to(self.now + int(ev["n"]))

    def _ev_refresh(self, ev: dict) -> int:
        return self.controller.refresh()

    def _ev_ip_change(self, ev: dict) -> None:
        cpe = self._cpe(ev["customer"])
        cpe.set_external_ip(ev["ip"])
        # apps behind this CPE notice their new public address right away
        for name in sorted(self.clients):
            client = self.clients[name]
            net = client.current_network
            if net.cpe_id == cpe.cpe_id:
                client.move(ev["ip"], net.internal_ip, cpe.cpe_id)
                if client.account.state is AccountState.ACTIVE:
                    report(client, self.svm, self.now)

    def _ev_dns_zone_set(self, ev: dict) -> None:
        zone = self.dns.zone_for(ev["name"])
        addrs = ev["addrs"]
        if addrs:
            old = zone.records.get(ev["name"].lower())
            ttl = ev.get("ttl") or (old[1] if old else self.config.default_ttl)
            zone.set_record(ev["name"], addrs, ttl)
        else:
            zone.delete_record(ev["name"])

    def _ev_dns_poison(self, ev: dict) -> int:
        return self.poison.inject(ev["name"], ev["addrs"], ev.get("ttl", 86400))

    def _ev_dns_fail(self, ev: dict) -> None:
        name = ev["name"].lower()
        if ev.get("on", True):
            self.resolver.failing.add(name)
        else:
            self.resolver.failing.discard(name)

    def _ev_classify_oracle_hint(self, ev: dict) -> None:
        if ev["verdict"] not in ("new_iot", "non_iot"):
            raise ValueError(f"verdict must be new_iot or non_iot, got {ev['verdict']!r}")
        classifier = self.controller.classifier
        if not isinstance(classifier, HintClassifier):
            raise ScenarioParseError("the configured classifier takes no hints")
        classifier.hints[ev["mac"].lower()] = ev["verdict"]

    def _set_two_factor(self, contact: str, mode: str) -> None:
        channel = self.svm.channel
        if mode == "confirm":
            channel.honest_user(contact)
        elif mode == "wrong":
            channel.responders[contact] = lambda c, attempt: "wrong-code"
        elif mode == "silent":
            channel.responders.pop(contact, None)
        else:
            raise ValueError(f"unknown two_factor mode {mode!r}")

    def _ev_svm_account(self, ev: dict) -> TrackingClient:
        name = ev["client"]
        if name in self.clients:
            raise ScenarioParseError(f"client {name!r} exists")
        email = ev.get("email", None if ev.get("phone") else f"{name}@mail.example")
        acct = self.svm.create_account(email=email, phone=ev.get("phone"))
        self._set_two_factor(acct.contact, ev.get("two_factor", "confirm"))
        cpe_id = None
        ext, internal = ev.get("ext_ip", "198.18.0.1"), ev.get("int_ip", "10.0.0.2")
        if "customer" in ev:
            cpe = self._cpe(ev["customer"])
            cpe_id, ext = cpe.cpe_id, cpe.external_ip
        client = TrackingClient(
            acct, ev["mac"], Attachment(ext, internal, cpe_id),
            client_id=name, report_interval=self.config.keepalive_interval,
        )
        self.clients[name] = client
        return client

    def _ev_svm_signup(self, ev: dict) -> dict:
        client = self.clients[ev["client"]]
        cpe = self._cpe(ev["customer"])
        if "two_factor" in ev:
            self._set_two_factor(client.account.contact, ev["two_factor"])
        try:
            result = signup_flow(client, cpe, self.controller, self.svm)
            outcome = "completed" if type(result).__name__ == "Completed" else f"rejected:{result.reason}"
        except SvmError as exc:
            outcome = type(exc).__name__
        if outcome == "completed":
            host = cpe.hosts[client.mac]
            client.move(cpe.external_ip, host.ip, cpe.cpe_id)
            report(client, self.svm, self.now)
        rec = {"ts": self.now, "client": ev["client"], "customer": ev["customer"], "outcome": outcome}
        self.signups.append(rec)
        return rec

    def _ev_iad_move(self, ev: dict) -> None:
        client = self.clients[ev.get("client") or ev["account"]]
        cpe_id = self._cpe(ev["customer"]).cpe_id if "customer" in ev else None
        client.move(ev["ext_ip"], ev["int_ip"], cpe_id)
        if client.account.state is AccountState.ACTIVE:
            report(client, self.svm, self.now)

    def _ev_local_agent(self, ev: dict) -> None:
        agent = self.agents.get(ev["customer"])
        if agent is None:
            raise ScenarioParseError(f"{ev['customer']}: no local agent (hybrid mode is off)")
        agent.enabled = bool(ev["enabled"])

    # -- output ----------------------------------------------------------------------------

    def zone_history(self) -> list[list]:
        rows = []
        for zone in sorted(self.dns.zones, key=lambda z: z.origin):
            rows.extend([ts, name, list(addrs)] for ts, name, addrs in zone.history)
        rows.sort(key=lambda r: r[0])
        return rows

    def counters(self) -> dict:
        return {
            "filter_count": self.pipeline.filter_count(),
            "table_sizes": {str(k): v for k, v in self.pipeline.table_sizes().items()},
            "device_counters": self.pipeline.device_counters(),
            "processed": self.pipeline.processed,
            "copies": self.vnf.copies,
            "mirrored": self.router.mirrored,
            "active_queries": sum(self.active.queries_per_tick.values()),
            "dns_queries": self.dns.queries,
            "mud_fetches": self.fetches,
            "acs_requests": self.acs.requests,
            "control": dict(sorted(self.controller.stats.items())),
        }

    def report(self) -> RunReport:
        return RunReport(
            scenario=self.scenario.name,
            seed=self.scenario.seed,
            config=self.config.to_dict(),
            alerts=[a.to_dict() for a in self.controller.alerts],
            local_alerts=[a.to_dict() for a in self.local_alerts],
            acls=self.router.export(),
            counters=self.counters(),
            verdict_log=list(self.vnf.verdict_log),
            filter_count_history=list(self.filter_count_history),
            zone_history=self.zone_history(),
            profiles={
                pid: {
                    "mud_url": p.mud_url,
                    "owner_domain": p.owner_domain,
                    "entries": [_entry_dict(e) for e in p.entries()],
                }
                for pid, p in sorted(self.controller.profiles.items())
            },
            signups=list(self.signups),
            deliveries=list(self.deliveries),
            drops=list(self.drops),
        )


def run(scenario: Scenario, config: Config | None = None) -> RunReport:
    return Simulation(scenario, config).run()
