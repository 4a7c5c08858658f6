"""Acceptance criteria, one test per criterion.

Each test records its outcome in ``conftest.ACCEPTANCE`` so the terminal
summary prints one PASS/FAIL line per criterion, then asserts.
"""

from __future__ import annotations

import random
import time

from mudguard.config import Config
from mudguard.harness import Simulation, load_scenario, oracle_check, run
from mudguard.harness.bench import bench, build_world, random_packets
from mudguard.harness.oracle import effective_verdict, expected_verdict
from mudguard.mud import WhitelistRow
from mudguard.net import COMMON_DSCP, TCP, UDP, Packet, allocatable_marks
from mudguard.pipeline import Pipeline, diff_snapshots

from conftest import ACCEPTANCE, SCENARIOS
from helpers import CAM_URL, CPE_URL, P2P_URL, PLUG_URL, SPEAKER_URL, THERMO_URL, device, join, scenario, sim

SHIPPED = sorted(SCENARIOS.glob("*.json"))


def record(ac: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[ac] = (bool(ok), detail)
    assert ok, f"{ac}: {detail}"


# -- randomized control-event sequences ------------------------------------------------

MAX_CUSTOMERS, MAX_DEVICES, MAX_PROFILES, MAX_ENTRIES = 20, 10, 15, 20
MARKS = allocatable_marks()


class Model:
    """Independent bookkeeping of what the pipeline should contain."""

    def __init__(self):
        self.ips: dict[str, str] = {}
        self.devices: dict[str, dict[int, str | None]] = {}
        self.rows: dict[str, set[WhitelistRow]] = {}
        self.next_ip = 1

    def expected(self) -> int:
        return 23 + sum(len(d) + 1 for d in self.devices.values()) + sum(len(r) + 1 for r in self.rows.values())


def control_sequence(seed: int, length: int = 200):
    """Yield ``(kind, apply)`` pairs; ``apply(pipe, model)`` performs one event."""
    rng = random.Random(seed)
    model = Model()
    for _ in range(length):
        choices = []
        if len(model.ips) < MAX_CUSTOMERS:
            choices.append("customer_join")
        if model.ips:
            choices.append("ip_change")
            if any(len(d) < MAX_DEVICES for d in model.devices.values()):
                choices += ["device_join"] * 3
        if any(model.devices.values()):
            choices += ["non_iot", "identify"]
        if len(model.rows) < MAX_PROFILES:
            choices.append("profile_install")
        if any(len(r) < MAX_ENTRIES for r in model.rows.values()):
            choices += ["new_whitelist_address"] * 3
        if any(model.rows.values()):
            choices.append("whitelist_address_gone")
        kind = rng.choice(choices)
        if kind == "customer_join":
            cust = f"c{len(model.ips):02d}"
            ip = f"100.64.{model.next_ip // 250}.{model.next_ip % 250 + 1}"
            model.next_ip += 1
            model.ips[cust], model.devices[cust] = ip, {}
            op = lambda p, c=cust, ip=ip: p.install_customer(ip, c)
        elif kind == "ip_change":
            cust = rng.choice(sorted(model.ips))
            old, new = model.ips[cust], f"100.65.{model.next_ip // 250}.{model.next_ip % 250 + 1}"
            model.next_ip += 1
            model.ips[cust] = new
            op = lambda p, o=old, n=new: p.update_customer_ip(o, n)
        elif kind == "device_join":
            cust = rng.choice(sorted(c for c, d in model.devices.items() if len(d) < MAX_DEVICES))
            mark = next(m for m in MARKS if m not in model.devices[cust])
            pid = rng.choice(sorted(model.rows) + [None]) if model.rows else None
            model.devices[cust][mark] = pid
            op = lambda p, c=cust, m=mark, pid=pid: p.install_device(c, m, pid)
        elif kind == "non_iot":
            cust = rng.choice(sorted(c for c, d in model.devices.items() if d))
            mark = rng.choice(sorted(model.devices[cust]))
            del model.devices[cust][mark]
            op = lambda p, c=cust, m=mark: p.remove_device(c, m)
        elif kind == "identify":
            if not model.rows:
                continue
            cust = rng.choice(sorted(c for c, d in model.devices.items() if d))
            mark = rng.choice(sorted(model.devices[cust]))
            others = sorted(k for k in model.rows if k != model.devices[cust][mark])
            if not others:
                continue
            pid = rng.choice(others)
            model.devices[cust][mark] = pid
            op = lambda p, c=cust, m=mark, pid=pid: p.reassign_device(c, m, pid)
        elif kind == "profile_install":
            pid = f"type{len(model.rows):02d}"
            model.rows[pid] = set()
            op = lambda p, pid=pid: p.install_profile(pid)
        elif kind == "new_whitelist_address":
            pid = rng.choice(sorted(k for k, r in model.rows.items() if len(r) < MAX_ENTRIES))
            while True:
                row = WhitelistRow(f"198.51.{rng.randrange(100)}.{rng.randrange(1, 255)}",
                                   rng.choice((None, 443, 8883)), rng.choice((None, TCP, UDP)))
                if row not in model.rows[pid]:
                    break
            model.rows[pid].add(row)
            op = lambda p, pid=pid, row=row: p.install_whitelist_entry(pid, row)
        else:
            pid = rng.choice(sorted(k for k, r in model.rows.items() if r))
            row = rng.choice(sorted(model.rows[pid], key=WhitelistRow.sort_key))
            model.rows[pid].discard(row)
            op = lambda p, pid=pid, row=row: p.remove_whitelist_entry(pid, row)
        yield kind, op, model


SEQUENCES = 200


def test_ac1_filter_count_formula():
    start = time.perf_counter()
    events = mismatches = 0
    for seed in range(SEQUENCES):
        pipe = Pipeline()
        for _, op, model in control_sequence(seed):
            op(pipe)
            events += 1
            mismatches += pipe.filter_count() != model.expected()
        mismatches += pipe.count_filters() != model.expected()
    elapsed = time.perf_counter() - start
    record("AC1", mismatches == 0 and elapsed < 10,
           f"{SEQUENCES} sequences, {events} events, {mismatches} mismatches, {elapsed:.2f}s (< 10s)")


def _controller_single_updates() -> dict[str, int]:
    """Drive the four event kinds through the control plane; diff size per kind."""
    cfg = {"min_observations": 1, "dwell_ticks": 0}
    s = sim([join(), join("home2", "100.64.0.12"), device("02:00:00:00:01:01", CAM_URL)], cfg)
    cpe, ctl = s.cpes["home1"], s.controller
    sizes = {}

    def measure(kind, fn):
        before = s.pipeline.snapshot()
        fn()
        sizes[kind] = len(diff_snapshots(before, s.pipeline.snapshot()))

    measure("ip_change", lambda: cpe.set_external_ip("100.64.0.99"))
    measure("device_join", lambda: cpe.connect_device("02:00:00:00:01:02", mud_url=CAM_URL))
    s.dns.zone_for("api.camco.example").set_record("api.camco.example", ["198.51.100.10", "198.51.100.12"])
    s.advance_to(s.now + 100)  # past the cached answer's TTL
    measure("new_whitelist_address", ctl.refresh)
    cpe.connect_device("02:00:00:00:01:03")
    dev = ctl.device("home1", "02:00:00:00:01:03")
    dev.observed_domains.update({"www.news.example", "www.mail.example"})
    ctl.classifier.hints[dev.mac] = "non_iot"
    measure("non_iot", lambda: ctl.analyze_unidentified(dev))
    return sizes


def test_ac2_single_update():
    counts: dict[str, int] = {}
    bad = 0
    for seed in range(SEQUENCES):
        pipe = Pipeline()
        for kind, op, _ in control_sequence(seed):
            before = pipe.snapshot()
            op(pipe)
            counts[kind] = counts.get(kind, 0) + 1
            bad += len(diff_snapshots(before, pipe.snapshot())) != 1
    ctl = _controller_single_updates()
    required = ("ip_change", "device_join", "new_whitelist_address", "non_iot")
    covered = all(counts.get(k, 0) > 0 for k in required)
    ok = bad == 0 and covered and all(v == 1 for v in ctl.values()) and set(ctl) == set(required)
    detail = ", ".join(f"{k}={counts.get(k, 0)}" for k in required)
    record("AC2", ok, f"pipeline: {bad} multi-filter updates ({detail}); control plane diffs {ctl}")


def _row_entry(row: WhitelistRow) -> dict:
    return {"dns_name": None, "ip_literal": row.addr, "port": row.port, "protocol": row.protocol,
            "direction": "device-to-cloud" if row.port_side == "dst" else "cloud-to-device"}


def _end_to_end_oracle(n_packets: int, seed: int = 3):
    """Full-stack run: 5 homes x 4 devices over 5 profiles, random traffic, growing zones."""
    rng = random.Random(seed)
    urls = [CAM_URL, THERMO_URL, PLUG_URL, SPEAKER_URL, CPE_URL]
    events = []
    for h in range(5):
        events.append(join(f"home{h}", f"100.64.1.{h + 1}"))
        for d in range(4):
            events.append(device(f"02:00:00:00:{h:02x}:{d:02x}", urls[(h + d) % 5], f"home{h}", ts=1))
    s = sim(sorted(events, key=lambda e: e["ts"]), {"enforce_acls": False}, seed=seed)
    addrs = sorted({a for z in s.dns.zones for (aa, _) in z.records.values() for a in aa})
    names = sorted({n for z in s.dns.zones for n in z.records if not n.startswith("_")})
    devices = [(f"home{h}", f"02:00:00:00:{h:02x}:{d:02x}") for h in range(5) for d in range(4)]
    for i in range(n_packets):
        if i % 500 == 499:
            # endpoints only grow here: a removed address stays whitelisted until
            # the next periodic refresh (see test_control for that window)
            name = rng.choice(names)
            zone = s.dns.zone_for(name)
            zone.set_record(name, zone.records[name][0] | {f"198.51.100.{rng.randrange(100, 110)}"})
        if i % 50 == 0:
            s.step()
        cust, mac = rng.choice(devices)
        host = s.cpes[cust].hosts[mac]
        dst = rng.choice(addrs) if rng.random() < 0.7 else f"203.0.113.{rng.randrange(1, 255)}"
        dport, proto = rng.choice(((443, TCP), (8883, TCP), (123, UDP), (53, UDP), (7547, TCP), (23, TCP)))
        s.send_lan(cust, Packet(host.ip, dst, 10000 + i % 50000, dport, proto, src_mac=mac, ts=s.now))
    return s


def test_ac3_oracle_equivalence():
    rng = random.Random(2024)
    pipe, rows, owned = build_world(rng, customers=5, devices=4, profiles=5, entries=20)
    packets = random_packets(rng, 10_000, owned, rows)
    customers = {ip for ip, _, _ in owned}
    device_profile = {(ip, m): pid for ip, m, pid in owned}
    entries = {pid: [_row_entry(r) for r in sorted(rs, key=WhitelistRow.sort_key)] for pid, rs in rows.items()}
    start = time.perf_counter()
    got = [pipe.process(p).kind for p in packets]
    elapsed = time.perf_counter() - start
    agree = 0
    for p, kind in zip(packets, got):
        if p.dscp in COMMON_DSCP or p.src_ip not in customers:
            want = "ignored"
        else:
            pid = device_profile.get((p.src_ip, p.dscp))
            want = expected_verdict(entries[pid] if pid else None, {}, tuple(p.key), p.dscp)
        agree += want == kind
    s = _end_to_end_oracle(10_000)
    res = oracle_check(s.report())
    ok = agree == len(packets) and elapsed < 5 and res.passed and res.checked >= 10_000
    record("AC3", ok, f"pipeline {agree}/{len(packets)} agree over {len(owned)} devices/5 profiles in "
                      f"{elapsed:.2f}s (< 5s); full stack {res.checked - len(res.diffs)}/{res.checked} agree")


def test_ac4_first_packet_economy():
    s = sim([join(), device("02:00:00:00:01:01", CAM_URL)])
    host = s.cpes["home1"].hosts["02:00:00:00:01:01"]
    before = s.pipeline.processed
    for _ in range(50):
        for c in range(1000):
            s.send_lan("home1", Packet(host.ip, "198.51.100.10", 10000 + c, 443, TCP, src_mac=host.mac, ts=s.now))
    processed = s.pipeline.processed - before
    record("AC4", processed == 1000, f"1000 connections x 50 packets: process() ran {processed} times, "
                                     f"{s.vnf.copies} copies mirrored")


def test_ac5_false_positive_elimination():
    sc = load_scenario(SCENARIOS / "fp_rotation.json")
    on = run(sc)
    off_sc = load_scenario(SCENARIOS / "fp_rotation.json")
    off_sc.config["triggered_resolution"] = False
    off = run(off_sc)
    ok = len(off.alerts) >= 1 and len(on.alerts) == 0
    record("AC5", ok, f"rotation mid-interval: {len(off.alerts)} alerts without triggered re-resolution, "
                      f"{len(on.alerts)} with it")


def test_ac6_bidirectional_enforcement():
    cam = "02:00:00:00:01:01"
    s = sim([join(), device(cam, CAM_URL)])
    host = s.cpes["home1"].hosts[cam]
    out = Packet(host.ip, "203.0.113.9", 50123, 23, TCP, src_mac=cam, ts=s.now)
    first = s.send_lan("home1", out)
    k = first.wan.key
    delivered_before = len(s.deliveries)
    for _ in range(20):
        s.step()
        s.send_lan("home1", out.with_(ts=s.now))
        r = k.reverse()
        s.send_wan(Packet(r.src_ip, r.dst_ip, r.src_port, r.dst_port, r.protocol, ts=s.now))
    leaked = len(s.deliveries) - delivered_before
    ok = first.verdict["outcome"] == "alert" and first.dropped == "acl" and leaked == 0
    record("AC6", ok, f"after ACL on {tuple(k)}: {leaked} of 40 replayed packets (k and reverse(k)) delivered")


def _fleet(cams_per_home: int):
    events = []
    for h in range(3):
        events.append(join(f"home{h}", f"100.64.2.{h + 1}"))
        events.append(device(f"02:00:00:00:{h:02x}:f0", THERMO_URL, f"home{h}", ts=1))
        for c in range(cams_per_home):
            events.append(device(f"02:00:00:00:{h:02x}:{c:02x}", CAM_URL, f"home{h}", ts=1 + c))
    events.sort(key=lambda e: e["ts"])
    events.append({"ts": 700, "type": "tick", "n": 1})
    s = sim(events)
    table_x = {t: n for t, n in s.pipeline.table_sizes().items() if t >= 3}
    return s.pipeline.table_sizes()[2], table_x, dict(s.active.queries_per_tick), s.pipeline.filter_count()


def test_ac7_per_type_scaling():
    t2_a, tx_a, q_a, total_a = _fleet(2)
    t2_b, tx_b, q_b, total_b = _fleet(4)
    ok = t2_b - t2_a == 6 and total_b - total_a == 6 and tx_a == tx_b and q_a == q_b
    record("AC7", ok, f"6 -> 12 cameras: Table-2 +{t2_b - t2_a}, total +{total_b - total_a}, "
                      f"profile tables {tx_a} vs {tx_b}, queries/tick equal={q_a == q_b}")


def test_ac8_svm_end_to_end():
    cam = "02:00:00:00:01:05"
    base = [
        join(),
        device(cam, P2P_URL),
        {"ts": 2, "type": "svm_account", "client": "phone", "mac": "02:00:00:00:0a:01", "customer": "home1"},
        {"ts": 3, "type": "svm_signup", "client": "phone", "customer": "home1"},
    ]
    s = sim(base)
    signed_up = s.signups[-1]["outcome"] == "completed"
    moves = ["198.18.7.21", "198.18.9.40", "100.64.0.99", "198.18.12.7", "198.18.3.3"]
    prior = s.cpes["home1"].external_ip
    results = []
    for i, new in enumerate(moves):
        ts = 20 + 100 * i
        s.apply({"ts": ts, "type": "iad_move", "client": "phone", "ext_ip": new, "int_ip": f"10.0.{i}.2"})
        _, back_new = s.apply({"ts": ts + 40, "type": "p2p", "customer": "home1", "mac": cam, "peer_ip": new})
        _, back_old = s.apply({"ts": ts + 41, "type": "p2p", "customer": "home1", "mac": cam, "peer_ip": prior})
        results.append((effective_verdict(back_new.verdict), effective_verdict(back_old.verdict)))
        prior = new
    moves_ok = all(r == ("legitimate", "violation") for r in results)
    guarded = []
    outside = list(base)
    outside[2] = {"ts": 2, "type": "svm_account", "client": "phone", "mac": "02:00:00:00:0a:01", "ext_ip": "198.18.0.1"}
    for events in (outside, base[:2] + [dict(base[2], two_factor="wrong"), base[3]],
                   base[:2] + [dict(base[2], two_factor="silent"), base[3]]):
        t = sim(events)
        dev = t.controller.device("home1", cam)
        guarded.append((t.signups[-1]["outcome"], t.controller.profiles[dev.profile_id].has_placeholder))
    guard_ok = all(out != "completed" and placeholder for out, placeholder in guarded)
    record("AC8", signed_up and moves_ok and guard_ok,
           f"5 moves (new, prior) = {results}; blocked sign-ups {[g[0] for g in guarded]}")


def _hybrid(extra_config=None, agent_off=False):
    sc = load_scenario(SCENARIOS / "hybrid_p2p.json")
    cfg = Config.from_dict({**sc.config, **(extra_config or {})})
    s = Simulation(sc, cfg)
    for i, ev in enumerate(sc.events):
        s.apply(ev)
        if agent_off and ev["type"] == "customer_join":
            s.agents[ev["customer"]].enabled = False
    return s


def test_ac9_hybrid_non_conflict():
    both = _hybrid()
    conflicts = [t for t in both.trips if t.local == "permit" and t.verdict is not None
                 and t.verdict["verdict"] != "ignored"]
    permitted = sum(t.local == "permit" for t in both.trips)
    no_agent = _hybrid(agent_off=True)
    no_vnf = _hybrid({"vnf_attached": False})

    def vnf_view(s, idx):
        t = s.trips[idx]
        return None if t.verdict is None else (t.verdict["conn"], t.verdict["verdict"], t.verdict["outcome"])

    vnf_own = [i for i, t in enumerate(both.trips) if t.local is None and t.verdict is not None]
    vnf_same = len(no_agent.trips) == len(both.trips) and all(
        vnf_view(both, i) == vnf_view(no_agent, i) for i in vnf_own)
    agent_same = both.agents["home1"].decisions == no_vnf.agents["home1"].decisions
    ok = permitted > 0 and not conflicts and vnf_same and agent_same and vnf_own
    record("AC9", ok, f"{permitted} agent-permitted packets, {len(conflicts)} also VNF-flagged; "
                      f"VNF verdicts unchanged without agent={vnf_same} ({len(vnf_own)} checked); "
                      f"agent decisions unchanged without VNF={agent_same}")


def test_ac10_off_path_safety():
    diffs = []
    total = 0
    for path in SHIPPED:
        sc = load_scenario(path)
        attached = Simulation(sc, Config.from_dict({**sc.config, "enforce_acls": False})).run()
        detached = Simulation(sc, Config.from_dict({**sc.config, "enforce_acls": False,
                                                    "vnf_attached": False})).run()
        total += len(attached.deliveries)
        if attached.deliveries != detached.deliveries:
            diffs.append(path.stem)
        assert detached.counters["copies"] == 0
    record("AC10", not diffs and total > 0,
           f"{len(SHIPPED)} scenarios, {total} deliveries compared byte-for-byte, differing: {diffs or 'none'}")


def _poison_run(seed: int, secure: bool) -> tuple[int, int]:
    """Return (bogus addresses seen in any resolved whitelist, checks made)."""
    rng = random.Random(seed)
    events = [join(), device("02:00:00:00:01:01", CAM_URL), device("02:00:00:00:01:02", THERMO_URL),
              device("02:00:00:00:01:03", SPEAKER_URL)]
    s = sim(events, {"secure_resolver": secure, "refresh_period": 50})
    names = sorted(set().union(*(p.domains for p in s.controller.profiles.values())))
    bogus = set()
    seen = checks = 0
    for step in range(40):
        kind = rng.random()
        if kind < 0.5:
            addr = f"6.6.{rng.randrange(256)}.{rng.randrange(1, 255)}"
            bogus.add(addr)
            s.apply({"ts": s.now, "type": "dns_poison", "name": rng.choice(names), "addrs": [addr]})
        elif kind < 0.7:
            name = rng.choice(names)
            s.apply({"ts": s.now, "type": "dns_zone_set", "name": name,
                     "addrs": [f"198.51.100.{rng.randrange(200, 250)}"]})
        elif kind < 0.85:
            s.apply({"type": "refresh"})
        else:
            s.apply({"type": "tick", "n": rng.randrange(1, 80)})
        for wl in s.active.whitelists.values():
            checks += 1
            seen += bool(wl.addresses & bogus)
    return seen, checks


def test_ac11_dns_poisoning_immunity():
    seen = checks = 0
    for seed in range(25):
        a, b = _poison_run(seed, secure=True)
        seen, checks = seen + a, checks + b
    # the same attack against an insecure resolver does get through
    insecure = sum(_poison_run(seed, secure=False)[0] for seed in range(5))
    record("AC11", seen == 0 and insecure > 0,
           f"secure: {seen} poisoned whitelists in {checks} checks over 25 attack runs; "
           f"insecure control: {insecure} poisoned")


def test_ac12_determinism_and_throughput():
    differing = [p.stem for p in SHIPPED if run(load_scenario(p)).to_json() != run(load_scenario(p)).to_json()]
    a = _end_to_end_oracle(2000, seed=9).report().to_json()
    b = _end_to_end_oracle(2000, seed=9).report().to_json()
    res = bench(200_000, seed=0)
    ok = not differing and a == b and res.pps >= 100_000
    record("AC12", ok, f"byte-identical reports for {len(SHIPPED) + 1} runs (differing: {differing or 'none'}); "
                       f"bench {res.pps:,.0f} pkt/s (artifact target >= 100,000)")
