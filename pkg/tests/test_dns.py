import random

import pytest
from hypothesis import given, strategies as st

from mudguard.dns import (
    BYPASS_ALPHABET,
    ActiveResolver,
    DnsWorld,
    DnsZone,
    PoisonChannel,
    ResolverView,
    format_zone,
    parse_zone_file,
    update_record,
)
from mudguard.errors import NotAuthority, NxDomain
from mudguard.mud import AclEntry, MudProfile, WhitelistRow
from mudguard.net import TCP


class Clock:
    def __init__(self):
        self.now = 0

    def __call__(self):
        return self.now


def _world(clock):
    camco = DnsZone("camco.example", "camco", clock=clock)
    camco.set_record("api.camco.example", ["198.51.100.10"], 30)
    shared = DnsZone("shared.example", "shared", clock=clock)
    shared.set_record("cdn.shared.example", ["198.51.100.30"], 30)
    return DnsWorld([camco, shared]), camco, shared


def _profile(pid, *names):
    return MudProfile(pid, f"https://v.example/{pid}",
                      frozenset(AclEntry(n, dst_port=443, protocol=TCP) for n in names))


def test_only_the_authority_may_update():
    clock = Clock()
    _, camco, _ = _world(clock)
    update_record(camco, "api.camco.example", ["198.51.100.11"], "camco")
    assert camco.answer("api.camco.example")[0] == {"198.51.100.11"}
    assert camco.answer("api.camco.example")[1] == 30  # ttl kept
    with pytest.raises(NotAuthority):
        update_record(camco, "api.camco.example", ["6.6.6.6"], "mallory")
    with pytest.raises(NotAuthority):
        update_record(camco, "www.other.example", ["6.6.6.6"], "camco")
    assert [h[1:] for h in camco.history] == [("api.camco.example", ("198.51.100.10",)),
                                             ("api.camco.example", ("198.51.100.11",))]


def test_nxdomain_and_random_label_stripping():
    world, camco, _ = _world(Clock())
    with pytest.raises(NxDomain):
        world.query("nope.camco.example")
    with pytest.raises(NxDomain):
        world.query("www.unknown.example")
    with pytest.raises(NxDomain):
        world.query("abc.api.camco.example")
    camco.strip_random_label = True
    assert world.query("abc.api.camco.example")[0] == {"198.51.100.10"}


def test_cache_honours_ttl():
    clock = Clock()
    world, camco, _ = _world(clock)
    r = ResolverView(world, clock=clock)
    assert r.resolve("api.camco.example") == {"198.51.100.10"}
    camco.set_record("api.camco.example", ["198.51.100.11"], 30)
    clock.now = 29
    assert r.resolve("api.camco.example") == {"198.51.100.10"}
    clock.now = 30
    assert r.resolve("api.camco.example") == {"198.51.100.11"}
    assert world.queries == 2


def test_poisoning_secure_vs_insecure():
    clock = Clock()
    world, _, _ = _world(clock)
    chan = PoisonChannel()
    plain = ResolverView(world, clock=clock, poison=chan)
    secure = ResolverView(world, clock=clock, poison=chan, secure=True)
    assert chan.inject("api.camco.example", ["6.6.6.6"]) == 1
    assert plain.resolve("api.camco.example") == {"6.6.6.6"}
    assert secure.resolve("api.camco.example") == {"198.51.100.10"}


def test_bypass_uses_fresh_random_label():
    clock = Clock()
    world, camco, _ = _world(clock)
    camco.strip_random_label = True
    r = ResolverView(world, clock=clock, rng=random.Random(3))
    r.resolve("api.camco.example")
    camco.set_record("api.camco.example", ["198.51.100.11"], 30)
    assert r.resolve("api.camco.example", bypass_cache=True) == {"198.51.100.11"}
    labels = [k.split(".")[0] for k in r.cache if k != "api.camco.example"]
    assert len(labels) == 1 and len(labels[0]) == 12 and set(labels[0]) <= set(BYPASS_ALPHABET)
    # direct authority skips the label trick entirely
    d = ResolverView(world, clock=clock, direct_authority=True)
    assert d.resolve("api.camco.example", bypass_cache=True) == {"198.51.100.11"}


def test_shared_domain_is_queried_once():
    clock = Clock()
    world, _, shared = _world(clock)
    active = ActiveResolver(ResolverView(world, clock=clock))
    active.add_profile(_profile("a", "api.camco.example", "cdn.shared.example"))
    active.add_profile(_profile("b", "cdn.shared.example"))
    assert [d for _, d in active.query_log] == ["api.camco.example", "cdn.shared.example"]
    clock.now = 100
    shared.set_record("cdn.shared.example", ["198.51.100.31"], 30)
    diffs = active.refresh(["b"])
    assert active.queries_per_tick[100] == 1
    # profile a shares the domain, so it follows the new answer too
    assert sorted(d.profile_id for d in diffs) == ["a", "b"]
    assert WhitelistRow("198.51.100.31", 443, TCP) in active.whitelists["a"].wl
    assert WhitelistRow("198.51.100.30", 443, TCP) not in active.whitelists["a"].wl


def test_failed_lookup_keeps_previous_answer():
    clock = Clock()
    world, _, _ = _world(clock)
    view = ResolverView(world, clock=clock)
    active = ActiveResolver(view)
    active.add_profile(_profile("a", "api.camco.example"))
    view.failing.add("api.camco.example")
    clock.now = 100
    assert active.refresh() == []
    assert WhitelistRow("198.51.100.10", 443, TCP) in active.whitelists["a"].wl


def test_nxdomain_leaves_entry_unresolved():
    clock = Clock()
    world, _, _ = _world(clock)
    active = ActiveResolver(ResolverView(world, clock=clock))
    diff = active.add_profile(_profile("a", "missing.camco.example", "api.camco.example"))
    assert diff.added == {WhitelistRow("198.51.100.10", 443, TCP)}


names = st.lists(st.text("abcdef", min_size=1, max_size=5), min_size=1, max_size=3).map(
    lambda parts: ".".join(parts + ["z", "example"]))
addrs = st.frozensets(st.tuples(st.integers(0, 255), st.integers(0, 255)).map(lambda t: f"10.0.{t[0]}.{t[1]}"),
                      min_size=1, max_size=3)


@given(st.dictionaries(names, st.tuples(addrs, st.integers(1, 86400)), max_size=6))
def test_zone_file_roundtrip(records):
    z = DnsZone("z.example", "z")
    for name, (a, ttl) in records.items():
        z.set_record(name, a, ttl)
    z2 = DnsZone("z.example", "z")
    parse_zone_file(format_zone(z), z2)
    assert z2.records == z.records


def test_zone_file_rejects_garbage():
    with pytest.raises(ValueError):
        parse_zone_file("api.z.example 60 CNAME other", DnsZone("z.example", "z"))


def test_revalidate_skips_cached_answer():
    clock = Clock()
    world, camco, _ = _world(clock)
    r = ResolverView(world, clock=clock)
    r.resolve("api.camco.example")
    camco.set_record("api.camco.example", ["198.51.100.11"], 30)
    assert r.resolve("api.camco.example", revalidate=True) == {"198.51.100.11"}
    assert r.resolve("api.camco.example") == {"198.51.100.11"}  # re-cached


def test_fresh_refresh_sees_change_within_ttl():
    clock = Clock()
    world, camco, _ = _world(clock)
    active = ActiveResolver(ResolverView(world, clock=clock))
    active.add_profile(_profile("a", "api.camco.example"))
    camco.set_record("api.camco.example", ["198.51.100.11"], 30)
    clock.now = 5
    assert active.refresh(["a"]) == []
    (diff,) = active.refresh(["a"], fresh=True)
    assert diff.added == {WhitelistRow("198.51.100.11", 443, TCP)}
