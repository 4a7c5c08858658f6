"""Simulated DNS: authoritative zones, resolvers with caches, and the
active-query refresher that keeps resolved whitelists current."""

from __future__ import annotations

import logging
import random
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .errors import NotAuthority, NxDomain, ResolverFailure
from .mud import MudProfile, ResolvedWhitelist, WhitelistRow, rows_for_entry

log = logging.getLogger(__name__)

DEFAULT_TTL = 60
BYPASS_ALPHABET = string.ascii_lowercase + "234567"


def _norm(name: str) -> str:
    return name.lower().rstrip(".")


@dataclass
class DnsZone:
    """An authoritative zone. ``origin`` is the parent domain it serves."""

    origin: str
    authority: str
    records: dict[str, tuple[frozenset[str], int]] = field(default_factory=dict)
    strip_random_label: bool = False
    history: list[tuple[int, str, tuple[str, ...]]] = field(default_factory=list)
    clock: Callable[[], int] = lambda: 0

    def covers(self, name: str) -> bool:
        name = _norm(name)
        return name == self.origin or name.endswith("." + self.origin)

    def answer(self, qname: str) -> tuple[frozenset[str], int]:
        qname = _norm(qname)
        if qname in self.records:
            return self.records[qname]
        if self.strip_random_label:
            _, _, rest = qname.partition(".")
            if rest in self.records:
                return self.records[rest]
        raise NxDomain(qname)

    def set_record(self, name: str, addrs: Iterable[str], ttl: int = DEFAULT_TTL) -> None:
        addrs = frozenset(addrs)
        if not addrs:
            raise ValueError("a record needs at least one address")
        name = _norm(name)
        self.records[name] = (addrs, ttl)
        self.history.append((self.clock(), name, tuple(sorted(addrs))))

    def delete_record(self, name: str) -> None:
        name = _norm(name)
        self.records.pop(name, None)
        self.history.append((self.clock(), name, ()))


def update_record(zone: DnsZone, name: str, addrs: Iterable[str], caller: str, ttl: int | None = None) -> None:
    if caller != zone.authority:
        raise NotAuthority(f"{caller!r} is not the authority for {zone.origin}")
    if not zone.covers(name):
        raise NotAuthority(f"{name} is outside {zone.origin}")
    old = zone.records.get(_norm(name))
    zone.set_record(name, addrs, ttl if ttl is not None else (old[1] if old else DEFAULT_TTL))


class DnsWorld:
    """All authoritative zones reachable from the simulated internet."""

    def __init__(self, zones: Iterable[DnsZone] = ()):
        self.zones: list[DnsZone] = list(zones)
        self.queries = 0

    def add_zone(self, zone: DnsZone) -> DnsZone:
        self.zones.append(zone)
        # most specific origin first
        self.zones.sort(key=lambda z: -len(z.origin))
        return zone

    def zone_for(self, name: str) -> DnsZone:
        for zone in self.zones:
            if zone.covers(name):
                return zone
        raise NxDomain(name)

    def query(self, qname: str) -> tuple[frozenset[str], int]:
        self.queries += 1
        return self.zone_for(qname).answer(qname)

    def truth(self, name: str) -> frozenset[str]:
        """Current authoritative answer, without counting a query."""
        try:
            return self.zone_for(name).answer(name)[0]
        except NxDomain:
            return frozenset()


class PoisonChannel:
    """Off-path injection of forged answers into resolver caches."""

    def __init__(self):
        self.resolvers: list[ResolverView] = []
        self.injected: list[tuple[str, tuple[str, ...]]] = []

    def inject(self, name: str, addrs: Iterable[str], ttl: int = 86400) -> int:
        addrs = tuple(sorted(addrs))
        self.injected.append((_norm(name), addrs))
        return sum(r.accept_poison(name, addrs, ttl) for r in self.resolvers)


class ResolverView:
    def __init__(
        self,
        upstream: DnsWorld,
        *,
        secure: bool = False,
        clock: Callable[[], int] = lambda: 0,
        rng: random.Random | None = None,
        poison: PoisonChannel | None = None,
        direct_authority: bool = False,
    ):
        self.upstream = upstream
        self.secure = secure
        self.clock = clock
        self.rng = rng or random.Random(0)
        self.direct_authority = direct_authority
        self.cache: dict[str, tuple[frozenset[str], int]] = {}
        self.failing: set[str] = set()
        if poison is not None:
            poison.resolvers.append(self)

    def accept_poison(self, name: str, addrs, ttl: int) -> bool:
        if self.secure:
            return False
        self.cache[_norm(name)] = (frozenset(addrs), self.clock() + ttl)
        return True

    def bypass_label(self) -> str:
        return "".join(self.rng.choice(BYPASS_ALPHABET) for _ in range(12))

    def resolve(self, name: str, bypass_cache: bool = False, revalidate: bool = False) -> frozenset[str]:
        """Answer ``name``. ``revalidate`` skips the cached answer and re-caches
        a fresh one; ``bypass_cache`` leaves the real name's cache entry alone."""
        name = _norm(name)
        if name in self.failing:
            raise ResolverFailure(name)
        if bypass_cache:
            if self.direct_authority:
                return self.upstream.query(name)[0]
            qname = f"{self.bypass_label()}.{name}"
            addrs, ttl = self.upstream.query(qname)
            self.cache[qname] = (addrs, self.clock() + ttl)
            return addrs
        now = self.clock()
        hit = None if revalidate else self.cache.get(name)
        if hit is not None and hit[1] > now:
            return hit[0]
        addrs, ttl = self.upstream.query(name)
        self.cache[name] = (addrs, now + ttl)
        return addrs


@dataclass(frozen=True)
class WhitelistDiff:
    profile_id: str
    added: frozenset[WhitelistRow]
    removed: frozenset[WhitelistRow]

    def __bool__(self) -> bool:
        return bool(self.added or self.removed)


class ActiveResolver:
    """Resolves the domain lists of all installed profiles, once per domain.

    Answers are shared between profiles, so a domain that appears in several
    profiles costs one query per refresh.
    """

    def __init__(self, resolver: ResolverView, bypass_suffixes: Iterable[str] = ()):
        self.resolver = resolver
        self.bypass_suffixes = tuple(_norm(s) for s in bypass_suffixes)
        self.answers: dict[str, frozenset[str]] = {}
        self.whitelists: dict[str, ResolvedWhitelist] = {}
        self.profiles: dict[str, MudProfile] = {}
        self.queries_per_tick: Counter[int] = Counter()
        self.query_log: list[tuple[int, str]] = []

    def _bypass(self, name: str) -> bool:
        return any(name == s or name.endswith("." + s) for s in self.bypass_suffixes)

    def _query(self, domain: str, fresh: bool = False) -> bool:
        """Refresh one domain. Returns False when the lookup failed."""
        now = self.resolver.clock()
        self.queries_per_tick[now] += 1
        self.query_log.append((now, domain))
        try:
            self.answers[domain] = self.resolver.resolve(
                domain, bypass_cache=self._bypass(domain), revalidate=fresh
            )
        except (NxDomain, ResolverFailure) as exc:
            log.info("active query for %s failed: %r; keeping previous answer", domain, exc)
            return False
        return True

    def _rebuild(self, profile: MudProfile) -> WhitelistDiff:
        ts = self.resolver.clock()
        new = ResolvedWhitelist.build(profile, self.answers, ts)
        old = self.whitelists.get(profile.profile_id)
        self.whitelists[profile.profile_id] = new
        if old is None:
            return WhitelistDiff(profile.profile_id, frozenset(new.wl), frozenset())
        return WhitelistDiff(profile.profile_id, frozenset(new.wl - old.wl), frozenset(old.wl - new.wl))

    def add_profile(self, profile: MudProfile) -> WhitelistDiff:
        """Register a profile and resolve the domains nobody has resolved yet."""
        self.profiles[profile.profile_id] = profile
        for domain in sorted(profile.domains - self.answers.keys()):
            self._query(domain)
        return self._rebuild(profile)

    def remove_profile(self, profile_id: str) -> None:
        self.profiles.pop(profile_id, None)
        self.whitelists.pop(profile_id, None)

    def refresh(self, profile_ids: Iterable[str] | None = None, fresh: bool = False) -> list[WhitelistDiff]:
        """Re-resolve every domain of the given profiles (default: all).

        With ``fresh`` set, cached answers are not trusted: used when a
        violation suggests the cached view is out of date.
        """
        ids = sorted(self.profiles) if profile_ids is None else sorted(set(profile_ids))
        domains = set().union(*(self.profiles[i].domains for i in ids)) if ids else set()
        for domain in sorted(domains):
            self._query(domain, fresh)
        # profiles sharing a refreshed domain must follow the new answer too
        affected = sorted(i for i, p in self.profiles.items() if i in ids or p.domains & domains)
        diffs = [self._rebuild(self.profiles[i]) for i in affected]
        return [d for d in diffs if d]


def refresh_whitelists(active: ActiveResolver, profiles: Iterable[MudProfile]) -> list[WhitelistDiff]:
    profiles = list(profiles)
    for p in profiles:
        if p.profile_id not in active.profiles:
            active.profiles[p.profile_id] = p
    return active.refresh([p.profile_id for p in profiles])


def parse_zone_file(text: str, zone: DnsZone) -> None:
    """Load ``name TTL A addr[,addr...]`` lines into ``zone``."""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4 or parts[2].upper() != "A":
            raise ValueError(f"zone line {lineno}: expected 'name TTL A addr[,addr]'")
        name, ttl, _, addrs = parts
        zone.set_record(name, [a for a in addrs.split(",") if a], int(ttl))


def format_zone(zone: DnsZone) -> str:
    return "".join(
        f"{name} {ttl} A {','.join(sorted(addrs))}\n" for name, (addrs, ttl) in sorted(zone.records.items())
    )
