"""The VNF data plane: a pipelined match-action classifier over packet copies.

Table layout::

    0   DSCP commonly used            -> drop            (21 filters)
        otherwise                     -> goto 1          (1 filter)
    1   src ip == customer ip         -> metadata, goto 2   (one per customer)
    2   (metadata, dscp) of a device  -> goto profile table, or controller
        dscp == default mark          -> controller      (1 global filter)
    X   dst ip (+port/proto) in WL_X  -> drop
        (port, proto) in WL_X         -> drop
        otherwise                     -> output 1        (one per profile)

Every control operation touches exactly one filter in one table. Profiles
beyond the table budget share tables and are told apart by a profile
metadata value written by their Table-2 filter.
"""

from __future__ import annotations

import itertools
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

from .errors import UnknownCustomer, UnknownDevice, UnknownTable
from .mud import WhitelistRow
from .net import COMMON_DSCP, DEFAULT_MARK, DSCP_NAMES, ConnKey, Packet

FIRST_PROFILE_TABLE = 3
DEFAULT_TABLE_BUDGET = 256


@dataclass(frozen=True)
class Action:
    kind: str  # drop | goto | controller | output
    table: int | None = None
    metadata: int | None = None
    port: int | None = None

    def __str__(self) -> str:
        if self.kind == "goto":
            meta = f"write_metadata:{self.metadata}," if self.metadata is not None else ""
            return f"{meta}goto_table:{self.table}"
        if self.kind == "output":
            return f"output:{self.port}"
        return self.kind


DROP = Action("drop")
TO_CONTROLLER = Action("controller")
OUTPUT_1 = Action("output", port=1)


@dataclass(eq=False, slots=True)
class Filter:
    uid: int
    table_id: int
    priority: int
    match: tuple[tuple[str, object], ...]
    action: Action
    counter: int = 0

    @property
    def signature(self) -> tuple:
        return (self.table_id, self.priority, self.match, self.action)

    def describe(self) -> str:
        match = ",".join(f"{k}={v}" for k, v in self.match) or "*"
        return (
            f"table={self.table_id} priority={self.priority} match={match} "
            f"actions={self.action} n_packets={self.counter}"
        )


@dataclass
class PipelineTable:
    table_id: int
    filters: dict[int, Filter] = field(default_factory=dict)
    default_action: Action = DROP


# -- verdicts ------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Ignored:
    reason: str
    kind = "ignored"


@dataclass(frozen=True, slots=True)
class Legitimate:
    profile_id: str
    customer: str
    kind = "legitimate"


@dataclass(frozen=True, slots=True)
class Violation:
    profile_id: str
    customer: str
    mark: int
    packet: Packet
    kind = "violation"


@dataclass(frozen=True, slots=True)
class Unidentified:
    customer: str
    mark: int
    packet: Packet
    kind = "unidentified"


Verdict = Ignored | Legitimate | Violation | Unidentified

UNMARKED = Ignored("unmarked")
UNKNOWN_SOURCE = Ignored("unknown_source")


@dataclass
class _ProfileSlot:
    profile_id: str
    table_id: int
    pmeta: int
    otherwise: Filter
    rows: dict[WhitelistRow, Filter] = field(default_factory=dict)
    by_addr: dict[str, list[tuple[WhitelistRow, Filter]]] = field(default_factory=dict)
    by_proto: dict[int | None, list[tuple[WhitelistRow, Filter]]] = field(default_factory=dict)


class FirstPacketFilter:
    """Admits one packet per connection key; bounded LRU over seen keys."""

    def __init__(self, capacity: int = 1 << 20):
        self.capacity = capacity
        self._seen: OrderedDict[ConnKey, None] = OrderedDict()
        self.evictions = 0

    def __call__(self, k: ConnKey) -> bool:
        seen = self._seen
        if k in seen:
            seen.move_to_end(k)
            return False
        seen[k] = None
        if len(seen) > self.capacity:
            seen.popitem(last=False)
            self.evictions += 1
        return True

    def evict(self, k: ConnKey) -> None:
        self._seen.pop(k, None)

    def __len__(self) -> int:
        return len(self._seen)


class Pipeline:
    def __init__(self, table_budget: int = DEFAULT_TABLE_BUDGET, fault_injection: str | None = None):
        if table_budget <= FIRST_PROFILE_TABLE:
            raise ValueError("table budget leaves no room for profile tables")
        self.table_budget = table_budget
        self.fault_injection = fault_injection
        self._uids = itertools.count(1)
        self._pmetas = itertools.count(1)
        self._cmetas = itertools.count(1)
        self._lock = threading.Lock()
        self.tables: dict[int, PipelineTable] = {
            0: PipelineTable(0, default_action=DROP),
            1: PipelineTable(1, default_action=DROP),
            2: PipelineTable(2, default_action=TO_CONTROLLER),
        }
        self._t0: dict[int, Filter] = {}
        for dscp in sorted(COMMON_DSCP):
            self._t0[dscp] = self._add(0, 100, (("dscp", dscp),), DROP)
        self._t0_fallthrough = self._add(0, 0, (), Action("goto", table=1))
        self._t1: dict[str, Filter] = {}
        self._customers: dict[str, int] = {}  # customer id -> metadata
        self._customer_ids: dict[int, str] = {}
        self._customer_ip: dict[str, str] = {}
        self._t2: dict[tuple[int, int], Filter] = {}
        self._device_profile: dict[tuple[int, int], str | None] = {}
        self._t2_default = self._add(2, 10, (("dscp", DEFAULT_MARK),), TO_CONTROLLER)
        self._profiles: dict[str, _ProfileSlot] = {}
        self._by_pmeta: dict[int, _ProfileSlot] = {}
        self._filter_count = len(self._t0) + 2
        self.processed = 0

    # -- filter bookkeeping ----------------------------------------------------

    def _add(self, table_id: int, priority: int, match, action: Action) -> Filter:
        f = Filter(next(self._uids), table_id, priority, tuple(match), action)
        self.tables[table_id].filters[f.uid] = f
        return f

    def _remove(self, f: Filter) -> None:
        del self.tables[f.table_id].filters[f.uid]

    def _table_for_new_profile(self) -> int:
        available = self.table_budget - FIRST_PROFILE_TABLE
        table_id = FIRST_PROFILE_TABLE + len(self._profiles) % available
        self.tables.setdefault(table_id, PipelineTable(table_id, default_action=OUTPUT_1))
        return table_id

    def _customer_meta(self, customer: str) -> int:
        try:
            return self._customers[customer]
        except KeyError:
            raise UnknownCustomer(customer) from None

    def _profile(self, profile_id: str) -> _ProfileSlot:
        try:
            return self._profiles[profile_id]
        except KeyError:
            raise UnknownTable(f"no table holds profile {profile_id}") from None

    def _device_action(self, profile_id: str | None) -> Action:
        if profile_id is None:
            return TO_CONTROLLER
        slot = self._profile(profile_id)
        return Action("goto", table=slot.table_id, metadata=slot.pmeta)

    # -- control operations (one filter each) ----------------------------------

    def install_customer(self, external_ip: str, customer: str | None = None) -> int:
        customer = customer or external_ip
        if customer in self._customers:
            return self._customers[customer]
        if external_ip in self._t1:
            raise ValueError(f"{external_ip} already belongs to another customer")
        with self._lock:
            meta = next(self._cmetas)
            self._t1[external_ip] = self._add(
                1, 100, (("src_ip", external_ip),), Action("goto", table=2, metadata=meta)
            )
            self._customers[customer] = meta
            self._customer_ids[meta] = customer
            self._customer_ip[customer] = external_ip
            self._filter_count += 1
        return meta

    def update_customer_ip(self, old: str, new: str) -> None:
        if old == new:
            return
        f = self._t1.get(old)
        if f is None:
            raise UnknownCustomer(old)
        if new in self._t1:
            raise ValueError(f"{new} already belongs to another customer")
        with self._lock:
            # rewrite in place: same filter slot, new match
            f.match = (("src_ip", new),)
            f.counter = 0
            del self._t1[old]
            self._t1[new] = f
            customer = self._customer_ids[f.action.metadata]
            self._customer_ip[customer] = new

    def customer_ip(self, customer: str) -> str:
        self._customer_meta(customer)
        return self._customer_ip[customer]

    def install_device(self, customer: str, mark: int, profile_id: str | None = None) -> None:
        meta = self._customer_meta(customer)
        key = (meta, mark)
        if key in self._t2:
            raise ValueError(f"device mark {mark} already installed for {customer}")
        action = self._device_action(profile_id)
        with self._lock:
            self._t2[key] = self._add(2, 100, (("metadata", meta), ("dscp", mark)), action)
            self._device_profile[key] = profile_id
            self._filter_count += 1

    def reassign_device(self, customer: str, mark: int, profile_id: str | None) -> None:
        key = (self._customer_meta(customer), mark)
        f = self._t2.get(key)
        if f is None:
            raise UnknownDevice(f"{customer}/{mark}")
        action = self._device_action(profile_id)
        with self._lock:
            f.action = action
            self._device_profile[key] = profile_id

    def remove_device(self, customer: str, mark: int) -> None:
        key = (self._customer_meta(customer), mark)
        f = self._t2.get(key)
        if f is None:
            raise UnknownDevice(f"{customer}/{mark}")
        with self._lock:
            self._remove(f)
            del self._t2[key]
            del self._device_profile[key]
            self._filter_count -= 1

    def device_profile(self, customer: str, mark: int) -> str | None:
        key = (self._customer_meta(customer), mark)
        if key not in self._t2:
            raise UnknownDevice(f"{customer}/{mark}")
        return self._device_profile[key]

    def has_device(self, customer: str, mark: int) -> bool:
        meta = self._customers.get(customer)
        return meta is not None and (meta, mark) in self._t2

    def install_profile(self, profile_id: str) -> int:
        """Create the profile's otherwise->Output 1 filter; returns its table id."""
        if profile_id in self._profiles:
            return self._profiles[profile_id].table_id
        with self._lock:
            table_id = self._table_for_new_profile()
            pmeta = next(self._pmetas)
            otherwise = self._add(table_id, 0, (("metadata", pmeta),), OUTPUT_1)
            slot = _ProfileSlot(profile_id, table_id, pmeta, otherwise)
            self._profiles[profile_id] = slot
            self._by_pmeta[pmeta] = slot
            self._filter_count += 1
        return table_id

    def has_profile(self, profile_id: str) -> bool:
        return profile_id in self._profiles

    def install_whitelist_entry(self, profile_id: str, row: WhitelistRow) -> None:
        slot = self._profile(profile_id)
        if row in slot.rows:
            return
        match: list[tuple[str, object]] = [("metadata", slot.pmeta)]
        if row.addr is not None:
            match.append(("dst_ip", row.addr))
        if row.port is not None:
            match.append((f"{row.port_side}_port", row.port))
        if row.protocol is not None:
            match.append(("protocol", row.protocol))
        priority = 200 if row.addr is not None else 100
        with self._lock:
            f = self._add(slot.table_id, priority, match, DROP)
            slot.rows[row] = f
            self._filter_count += 1
            if self.fault_injection == "drop_whitelist_row":
                return  # filter counted but never consulted
            if row.addr is not None:
                slot.by_addr.setdefault(row.addr, []).append((row, f))
            else:
                slot.by_proto.setdefault(row.protocol, []).append((row, f))

    def remove_whitelist_entry(self, profile_id: str, row: WhitelistRow) -> None:
        slot = self._profile(profile_id)
        f = slot.rows.get(row)
        if f is None:
            return
        with self._lock:
            self._remove(f)
            del slot.rows[row]
            index = slot.by_addr.get(row.addr) if row.addr is not None else slot.by_proto.get(row.protocol)
            if index is not None:
                index[:] = [(r, g) for r, g in index if g is not f]
            self._filter_count -= 1

    def whitelist_rows(self, profile_id: str) -> set[WhitelistRow]:
        return set(self._profile(profile_id).rows)

    def profile_table(self, profile_id: str) -> int:
        return self._profile(profile_id).table_id

    # -- data path --------------------------------------------------------------

    def process(self, p: Packet) -> Verdict:
        self.processed += 1
        dscp = p.dscp
        f = self._t0.get(dscp)
        if f is not None:
            f.counter += 1
            return UNMARKED
        self._t0_fallthrough.counter += 1

        f = self._t1.get(p.src_ip)
        if f is None:
            return UNKNOWN_SOURCE
        f.counter += 1
        meta = f.action.metadata
        customer = self._customer_ids[meta]

        f = self._t2.get((meta, dscp))
        if f is None:
            if dscp == DEFAULT_MARK:
                self._t2_default.counter += 1
            return Unidentified(customer, dscp, p)
        f.counter += 1
        action = f.action
        if action.kind != "goto":
            return Unidentified(customer, dscp, p)

        slot = self._by_pmeta[action.metadata]
        for row, g in slot.by_addr.get(p.dst_ip, ()):
            if row.matches(p):
                g.counter += 1
                return Legitimate(slot.profile_id, customer)
        for proto in (p.protocol, None):
            for row, g in slot.by_proto.get(proto, ()):
                if row.matches(p):
                    g.counter += 1
                    return Legitimate(slot.profile_id, customer)
        slot.otherwise.counter += 1
        return Violation(slot.profile_id, customer, dscp, p)

    # -- introspection --------------------------------------------------------------

    def filter_count(self) -> int:
        return self._filter_count

    def count_filters(self) -> int:
        """Recount by walking every table (slow; for cross-checking)."""
        return sum(len(t.filters) for t in self.tables.values())

    def filters(self):
        for table_id in sorted(self.tables):
            yield from sorted(
                self.tables[table_id].filters.values(),
                key=lambda f: (-f.priority, repr(f.match), f.uid),
            )

    def snapshot(self) -> dict[int, tuple]:
        return {f.uid: f.signature for t in self.tables.values() for f in t.filters.values()}

    def table_sizes(self) -> dict[int, int]:
        return {tid: len(t.filters) for tid, t in sorted(self.tables.items())}

    def profile_filter_count(self, profile_id: str) -> int:
        return len(self._profile(profile_id).rows) + 1

    def device_counters(self) -> dict[str, int]:
        """Per-device activity: Table-2 counters keyed ``customer/mark``."""
        return {
            f"{self._customer_ids[meta]}/{mark}": f.counter for (meta, mark), f in sorted(self._t2.items())
        }

    def dump(self) -> str:
        lines = []
        for f in self.filters():
            line = f.describe()
            if f.table_id == 0 and f.match:
                line += f"  # {DSCP_NAMES[f.match[0][1]]}"
            lines.append(line)
        return "\n".join(lines) + "\n"


def diff_snapshots(before: dict[int, tuple], after: dict[int, tuple]) -> set[int]:
    """Filter uids added, removed or rewritten between two snapshots."""
    changed = set(before.keys() ^ after.keys())
    changed |= {uid for uid in before.keys() & after.keys() if before[uid] != after[uid]}
    return changed
