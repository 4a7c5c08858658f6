"""Throughput benchmark for the pipeline data path."""

from __future__ import annotations

import random
import time
from dataclasses import dataclass

from ..mud import WhitelistRow
from ..net import COMMON_DSCP, TCP, UDP, Packet, allocatable_marks
from ..pipeline import Pipeline


@dataclass(frozen=True)
class BenchResult:
    packets: int
    seconds: float

    @property
    def pps(self) -> float:
        return self.packets / self.seconds if self.seconds > 0 else float("inf")


def build_world(
    rng: random.Random,
    customers: int = 20,
    devices: int = 10,
    profiles: int = 15,
    entries: int = 20,
) -> tuple[Pipeline, dict[str, set[WhitelistRow]], list[tuple[str, int, str]]]:
    """A populated pipeline plus ``(external ip, mark, profile)`` per device."""
    pipe = Pipeline()
    rows_by_profile: dict[str, set[WhitelistRow]] = {}
    for j in range(profiles):
        pid = f"p{j:02d}"
        pipe.install_profile(pid)
        rows = set()
        while len(rows) < entries:
            if rng.random() < 0.1:
                row = WhitelistRow(None, rng.choice((53, 123, 443, 8883)), rng.choice((TCP, UDP)))
            else:
                row = WhitelistRow(
                    f"198.51.{rng.randrange(100)}.{rng.randrange(1, 255)}",
                    rng.choice((None, 443, 8883)),
                    rng.choice((None, TCP, UDP)),
                    rng.choice(("dst", "dst", "src")),
                )
            rows.add(row)
        for row in sorted(rows, key=WhitelistRow.sort_key):
            pipe.install_whitelist_entry(pid, row)
        rows_by_profile[pid] = rows
    marks = allocatable_marks()
    owned = []
    for c in range(customers):
        ip = f"203.0.{c // 250}.{c % 250 + 1}"
        cust = f"c{c:03d}"
        pipe.install_customer(ip, cust)
        for d in range(devices):
            pid = f"p{rng.randrange(profiles):02d}"
            pipe.install_device(cust, marks[d], pid)
            owned.append((ip, marks[d], pid))
    return pipe, rows_by_profile, owned


def random_packets(
    rng: random.Random,
    n: int,
    owned: list[tuple[str, int, str]],
    rows_by_profile: dict[str, set[WhitelistRow]],
) -> list[Packet]:
    """A mix of whitelisted, off-whitelist, unmarked and stranger packets."""
    rows_sorted = {pid: sorted(rows, key=WhitelistRow.sort_key) for pid, rows in rows_by_profile.items()}
    common = sorted(COMMON_DSCP)
    out = []
    for i in range(n):
        ip, mark, pid = owned[rng.randrange(len(owned))]
        roll = rng.random()
        sport, dport, proto = rng.randrange(1024, 65536), rng.choice((443, 80, 8883, 53)), rng.choice((TCP, UDP))
        dst = f"198.51.{rng.randrange(100)}.{rng.randrange(1, 255)}"
        dscp = mark
        if roll < 0.45:
            row = rng.choice(rows_sorted[pid])
            dst = row.addr or dst
            proto = row.protocol if row.protocol is not None else proto
            if row.port is not None:
                if row.port_side == "dst":
                    dport = row.port
                else:
                    sport = row.port
        elif roll < 0.55:
            dscp = rng.choice(common)
        elif roll < 0.6:
            ip = f"100.64.{rng.randrange(256)}.{rng.randrange(1, 255)}"
        elif roll < 0.65:
            dscp = rng.choice([m for m in allocatable_marks() if m > 40])
        out.append(Packet(ip, dst, sport, dport, proto, dscp=dscp, ts=i))
    return out


def bench(n_packets: int = 200_000, seed: int = 0) -> BenchResult:
    rng = random.Random(seed)
    pipe, rows, owned = build_world(rng)
    packets = random_packets(rng, n_packets, owned, rows)
    process = pipe.process
    start = time.perf_counter()
    for p in packets:
        process(p)
    return BenchResult(n_packets, time.perf_counter() - start)
