"""Brute-force reference for pipeline verdicts.

Every logged packet is re-judged by a linear scan over its device profile's
entries, resolving names against the authoritative zone contents at the
packet's timestamp (rebuilt from zone history). Nothing here touches the
pipeline tables, the active resolver or any cache.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

from ..net import COMMON_DSCP

LEGITIMATE = "legitimate"
VIOLATION = "violation"
IGNORED = "ignored"
UNIDENTIFIED = "unidentified"


def zone_truth_at(history: Iterable, ts: int) -> dict[str, frozenset[str]]:
    """Record contents after every change stamped at or before ``ts``."""
    truth: dict[str, frozenset[str]] = {}
    for when, name, addrs in history:
        if when > ts:
            break
        truth[name] = frozenset(addrs)
    return truth


def entry_allows(entry: Mapping, answers: Mapping[str, Iterable[str]], conn) -> bool:
    _, sport, dst_ip, dport, proto = conn
    if entry["protocol"] is not None and proto != entry["protocol"]:
        return False
    if entry["port"] is not None:
        port = dport if entry["direction"] == "device-to-cloud" else sport
        if port != entry["port"]:
            return False
    if entry["dns_name"] is not None:
        return dst_ip in answers.get(entry["dns_name"], ())
    if entry["ip_literal"] is not None:
        return dst_ip == entry["ip_literal"]
    return True


def expected_verdict(entries: Iterable[Mapping] | None, answers, conn, dscp: int) -> str:
    if dscp in COMMON_DSCP:
        return IGNORED
    if entries is None:
        return UNIDENTIFIED
    for entry in entries:
        if entry_allows(entry, answers, conn):
            return LEGITIMATE
    return VIOLATION


def effective_verdict(log_entry: Mapping) -> str:
    """Collapse (pipeline verdict, controller outcome) into one judgement.

    A violation that the triggered re-resolution proved stale counts as
    legitimate; one the controller suppressed without any whitelist change
    means the pipeline itself disagreed with its own whitelist.
    """
    if log_entry["verdict"] == IGNORED:
        return IGNORED
    outcome = log_entry["outcome"]
    if outcome in (LEGITIMATE, "suppressed"):
        return LEGITIMATE
    if outcome in ("alert", "suppressed_unchanged"):
        return VIOLATION
    return UNIDENTIFIED


@dataclass
class OracleResult:
    checked: int = 0
    diffs: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.diffs


def oracle_check(report, scenario=None) -> OracleResult:
    """Compare every verdict in ``report`` with the brute-force expectation.

    ``report`` is a RunReport or its dict form. ``scenario`` is accepted for
    symmetry with the CLI and is not needed: the report carries the zone
    history and the profile entries.
    """
    data = report.to_dict() if hasattr(report, "to_dict") else report
    history = sorted(data["zone_history"], key=lambda r: r[0])
    profiles = data["profiles"]
    result = OracleResult()
    cache: dict[int, dict] = {}
    for entry in data["verdict_log"]:
        ts = entry["ts"]
        answers = cache.get(ts)
        if answers is None:
            answers = cache[ts] = zone_truth_at(history, ts)
        origin = entry.get("origin") or {}
        pid = origin.get("profile")
        entries = profiles[pid]["entries"] if pid is not None else None
        want = expected_verdict(entries, answers, entry["conn"], entry["dscp"])
        got = effective_verdict(entry)
        result.checked += 1
        if want != got:
            result.diffs.append({
                "seq": entry["seq"],
                "ts": ts,
                "conn": entry["conn"],
                "mac": origin.get("mac"),
                "profile": pid,
                "expected": want,
                "got": got,
            })
    return result
