"""Alert records emitted to the harness sink."""

from __future__ import annotations

from dataclasses import dataclass

from .net import ConnKey

REASONS = ("whitelist_violation", "new_device", "unidentified_endpoint", "local_violation")


@dataclass(frozen=True)
class Alert:
    ts: int
    customer_id: str
    mac: str | None
    profile_id: str | None
    conn_key: ConnKey | None
    reason: str

    def __post_init__(self):
        if self.reason not in REASONS:
            raise ValueError(f"unknown alert reason {self.reason!r}")

    def to_dict(self) -> dict:
        return {
            "ts": self.ts,
            "customer_id": self.customer_id,
            "mac": self.mac,
            "profile_id": self.profile_id,
            "conn_key": list(self.conn_key) if self.conn_key else None,
            "reason": self.reason,
        }
