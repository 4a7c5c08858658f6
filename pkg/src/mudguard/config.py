"""Run-time configuration. Every tunable default lives here."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class Config:
    # pipeline
    table_budget: int = 256
    first_packet_capacity: int = 1 << 20
    fault_injection: str | None = None

    # control plane
    min_observations: int = 3
    dwell_ticks: int = 100
    mud_retry_max: int = 5
    non_iot_domain_threshold: int = 10
    triggered_resolution: bool = True
    alert_on_new_device: bool = False
    aggregate_threshold: int = 8
    aggregate_prefix: int = 24
    default_mark_window: int | None = None
    acs_apply_delay: int = 0
    cpe_mud_url: str | None = None

    # DNS
    refresh_period: int = 300
    secure_resolver: bool = True
    bypass_suffixes: list[str] = field(default_factory=lambda: ["svm.example"])
    direct_authority: bool = False
    default_ttl: int = 60
    svm_ttl: int = 30

    # enforcement
    enforce_acls: bool = True
    acl_idle_expiry: int | None = None

    # P2P / SVM
    svm_parent: str = "svm.example"
    svm_dual_records: bool = False
    hybrid: bool = False
    local_alert_only: bool = False
    keepalive_interval: int = 15
    two_factor_attempts: int = 3

    # network plumbing
    isp_resolver: str = "192.0.2.53"
    vnf_attached: bool = True

    @classmethod
    def from_dict(cls, data: dict) -> Config:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> Config:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(data)

    def validate(self) -> None:
        if self.table_budget <= 3:
            raise ConfigError("table_budget must leave room for profile tables")
        if self.refresh_period <= 0:
            raise ConfigError("refresh_period must be positive")
        if not 0 <= self.aggregate_prefix <= 32:
            raise ConfigError("aggregate_prefix must be in [0, 32]")
        if self.fault_injection not in (None, "drop_whitelist_row"):
            raise ConfigError(f"unknown fault injection {self.fault_injection!r}")

    def to_dict(self) -> dict:
        return asdict(self)
