"""Scenario files: a seed, config overrides, MUD fixtures, zones and events.

A scenario is a JSON object::

    {
      "schema": 1,
      "seed": 7,
      "config": {"refresh_period": 300},
      "mud_files": {"https://camco.example/mud/cam.json": "../profiles/camera.json"},
      "zones": [{"origin": "camco.example", "authority": "camco",
                 "records": {"api.camco.example": ["198.51.100.10"]}}],
      "events": [{"ts": 0, "type": "customer_join", "customer": "home1",
                  "external_ip": "203.0.113.1"}, ...]
    }

A bare JSON array is accepted as the event list of a scenario with seed 0.
Events must be ordered by ``ts`` (missing ``ts`` means "now").
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ScenarioParseError

SCHEMA = 1

# event type -> required keys
EVENT_KEYS: dict[str, tuple[str, ...]] = {
    "customer_join": ("customer", "external_ip"),
    "device_join": ("customer", "mac"),
    "device_leave": ("customer", "mac"),
    "packet": ("customer", "mac", "dst", "dport"),
    "inbound": ("customer", "src", "dport"),
    "p2p": ("customer", "mac"),
    "trace": ("customer", "file"),
    "tick": ("n",),
    "ip_change": ("customer", "ip"),
    "dns_zone_set": ("name", "addrs"),
    "dns_poison": ("name", "addrs"),
    "dns_fail": ("name",),
    "classify_oracle_hint": ("mac", "verdict"),
    "svm_account": ("client", "mac"),
    "svm_signup": ("client", "customer"),
    "iad_move": ("client", "ext_ip", "int_ip"),
    "local_agent": ("customer", "enabled"),
    "refresh": (),
}


@dataclass
class ZoneSpec:
    origin: str
    authority: str
    records: dict[str, list[str]] = field(default_factory=dict)
    ttl: int | None = None


@dataclass
class Scenario:
    seed: int = 0
    config: dict = field(default_factory=dict)
    mud_files: dict[str, bytes] = field(default_factory=dict)
    zones: list[ZoneSpec] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    base_dir: Path = field(default_factory=Path.cwd)
    name: str = "scenario"

    def trace_path(self, name: str) -> Path:
        path = Path(name)
        return path if path.is_absolute() else self.base_dir / path


def _check_events(events: list) -> list[dict]:
    last_ts = 0
    out = []
    for i, ev in enumerate(events):
        if not isinstance(ev, dict) or "type" not in ev:
            raise ScenarioParseError(f"event {i}: expected an object with a 'type'")
        kind = ev["type"]
        if kind not in EVENT_KEYS:
            raise ScenarioParseError(f"event {i}: unknown type {kind!r}")
        missing = [k for k in EVENT_KEYS[kind] if k not in ev]
        if missing:
            raise ScenarioParseError(f"event {i} ({kind}): missing {missing}")
        ts = ev.get("ts")
        if ts is not None:
            if not isinstance(ts, int) or ts < last_ts:
                raise ScenarioParseError(f"event {i}: ts {ts!r} goes backwards (last {last_ts})")
            last_ts = ts
        out.append(dict(ev))
    return out


def _mud_bytes(ref, base_dir: Path) -> bytes:
    if isinstance(ref, dict):
        return json.dumps(ref).encode()
    if isinstance(ref, str):
        path = Path(ref)
        path = path if path.is_absolute() else base_dir / path
        try:
            return path.read_bytes()
        except OSError as exc:
            raise ScenarioParseError(f"mud file {ref}: {exc}") from exc
    raise ScenarioParseError(f"mud file reference must be a path or an object, got {type(ref).__name__}")


def parse_scenario(data, base_dir: Path | None = None, name: str = "scenario") -> Scenario:
    base_dir = base_dir or Path.cwd()
    if isinstance(data, list):
        return Scenario(events=_check_events(data), base_dir=base_dir, name=name)
    if not isinstance(data, dict):
        raise ScenarioParseError("scenario must be a JSON object or an event array")
    if data.get("schema", SCHEMA) != SCHEMA:
        raise ScenarioParseError(f"unsupported scenario schema {data.get('schema')!r}")
    unknown = set(data) - {"schema", "seed", "config", "mud_files", "zones", "events", "description"}
    if unknown:
        raise ScenarioParseError(f"unknown scenario keys: {sorted(unknown)}")
    zones = []
    for z in data.get("zones", []):
        try:
            zones.append(ZoneSpec(z["origin"], z["authority"], dict(z.get("records", {})), z.get("ttl")))
        except (KeyError, TypeError) as exc:
            raise ScenarioParseError(f"bad zone {z!r}") from exc
    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        raise ScenarioParseError("seed must be an integer")
    return Scenario(
        seed=seed,
        config=dict(data.get("config", {})),
        mud_files={url: _mud_bytes(ref, base_dir) for url, ref in data.get("mud_files", {}).items()},
        zones=zones,
        events=_check_events(data.get("events", [])),
        base_dir=base_dir,
        name=name,
    )


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ScenarioParseError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(f"{path}: not valid JSON: {exc}") from exc
    return parse_scenario(data, path.parent, path.stem)
