"""Builders shared by the integration-style tests."""

from __future__ import annotations

import json

from mudguard.config import Config
from mudguard.harness import Simulation, parse_scenario
from mudguard.mud import parse_mud

from conftest import PROFILES, SCENARIOS

CAM_URL = "https://camco.example/mud/cam-100.json"
P2P_URL = "https://camco.example/mud/cam-200.json"
THERMO_URL = "https://thermco.example/mud/t1.json"
PLUG_URL = "https://plugco.example/mud/plug-1.json"
SPEAKER_URL = "https://speakco.example/mud/s1.json"
CPE_URL = "https://isp.example/mud/cpe-gw.json"

CAM = "02:00:00:00:01:01"
CAM2 = "02:00:00:00:02:01"
PHONE = "02:00:00:00:0f:01"


def mud_files() -> dict[str, str]:
    out = {}
    for path in sorted(PROFILES.glob("*.json")):
        out[parse_mud(path.read_bytes()).mud_url] = str(path)
    return out


def zones() -> list[dict]:
    return json.loads((SCENARIOS / "poc_two_homes.json").read_text())["zones"]


def scenario(events=(), config=None, seed=1, name="test"):
    data = {"seed": seed, "config": dict(config or {}), "mud_files": mud_files(),
            "zones": zones(), "events": list(events)}
    return parse_scenario(data, SCENARIOS, name)


def sim(events=(), config=None, seed=1) -> Simulation:
    sc = scenario(events, config, seed)
    s = Simulation(sc, Config.from_dict(sc.config))
    for ev in sc.events:
        s.apply(ev)
    return s


def join(customer="home1", ip="100.64.0.11", ts=0, **kw):
    return {"ts": ts, "type": "customer_join", "customer": customer, "external_ip": ip, **kw}


def device(mac, url=None, customer="home1", ts=1, **kw):
    ev = {"ts": ts, "type": "device_join", "customer": customer, "mac": mac, **kw}
    if url:
        ev["mud_url"] = url
    return ev
