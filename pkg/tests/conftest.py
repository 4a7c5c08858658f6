from __future__ import annotations

from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
PROFILES = ROOT / "profiles"
SCENARIOS = ROOT / "scenarios"
FIXTURES = Path(__file__).resolve().parent / "fixtures"

# acceptance criterion id -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def profiles_dir() -> Path:
    return PROFILES


@pytest.fixture
def scenarios_dir() -> Path:
    return SCENARIOS


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.removeprefix("AC"))):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key}: {'PASS' if ok else 'FAIL'}  {detail}")
