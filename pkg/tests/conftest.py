from __future__ import annotations

import json
import warnings
from pathlib import Path

import pytest

from edgemesh.grammar import DegenerateSpatialWarning

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True)
def _quiet_degenerate_spatial():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateSpatialWarning)
        yield


def load_scenario(name: str) -> dict:
    return json.loads((SCENARIOS / f"{name}.json").read_text())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
