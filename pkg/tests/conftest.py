import time
from importlib import resources
from pathlib import Path

import pytest

from ctsdr.scenario import load_scenario, run_scenario

SCENARIO_DIR = Path(str(resources.files("ctsdr") / "scenarios"))
BUNDLED = sorted(p.stem for p in SCENARIO_DIR.glob("*.yaml"))

# (criterion, passed, detail) rows filled in by test_acceptance
ACCEPTANCE_LINES: list = []


def scenario_path(name: str) -> Path:
    return SCENARIO_DIR / f"{name}.yaml"


@pytest.fixture(scope="session")
def bundled_runs(tmp_path_factory):
    """Run every bundled scenario once at full resolution; maps name -> artifact paths.

    Wall-clock time of each run is kept in ``get.elapsed``.
    """
    cache = {}

    def get(name):
        if name not in cache:
            out = tmp_path_factory.mktemp(name)
            sc = load_scenario(scenario_path(name))
            start = time.perf_counter()
            cache[name] = run_scenario(sc, out)
            get.elapsed[name] = time.perf_counter() - start
        return cache[name]

    get.elapsed = {}
    return get


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
