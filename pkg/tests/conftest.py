import dataclasses
from types import MappingProxyType

import pytest

from ldeqd import materials


@pytest.fixture(scope="session")
def db():
    return materials.load_material_db()


@pytest.fixture(scope="session")
def db_no_ep(db):
    """Default database with the Kane energy (and its bowing) switched off."""
    bins = {k: dataclasses.replace(p, ep=0.0) for k, p in db.binaries.items()}
    terns = {
        k: materials.Ternary(t.a, t.b, MappingProxyType({f: c for f, c in t.bowing.items() if f != "ep"}))
        for k, t in db.ternaries.items()
    }
    return materials.MaterialDB(bins, terns)


# one PASS/FAIL line per acceptance criterion, echoed in the terminal summary
_CRITERIA: dict = {}


@pytest.fixture
def criterion(request):
    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _CRITERIA[request.node.nodeid] = line
        print(line)
        return ok

    return record


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid and report.failed:
        if report.nodeid not in _CRITERIA:
            _CRITERIA[report.nodeid] = f"FAIL  {report.nodeid.split('::')[-1]}: raised before recording a result"


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA.values():
            terminalreporter.write_line(line)
