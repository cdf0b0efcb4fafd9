import numpy as np
import pytest

from oscsim.mesh import build_line_mesh, build_rod_mesh


@pytest.fixture(scope="session")
def rod_mesh():
    """Four-rod device on a 50 nm electrode."""
    return build_rod_mesh(150e-9, 50e-9, 79e-9, 6.25e-9, 4, target_h=1.5625e-9)


@pytest.fixture(scope="session")
def small_rod_mesh():
    """Coarse single-rod cell used for fast 2D checks."""
    return build_rod_mesh(60e-9, 20e-9, 30e-9, 10e-9, 1, target_h=2.5e-9)


@pytest.fixture
def line_mesh():
    return build_line_mesh(100e-9, 100, 50e-9)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting --------------------------------------------------------------------
# Tests tagged ``@pytest.mark.acceptance("ACn")`` are grouped by criterion; the
# terminal summary prints one PASS/FAIL line per criterion with the details
# each test attached through the ``record`` fixture.

_criteria: dict[str, dict] = {}


@pytest.fixture
def record(request):
    """Attach a one-line measurement to the current acceptance test."""
    def _record(text: str):
        request.node.user_properties.append(("detail", text))
    return _record


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None or call.when != "call":
        return
    name = marker.args[0]
    entry = _criteria.setdefault(name, {"title": marker.kwargs.get("title", ""),
                                        "failed": [], "passed": [], "details": []})
    (entry["failed"] if call.excinfo is not None else entry["passed"]).append(item.name)


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    for key, value in report.user_properties:
        if key == "detail":
            for entry in _criteria.values():
                if report.nodeid.split("::")[-1] in entry["passed"] + entry["failed"]:
                    entry["details"].append(value)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name in sorted(_criteria, key=lambda s: int(s[2:])):
        e = _criteria[name]
        status = "FAIL" if e["failed"] else "PASS"
        line = f"{name} {status}: {e['title']}"
        if e["failed"]:
            line += f" (failing: {', '.join(e['failed'])})"
        tr.write_line(line)
        for d in e["details"]:
            tr.write_line(f"    {d}")
