import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

import trained  # noqa: E402


@pytest.fixture(scope="session")
def static_pin():
    return trained.static_pin()


@pytest.fixture(scope="session")
def rupture_net():
    return trained.rupture_net()


@pytest.fixture(scope="session")
def contact_dynamics():
    return trained.contact_dynamics()


# -- acceptance verdicts: one PASS/FAIL line per criterion in the terminal summary

VERDICTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.call_report = rep


@pytest.fixture
def verdict(request):
    """Record named checks for the test's criterion; call it once, then assert on the returned dict."""
    number, title = request.node.get_closest_marker("criterion").args

    def record(checks):
        ok = all(passed for _, passed, _ in checks)
        detail = "; ".join(f"{label} = {value} [{'ok' if passed else 'FAIL'}]" for label, passed, value in checks)
        VERDICTS[number] = (ok, title, detail)
        print(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        return {label: passed for label, passed, _ in checks}

    yield record
    rep = getattr(request.node, "call_report", None)
    if number not in VERDICTS and rep is not None and rep.failed:
        VERDICTS[number] = (False, title, "raised before recording: " + rep.longrepr.reprcrash.message
                            if hasattr(rep.longrepr, "reprcrash") else "raised before recording")


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        ok, title, detail = VERDICTS[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
