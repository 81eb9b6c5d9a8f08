"""Collects ``@pytest.mark.criterion(n)`` outcomes into one summary line per criterion."""

import pytest

_OUTCOMES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


@pytest.fixture
def note(request):
    """Attach a short result description to the current criterion test."""
    def add(text):
        request.node.user_properties.append(("note", str(text)))
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        notes = [v for k, v in item.user_properties if k == "note"]
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _OUTCOMES.setdefault(marker.args[0], []).append((status, item.name, notes))


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        parts = _OUTCOMES[n]
        statuses = {s for s, _, _ in parts}
        status = "FAIL" if "FAIL" in statuses else ("PASS" if "PASS" in statuses else "SKIP")
        detail = "; ".join(" ".join(notes) or name for _, name, notes in parts)
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
