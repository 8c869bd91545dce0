"""Shared pipeline fixtures and the per-criterion acceptance summary."""

import pytest

from diffuq import harness

_CRITERIA = {}


@pytest.fixture(scope="session")
def reference_run():
    """The default configuration at seed 0, run once per session."""
    return harness.run_pipeline(harness.PipelineConfig(seed=0))


@pytest.fixture
def criterion_detail(request):
    """Tests append short strings here; they are shown next to the pass/fail line."""
    details = []
    request.node.criterion_detail = details
    return details


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    number, name = mark.args
    detail = "; ".join(getattr(item, "criterion_detail", []))
    _CRITERIA[number] = (name, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        name, ok, detail = _CRITERIA[number]
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
